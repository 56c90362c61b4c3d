//! 3x5 bitmap digits for fixation labels.

use image::{Rgb, RgbImage};

const GLYPHS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

pub const GLYPH_W: u32 = 3;
pub const GLYPH_H: u32 = 5;

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Pixel size of `text` at `scale`.
pub fn text_size(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().filter(char::is_ascii_digit).count() as u32;
    ((n * (GLYPH_W + 1)).saturating_sub(1) * scale, GLYPH_H * scale)
}

/// Draws the digits of `text` with the top-left corner at `(x, y)`; other
/// characters are skipped.
pub fn draw_digits(img: &mut RgbImage, text: &str, x: i64, y: i64, scale: u32, color: Rgb<u8>) {
    let s = scale as i64;
    let mut cx = x;
    for d in text.chars().filter_map(|c| c.to_digit(10)) {
        for (row, bits) in GLYPHS[d as usize].iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(img, cx + col as i64 * s + dx, y + row as i64 * s + dy, color);
                        }
                    }
                }
            }
        }
        cx += (GLYPH_W as i64 + 1) * s;
    }
}

/// Digits with a one-pixel (scaled) outline for legibility on any
/// background.
pub fn draw_label(img: &mut RgbImage, text: &str, x: i64, y: i64, scale: u32, fg: Rgb<u8>, bg: Rgb<u8>) {
    let s = scale as i64;
    for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)] {
        draw_digits(img, text, x + dx * s, y + dy * s, scale, bg);
    }
    draw_digits(img, text, x, y, scale, fg);
}
