//! Spherical geometry for equirectangular gaze data.
//!
//! Three coordinate systems are in play:
//!
//! - [`LatLon`]: latitude `phi` in `[-π/2, π/2]`, longitude `lam` in `(-π, π]`.
//! - [`UnitVec3`]: a point on the unit sphere, the representation the
//!   diffusion model is trained on.
//! - [`PixelCoord`]: fractional row/column on an equirectangular raster with
//!   `(φ = π/2, λ = -π)` at the top-left corner and rows increasing southwards.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GazeSequence;

/// Maximum norm deviation accepted by [`UnitVec3::new`] and [`unit_to_latlon`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("vector ({x}, {y}, {z}) has norm {norm}, expected 1")]
    NonUnitVector { x: f64, y: f64, z: f64, norm: f64 },
    #[error("cannot normalize a zero or non-finite vector")]
    DegenerateVector,
    #[error("sequence has {len} samples, at least {min} required")]
    SequenceTooShort { len: usize, min: usize },
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// Latitude/longitude pair in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub phi: f64,
    pub lam: f64,
}

impl LatLon {
    /// Builds a normalized pair: latitude is clamped to `[-π/2, π/2]`,
    /// longitude is wrapped into `(-π, π]`.
    pub fn new(phi: f64, lam: f64) -> Self {
        Self {
            phi: phi.clamp(-FRAC_PI_2, FRAC_PI_2),
            lam: wrap_angle(lam),
        }
    }

    pub fn from_degrees(phi_deg: f64, lam_deg: f64) -> Self {
        Self::new(phi_deg.to_radians(), lam_deg.to_radians())
    }

    pub fn to_unit(self) -> UnitVec3 {
        latlon_to_unit(self)
    }
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec3 {
    /// Accepts the components only if their norm is within
    /// [`UNIT_NORM_TOLERANCE`] of one.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(GeometryError::NonUnitVector { x, y, z, norm });
        }
        Ok(Self { x, y, z })
    }

    /// Projects an arbitrary non-zero vector onto the sphere.
    pub fn normalize(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GeometryError::DegenerateVector);
        }
        Ok(Self {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Self) -> [f64; 3] {
        [
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        ]
    }

    /// Central angle to `other` in degrees, accurate for both tiny and
    /// near-antipodal separations.
    pub fn angle_deg(self, other: Self) -> f64 {
        let [cx, cy, cz] = self.cross(other);
        let sin = (cx * cx + cy * cy + cz * cz).sqrt();
        sin.atan2(self.dot(other)).to_degrees()
    }

    pub fn to_latlon(self) -> LatLon {
        LatLon {
            phi: self.z.atan2((self.x * self.x + self.y * self.y).sqrt()),
            lam: self.y.atan2(self.x),
        }
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Fractional position on an equirectangular raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: f64,
    pub col: f64,
    pub height: usize,
    pub width: usize,
}

impl PixelCoord {
    /// Integer cell containing this coordinate.
    pub fn cell(self) -> (usize, usize) {
        let r = (self.row.floor() as usize).min(self.height - 1);
        let c = (self.col.floor() as usize).min(self.width - 1);
        (r, c)
    }

    /// Row/column displacement to `other`. With `wrap` the column delta is the
    /// shorter way around the panorama.
    pub fn delta(self, other: Self, wrap: bool) -> (f64, f64) {
        let dr = other.row - self.row;
        let mut dc = other.col - self.col;
        if wrap {
            let w = self.width as f64;
            dc = (dc + w / 2.0).rem_euclid(w) - w / 2.0;
        }
        (dr, dc)
    }

    /// Euclidean pixel distance to `other`.
    pub fn distance(self, other: Self, wrap: bool) -> f64 {
        let (dr, dc) = self.delta(other, wrap);
        dr.hypot(dc)
    }
}

/// `(cos φ cos λ, cos φ sin λ, sin φ)`.
pub fn latlon_to_unit(p: LatLon) -> UnitVec3 {
    let (sp, cp) = p.phi.sin_cos();
    let (sl, cl) = p.lam.sin_cos();
    UnitVec3 {
        x: cp * cl,
        y: cp * sl,
        z: sp,
    }
}

/// Inverse of [`latlon_to_unit`]. Longitude is 0 at the exact poles.
pub fn unit_to_latlon(v: UnitVec3) -> Result<LatLon, GeometryError> {
    let checked = UnitVec3::new(v.x, v.y, v.z)?;
    Ok(checked.to_latlon())
}

pub fn latlon_to_pixel(p: LatLon, height: usize, width: usize) -> PixelCoord {
    assert!(height >= 1 && width >= 1, "raster must be non-empty");
    let (h, w) = (height as f64, width as f64);
    let col = ((p.lam + PI) / TAU * w).rem_euclid(w);
    // rem_euclid can return exactly `w` for tiny negative inputs.
    let col = if col >= w { 0.0 } else { col };
    let row = ((FRAC_PI_2 - p.phi) / PI * h).clamp(0.0, h.next_down());
    PixelCoord {
        row,
        col,
        height,
        width,
    }
}

/// Maps a fractional raster position back to the sphere.
pub fn pixel_to_latlon(row: f64, col: f64, height: usize, width: usize) -> LatLon {
    let phi = FRAC_PI_2 - row / height as f64 * PI;
    let lam = col / width as f64 * TAU - PI;
    LatLon::new(phi, lam)
}

/// Latitude/longitude of the centre of integer cell `(row, col)`.
pub fn pixel_center_latlon(row: usize, col: usize, height: usize, width: usize) -> LatLon {
    pixel_to_latlon(row as f64 + 0.5, col as f64 + 0.5, height, width)
}

/// Central angle in degrees using the haversine formulation.
pub fn great_circle_deg(a: LatLon, b: LatLon) -> f64 {
    let dphi = b.phi - a.phi;
    let dlam = b.lam - a.lam;
    let h = (dphi / 2.0).sin().powi(2) + a.phi.cos() * b.phi.cos() * (dlam / 2.0).sin().powi(2);
    (2.0 * h.sqrt().min(1.0).asin()).to_degrees()
}

/// Per-sample angular speed in degrees per second.
///
/// Interior samples use the great-circle displacement between the two
/// neighbours divided by twice the sample interval; the endpoints use
/// one-sided differences.
pub fn angular_velocity(seq: &GazeSequence) -> Result<Vec<f64>, GeometryError> {
    velocity_of_points(&seq.points, seq.sample_rate)
}

pub fn velocity_of_points(points: &[UnitVec3], sample_rate: f64) -> Result<Vec<f64>, GeometryError> {
    let n = points.len();
    if n < 3 {
        return Err(GeometryError::SequenceTooShort { len: n, min: 3 });
    }
    let mut v = Vec::with_capacity(n);
    v.push(points[0].angle_deg(points[1]) * sample_rate);
    for i in 1..n - 1 {
        v.push(points[i - 1].angle_deg(points[i + 1]) * sample_rate / 2.0);
    }
    v.push(points[n - 2].angle_deg(points[n - 1]) * sample_rate);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn unit_projection_examples() {
        let v = latlon_to_unit(LatLon::new(0.0, 0.0));
        assert_eq!((v.x, v.y, v.z), (1.0, 0.0, 0.0));
        let v = latlon_to_unit(LatLon::new(FRAC_PI_2, 0.0));
        assert!(close(v.x, 0.0, 1e-15) && close(v.y, 0.0, 1e-15) && close(v.z, 1.0, 1e-15));
        let v = latlon_to_unit(LatLon::new(PI / 4.0, FRAC_PI_2));
        assert!(close(v.x, 0.0, 1e-12));
        assert!(close(v.y, 0.70711, 1e-5));
        assert!(close(v.z, 0.70711, 1e-5));
    }

    #[test]
    fn inverse_projection_examples() {
        let p = unit_to_latlon(UnitVec3::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!((p.phi, p.lam), (0.0, 0.0));
        let p = unit_to_latlon(UnitVec3 { x: 0.0, y: 0.0, z: -1.0 }).unwrap();
        assert_eq!((p.phi, p.lam), (-FRAC_PI_2, 0.0));
        let err = unit_to_latlon(UnitVec3 { x: 2.0, y: 0.0, z: 0.0 });
        assert!(matches!(err, Err(GeometryError::NonUnitVector { .. })));
    }

    #[test]
    fn pixel_mapping_examples() {
        let p = latlon_to_pixel(LatLon::new(0.0, 0.0), 1024, 2048);
        assert_eq!((p.row, p.col), (512.0, 1024.0));
        let p = latlon_to_pixel(LatLon::new(FRAC_PI_2, -PI), 1024, 2048);
        assert_eq!((p.row, p.col), (0.0, 0.0));
        let p = latlon_to_pixel(LatLon::new(-PI / 4.0, FRAC_PI_2), 128, 256);
        assert!(close(p.row, 96.0, 1e-9) && close(p.col, 192.0, 1e-9));
        // south pole stays inside the raster
        let p = latlon_to_pixel(LatLon::new(-FRAC_PI_2, 0.0), 128, 256);
        assert!(p.row < 128.0);
    }

    #[test]
    fn wrapped_and_unwrapped_deltas() {
        let a = PixelCoord { row: 10.0, col: 0.5, height: 128, width: 256 };
        let b = PixelCoord { row: 10.0, col: 255.5, height: 128, width: 256 };
        assert!(close(a.distance(b, false), 255.0, 1e-12));
        assert!(close(a.distance(b, true), 1.0, 1e-12));
    }

    #[test]
    fn great_circle_examples() {
        let a = LatLon::new(0.3, 1.2);
        assert_eq!(great_circle_deg(a, a), 0.0);
        let anti = LatLon::new(-0.3, 1.2 - PI);
        assert!(close(great_circle_deg(a, anti), 180.0, 1e-9));
        assert!(close(great_circle_deg(LatLon::new(0.0, 0.0), LatLon::new(0.0, FRAC_PI_2)), 90.0, 1e-12));
    }

    fn equator_drift(n: usize, step_deg: f64) -> GazeSequence {
        let points = (0..n)
            .map(|i| LatLon::from_degrees(0.0, i as f64 * step_deg).to_unit())
            .collect();
        GazeSequence::new(points, 30.0, "obs", "img").unwrap()
    }

    #[test]
    fn velocity_examples() {
        let still = GazeSequence::new(vec![LatLon::new(0.2, 0.4).to_unit(); 10], 30.0, "o", "i").unwrap();
        assert!(angular_velocity(&still).unwrap().iter().all(|&v| v == 0.0));

        let drift = equator_drift(12, 1.0);
        let v = angular_velocity(&drift).unwrap();
        for &x in &v[1..v.len() - 1] {
            assert!(close(x, 30.0, 1e-9), "{x}");
        }

        let mut rev = drift.clone();
        rev.points.reverse();
        let mut vr = angular_velocity(&rev).unwrap();
        vr.reverse();
        for (a, b) in v.iter().zip(&vr) {
            assert!(close(*a, *b, 1e-12));
        }

        let short = GazeSequence::new(vec![LatLon::new(0.0, 0.0).to_unit(); 2], 30.0, "o", "i").unwrap();
        assert!(matches!(angular_velocity(&short), Err(GeometryError::SequenceTooShort { .. })));
    }

    fn latlon_strategy() -> impl Strategy<Value = LatLon> {
        (-FRAC_PI_2..=FRAC_PI_2, -PI..PI).prop_map(|(phi, lam)| LatLon::new(phi, lam))
    }

    proptest! {
        #[test]
        fn round_trip_identity(p in latlon_strategy()) {
            let v = latlon_to_unit(p);
            prop_assert!((v.norm() - 1.0).abs() < 1e-12);
            let q = unit_to_latlon(v).unwrap();
            prop_assert!((p.phi - q.phi).abs() < 1e-9);
            if p.phi.abs() < FRAC_PI_2 - 1e-6 {
                prop_assert!(wrap_angle(p.lam - q.lam).abs() < 1e-9);
            }
        }

        #[test]
        fn great_circle_is_a_metric(a in latlon_strategy(), b in latlon_strategy(), c in latlon_strategy()) {
            let ab = great_circle_deg(a, b);
            let ba = great_circle_deg(b, a);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            prop_assert!(ab <= great_circle_deg(a, c) + great_circle_deg(c, b) + 1e-9);
        }

        #[test]
        fn pixel_column_wraps(p in latlon_strategy()) {
            let a = latlon_to_pixel(p, 128, 256);
            let b = latlon_to_pixel(LatLon { phi: p.phi, lam: p.lam + TAU }, 128, 256);
            prop_assert!(a.delta(b, true).1.abs() < 1e-9);
            prop_assert!((0.0..256.0).contains(&a.col));
            prop_assert!((0.0..128.0).contains(&a.row));
        }

        #[test]
        fn haversine_matches_vector_angle(a in latlon_strategy(), b in latlon_strategy()) {
            let d1 = great_circle_deg(a, b);
            let d2 = a.to_unit().angle_deg(b.to_unit());
            prop_assert!((d1 - d2).abs() < 1e-6);
        }
    }
}
