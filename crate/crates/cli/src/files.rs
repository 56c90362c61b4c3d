use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

/// A required input that does not exist; reported with exit code 2.
#[derive(Debug)]
pub struct MissingPath(pub PathBuf);

impl fmt::Display for MissingPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no such file or directory: {}", self.0.display())
    }
}

impl std::error::Error for MissingPath {}

pub fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(MissingPath(path.to_path_buf()).into());
    }
    Ok(())
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<MissingPath>()) {
        2
    } else {
        1
    }
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// CSV files under `root`, keyed by image id: either `root/<image>/*.csv`
/// or, when `root` itself holds CSVs, a single group named after `root`.
pub fn csv_groups(root: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    require(root)?;
    let is_csv = |p: &PathBuf| p.is_file() && p.extension().is_some_and(|e| e == "csv");
    let mut groups = BTreeMap::new();
    if root.is_file() {
        let image = root.parent().map(|p| stem(p)).unwrap_or_default();
        groups.insert(image, vec![root.to_path_buf()]);
        return Ok(groups);
    }
    let entries = sorted_dir(root)?;
    let flat: Vec<PathBuf> = entries.iter().filter(|p| is_csv(p)).cloned().collect();
    if !flat.is_empty() {
        groups.insert(stem(root), flat);
    }
    for dir in entries.iter().filter(|p| p.is_dir()) {
        let files: Vec<PathBuf> = sorted_dir(dir)?.into_iter().filter(|p| is_csv(p)).collect();
        if !files.is_empty() {
            groups.insert(stem(dir), files);
        }
    }
    Ok(groups)
}

/// Reads every file in parallel, preserving order; fails listing every
/// file that could not be read.
pub fn read_groups<T, E, F>(groups: &BTreeMap<String, Vec<PathBuf>>, read: F) -> Result<BTreeMap<String, Vec<T>>>
where
    T: Send,
    E: fmt::Display,
    F: Fn(&Path) -> std::result::Result<T, E> + Sync,
{
    let mut out = BTreeMap::new();
    let mut failures = Vec::new();
    for (image, files) in groups {
        let results: Vec<_> = files.par_iter().map(|f| read(f).map_err(|e| format!("{}: {e}", f.display()))).collect();
        let mut items = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(v) => items.push(v),
                Err(msg) => failures.push(msg),
            }
        }
        out.insert(image.clone(), items);
    }
    if !failures.is_empty() {
        bail!("{} unreadable file(s):\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(out)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_nested_and_flat_layouts() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("b")).unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("b/2.csv"), "").unwrap();
        fs::write(dir.path().join("b/1.csv"), "").unwrap();
        fs::write(dir.path().join("a/x.txt"), "").unwrap();
        let g = csv_groups(dir.path()).unwrap();
        assert_eq!(g.keys().collect::<Vec<_>>(), ["b"]);
        assert_eq!(g["b"].iter().map(|p| stem(p)).collect::<Vec<_>>(), ["1", "2"]);
        let flat = csv_groups(&dir.path().join("b")).unwrap();
        assert_eq!(flat["b"].len(), 2);
    }

    #[test]
    fn missing_root_maps_to_exit_two() {
        let err = csv_groups(Path::new("/definitely/not/here")).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("/definitely/not/here"));
    }

    #[test]
    fn unreadable_files_are_all_listed() {
        let mut groups = BTreeMap::new();
        groups.insert("img".to_string(), vec![PathBuf::from("one"), PathBuf::from("two")]);
        let err = read_groups(&groups, |p: &Path| Err::<(), _>(format!("bad {}", p.display()))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 unreadable") && msg.contains("bad one") && msg.contains("bad two"), "{msg}");
    }
}
