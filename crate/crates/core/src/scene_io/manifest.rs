use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(tag: &str) -> Option<Split> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest row. Paths are absolute once loaded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub scene_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct RawEntry {
    scene_id: String,
    scene_path: PathBuf,
    mask_path: PathBuf,
    split: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Validate ids, splits and emptiness. Path existence is checked by
    /// [`load_manifest`].
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("empty manifest"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.scene_id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate scene_id `{}` in manifest",
                    e.scene_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for e in &self.entries {
            *counts.get_mut(&e.split).unwrap() += 1;
        }
        counts
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.scene_id.clone())
            .collect()
    }

    pub fn entry(&self, scene_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.scene_id == scene_id)
    }

    /// Training requires every split to be populated.
    pub fn require_splits(&self) -> Result<()> {
        for (split, n) in self.split_counts() {
            if n == 0 {
                return Err(Error::invalid(format!("manifest has no `{split}` entries")));
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parse and validate a manifest. Relative paths resolve against the
/// manifest's own directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<RawEntry> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("manifest does not parse: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::with_capacity(raw.len());
    for r in raw {
        let split = Split::parse(&r.split).ok_or_else(|| {
            Error::invalid(format!(
                "unknown split tag `{}` for scene `{}` (expected train, val or test)",
                r.split, r.scene_id
            ))
        })?;
        entries.push(ManifestEntry {
            scene_path: resolve(base, &r.scene_path),
            mask_path: resolve(base, &r.mask_path),
            scene_id: r.scene_id,
            split,
        });
    }
    let manifest = DatasetManifest::new(entries)?;
    for e in &manifest.entries {
        for p in [&e.scene_path, &e.mask_path] {
            if !p.is_file() {
                return Err(Error::invalid(format!(
                    "scene `{}` references missing file {}",
                    e.scene_id,
                    p.display()
                )));
            }
        }
    }
    let counts = manifest.split_counts();
    log::info!(
        "manifest {}: {} train / {} val / {} test",
        path.display(),
        counts[&Split::Train],
        counts[&Split::Val],
        counts[&Split::Test]
    );
    Ok(manifest)
}

/// Write a manifest; paths under the manifest's directory are stored
/// relative to it.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let raw: Vec<RawEntry> = manifest
        .entries
        .iter()
        .map(|e| RawEntry {
            scene_id: e.scene_id.clone(),
            scene_path: rel(&e.scene_path),
            mask_path: rel(&e.mask_path),
            split: e.split.as_str().to_string(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&raw)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    fn touch(dir: &Path, names: &[&str]) {
        for n in names {
            std::fs::write(dir.join(n), b"x").unwrap();
        }
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&write(dir.path(), "[]")).unwrap_err();
        assert_eq!(err.to_string(), "empty manifest");
    }

    #[test]
    fn duplicate_ids_are_named() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["a.msr", "a_m.msr"]);
        let body = r#"[
            {"scene_id": "isle_7", "scene_path": "a.msr", "mask_path": "a_m.msr", "split": "train"},
            {"scene_id": "isle_7", "scene_path": "a.msr", "mask_path": "a_m.msr", "split": "val"}
        ]"#;
        let err = load_manifest(&write(dir.path(), body)).unwrap_err().to_string();
        assert!(err.contains("isle_7"), "{err}");
    }

    #[test]
    fn unknown_split_and_dangling_paths() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["a.msr", "a_m.msr"]);
        let body = r#"[{"scene_id": "a", "scene_path": "a.msr", "mask_path": "a_m.msr", "split": "holdout"}]"#;
        let err = load_manifest(&write(dir.path(), body)).unwrap_err().to_string();
        assert!(err.contains("holdout"), "{err}");

        let body = r#"[{"scene_id": "a", "scene_path": "a.msr", "mask_path": "nope.msr", "split": "test"}]"#;
        let err = load_manifest(&write(dir.path(), body)).unwrap_err().to_string();
        assert!(err.contains("nope.msr"), "{err}");

        let err = load_manifest(&dir.path().join("absent.json")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn full_dataset_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for i in 0..225 {
            let split = if i < 181 {
                "train"
            } else if i < 203 {
                "val"
            } else {
                "test"
            };
            touch(dir.path(), &[&format!("s{i}.msr"), &format!("m{i}.msr")]);
            rows.push(format!(
                r#"{{"scene_id": "s{i}", "scene_path": "s{i}.msr", "mask_path": "m{i}.msr", "split": "{split}"}}"#
            ));
        }
        let m = load_manifest(&write(dir.path(), &format!("[{}]", rows.join(",")))).unwrap();
        let c = m.split_counts();
        assert_eq!((c[&Split::Train], c[&Split::Val], c[&Split::Test]), (181, 22, 22));
        m.require_splits().unwrap();
        assert!(m.entries[0].scene_path.is_absolute() || m.entries[0].scene_path.starts_with(dir.path()));
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["a.msr", "a_m.msr", "b.msr", "b_m.msr"]);
        let m = DatasetManifest::new(vec![
            ManifestEntry {
                scene_id: "a".into(),
                scene_path: dir.path().join("a.msr"),
                mask_path: dir.path().join("a_m.msr"),
                split: Split::Train,
            },
            ManifestEntry {
                scene_id: "b".into(),
                scene_path: dir.path().join("b.msr"),
                mask_path: dir.path().join("b_m.msr"),
                split: Split::Test,
            },
        ])
        .unwrap();
        let p = dir.path().join("m.json");
        write_manifest(&p, &m).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("\"a.msr\""));
        assert_eq!(load_manifest(&p).unwrap(), m);
        assert!(m.require_splits().is_err());
    }
}
