use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{load_mask, load_scene, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::synthgen::split_sizes;

const RASTER_EXTENSIONS: &[&str] = &["tif", "tiff", "msr"];

fn rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| RASTER_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::invalid(format!(
                "{} and {} share the scene id `{stem}`",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pair every raster in `scenes_dir` with the mask in `masks_dir` named
/// `{id}.*` or `{id}_mask.*`, check both load with matching shapes, and
/// assign splits.
///
/// `splits` fixes the split of listed ids. Without it the ids are shuffled
/// with `seed` and split with the same held-out counts as synthetic data.
/// The manifest references the source files; nothing is copied or changed.
pub fn ingest_directory(
    scenes_dir: &Path,
    masks_dir: &Path,
    splits: Option<&BTreeMap<String, Split>>,
    seed: u64,
) -> Result<DatasetManifest> {
    let scenes = rasters(scenes_dir)?;
    let masks = rasters(masks_dir)?;
    if scenes.is_empty() {
        return Err(Error::invalid(format!("no rasters found in {}", scenes_dir.display())));
    }
    let mut pairs = Vec::with_capacity(scenes.len());
    for (id, scene_path) in &scenes {
        let mask_path = masks
            .get(&format!("{id}_mask"))
            .or_else(|| masks.get(id))
            .ok_or_else(|| Error::invalid(format!("no mask for scene `{id}` in {}", masks_dir.display())))?;
        pairs.push((id.clone(), scene_path.clone(), mask_path.clone()));
    }
    pairs.par_iter().try_for_each(|(id, s, m)| {
        let scene = load_scene(s, id)?;
        let mask = load_mask(m, id)?;
        if (scene.height(), scene.width()) != (mask.height(), mask.width()) {
            return Err(Error::invalid(format!(
                "scene `{id}` is {}x{} but its mask is {}x{}",
                scene.height(),
                scene.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(())
    })?;

    let assigned: BTreeMap<String, Split> = match splits {
        Some(map) => {
            let mut out = BTreeMap::new();
            for (id, _, _) in &pairs {
                let s = map
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("split file does not list scene `{id}`")))?;
                out.insert(id.clone(), *s);
            }
            out
        }
        None => {
            let (n_train, n_val, _) = split_sizes(pairs.len())?;
            let mut ids: Vec<&String> = pairs.iter().map(|p| &p.0).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            ids.into_iter()
                .enumerate()
                .map(|(i, id)| {
                    let s = if i < n_train {
                        Split::Train
                    } else if i < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    };
                    (id.clone(), s)
                })
                .collect()
        }
    };
    let entries = pairs
        .into_iter()
        .map(|(id, scene_path, mask_path)| ManifestEntry {
            split: assigned[&id],
            scene_id: id,
            scene_path,
            mask_path,
        })
        .collect();
    DatasetManifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{save_mask, save_scene, LabelMask, MultispectralScene};

    fn write_pair(dir: &Path, id: &str, mask_name: &str) {
        let scene = MultispectralScene::new(id, 16, 16, vec![0.1; 6 * 256]).unwrap();
        let mask = LabelMask::new(id, 16, 16, vec![0; 256]).unwrap();
        save_scene(&dir.join("s").join(format!("{id}.msr")), &scene).unwrap();
        save_mask(&dir.join("m").join(mask_name), &mask).unwrap();
    }

    #[test]
    fn pairs_by_stem_and_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("s")).unwrap();
        std::fs::create_dir_all(dir.path().join("m")).unwrap();
        for i in 0..10 {
            let id = format!("img{i}");
            let mask = if i % 2 == 0 {
                format!("{id}_mask.msr")
            } else {
                format!("{id}.msr")
            };
            write_pair(dir.path(), &id, &mask);
        }
        let a = ingest_directory(&dir.path().join("s"), &dir.path().join("m"), None, 3).unwrap();
        let b = ingest_directory(&dir.path().join("s"), &dir.path().join("m"), None, 3).unwrap();
        assert_eq!(a, b);
        let c = a.split_counts();
        assert_eq!((c[&Split::Train], c[&Split::Val], c[&Split::Test]), (8, 1, 1));

        let fixed: BTreeMap<String, Split> = (0..10).map(|i| (format!("img{i}"), Split::Test)).collect();
        let all_test = ingest_directory(&dir.path().join("s"), &dir.path().join("m"), Some(&fixed), 3).unwrap();
        assert!(all_test.entries.iter().all(|e| e.split == Split::Test));
    }

    #[test]
    fn missing_mask_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("s")).unwrap();
        std::fs::create_dir_all(dir.path().join("m")).unwrap();
        write_pair(dir.path(), "a", "a_mask.msr");
        std::fs::remove_file(dir.path().join("m/a_mask.msr")).unwrap();
        let err = ingest_directory(&dir.path().join("s"), &dir.path().join("m"), None, 0).unwrap_err();
        assert!(err.to_string().contains("no mask for scene `a`"));
    }
}
