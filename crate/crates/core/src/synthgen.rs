//! Synthetic 6-band island scenes with exact ground truth.
//!
//! The coast is a radial-harmonic curve `r(θ) = R·(1 + Σ aₖ cos(kθ + φₖ))`
//! around a center; land pixels have their centers strictly inside it. Each
//! band is the class signature plus i.i.d. Gaussian noise. An optional
//! atoll ring brightens visible bands only and never touches the labels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::{
    save_mask, save_scene, write_manifest, Band, DatasetManifest, LabelMask, ManifestEntry, MultispectralScene, Split,
    LAND, MIN_SIDE, NUM_BANDS, WATER,
};

pub const MAX_HARMONICS: usize = 8;

/// Mean reflectance of each class, in band order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSignatures {
    pub land: [f64; NUM_BANDS],
    pub water: [f64; NUM_BANDS],
}

impl Default for BandSignatures {
    fn default() -> Self {
        Self {
            land: [0.12, 0.14, 0.10, 0.38, 0.30, 0.20],
            water: [0.06, 0.08, 0.10, 0.04, 0.02, 0.01],
        }
    }
}

/// Bright submerged annulus that mimics a reef flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtollRing {
    /// Ring radius as a fraction of the image size.
    pub radius: f64,
    /// Peak reflectance added to the visible bands.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandParams {
    pub seed: u64,
    pub image_size: usize,
    /// `(row, col)` as fractions of the image size.
    pub center: (f64, f64),
    pub base_radius: f64,
    pub harmonic_amplitudes: Vec<f64>,
    pub band_signatures: BandSignatures,
    pub noise_std: f64,
    pub atoll_ring: Option<AtollRing>,
}

impl IslandParams {
    /// A plain disk of radius `0.25` at the image center.
    pub fn disk(seed: u64, image_size: usize) -> Self {
        Self {
            seed,
            image_size,
            center: (0.5, 0.5),
            base_radius: 0.25,
            harmonic_amplitudes: Vec::new(),
            band_signatures: BandSignatures::default(),
            noise_std: 0.0,
            atoll_ring: None,
        }
    }

    /// Draw a varied but always valid island from `seed`.
    pub fn random(seed: u64, image_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F15_1A4D);
        let n_harm = rng.random_range(2..=5);
        let harmonic_amplitudes = (0..n_harm)
            .map(|k| rng.random_range(0.0..0.18) / (1.0 + 0.5 * k as f64))
            .collect();
        let mut sig = BandSignatures::default();
        for b in 0..NUM_BANDS {
            sig.land[b] *= rng.random_range(0.8..1.2);
            sig.water[b] *= rng.random_range(0.8..1.2);
        }
        let atoll_ring = rng.random_bool(0.5).then(|| AtollRing {
            radius: rng.random_range(0.3..0.45),
            intensity: rng.random_range(0.03..0.08),
        });
        Self {
            seed,
            image_size,
            center: (rng.random_range(0.38..0.62), rng.random_range(0.38..0.62)),
            base_radius: rng.random_range(0.14..0.3),
            harmonic_amplitudes,
            band_signatures: sig,
            noise_std: rng.random_range(0.01..0.03),
            atoll_ring,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image_size {} is below the minimum {MIN_SIDE}",
                self.image_size
            )));
        }
        if !(self.base_radius > 0.05 && self.base_radius < 0.45) {
            return Err(Error::invalid(format!(
                "base_radius {} outside (0.05, 0.45)",
                self.base_radius
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_std {} must be finite and >= 0",
                self.noise_std
            )));
        }
        if self.harmonic_amplitudes.len() > MAX_HARMONICS {
            return Err(Error::invalid(format!(
                "{} harmonics given, at most {MAX_HARMONICS} allowed",
                self.harmonic_amplitudes.len()
            )));
        }
        let sig = &self.band_signatures;
        if sig
            .land
            .iter()
            .chain(&sig.water)
            .chain(&self.harmonic_amplitudes)
            .any(|v| !v.is_finite())
            || !self.center.0.is_finite()
            || !self.center.1.is_finite()
        {
            return Err(Error::invalid("island parameters must be finite"));
        }
        if let Some(ring) = &self.atoll_ring {
            if !(ring.radius > 0.0 && ring.radius.is_finite() && ring.intensity.is_finite()) {
                return Err(Error::invalid(
                    "atoll ring needs a positive radius and finite intensity",
                ));
            }
        }
        let phases = self.phases();
        let worst = (0..4096)
            .map(|i| self.radial_factor(2.0 * PI * i as f64 / 4096.0, &phases))
            .fold(f64::INFINITY, f64::min);
        if worst <= 0.0 {
            return Err(Error::invalid(format!(
                "harmonic amplitudes make the coast radius nonpositive (min factor {worst:.3})"
            )));
        }
        Ok(())
    }

    /// Harmonic phases `φₖ`, a pure function of the seed.
    fn phases(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.harmonic_amplitudes.len())
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect()
    }

    fn radial_factor(&self, theta: f64, phases: &[f64]) -> f64 {
        1.0 + self
            .harmonic_amplitudes
            .iter()
            .zip(phases)
            .enumerate()
            .map(|(k, (a, phi))| a * ((k + 1) as f64 * theta + phi).cos())
            .sum::<f64>()
    }
}

/// Render one scene and its mask. Pure in `params`.
pub fn generate_scene(params: &IslandParams, scene_id: &str) -> Result<(MultispectralScene, LabelMask)> {
    params.validate()?;
    let n = params.image_size;
    let size = n as f64;
    let phases = params.phases();
    let (cr, cc) = (params.center.0 * size, params.center.1 * size);
    let mut classes = vec![WATER; n * n];
    let mut ring_weight = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let dy = r as f64 + 0.5 - cr;
            let dx = c as f64 + 0.5 - cc;
            let dist = dy.hypot(dx);
            let theta = dy.atan2(dx);
            let coast = params.base_radius * size * params.radial_factor(theta, &phases);
            if dist < coast {
                classes[r * n + c] = LAND;
            }
            if let Some(ring) = &params.atoll_ring {
                let width = (0.03 * size).max(1.0);
                let z = (dist - ring.radius * size) / width;
                ring_weight[r * n + c] = ring.intensity * (-0.5 * z * z).exp();
            }
        }
    }

    // Noise stream is separate from the phase stream so adding harmonics
    // does not reshuffle the noise.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let noise = (params.noise_std > 0.0).then(|| Normal::new(0.0, params.noise_std).expect("validated std"));
    let mut data = vec![0.0f32; NUM_BANDS * n * n];
    for band in Band::ORDER {
        let b = band.index();
        for i in 0..n * n {
            let base = if classes[i] == LAND {
                params.band_signatures.land[b]
            } else {
                params.band_signatures.water[b]
            };
            let mut v = base;
            if band.is_visible() {
                v += ring_weight[i];
            }
            if let Some(dist) = &noise {
                v += dist.sample(&mut rng);
            }
            data[b * n * n + i] = v as f32;
        }
    }
    let scene = MultispectralScene::new(scene_id, n, n, data)?;
    let mask = LabelMask::new(scene_id, n, n, classes)?;
    Ok((scene, mask))
}

/// Validation and test counts for `n` scenes: `max(1, round(n/10))` each,
/// with exact halves rounded to even. Gives 181/22/22 for 225 and 8/1/1
/// for 10.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 scenes to split, got {n}")));
    }
    let (q, r) = (n / 10, n % 10);
    let rounded = match r.cmp(&5) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q % 2),
    };
    let holdout = rounded.max(1);
    Ok((n - 2 * holdout, holdout, holdout))
}

/// Write `n_scenes` random islands plus `manifest.json` under `out_dir`.
pub fn generate_dataset(n_scenes: usize, size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let (n_train, n_val, _) = split_sizes(n_scenes)?;
    let scenes_dir = out_dir.join("scenes");
    let masks_dir = out_dir.join("masks");
    for d in [&scenes_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_seeds: Vec<u64> = (0..n_scenes).map(|_| rng.random()).collect();
    let entries = scene_seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let id = format!("synth_{i:04}");
            let (scene, mask) = generate_scene(&IslandParams::random(s, size), &id)?;
            let scene_path: PathBuf = scenes_dir.join(format!("{id}.msr"));
            let mask_path: PathBuf = masks_dir.join(format!("{id}_mask.msr"));
            save_scene(&scene_path, &scene)?;
            save_mask(&mask_path, &mask)?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            Ok(ManifestEntry {
                scene_id: id,
                scene_path,
                mask_path,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(entries)?;
    write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::load_manifest;
    use proptest::prelude::*;

    #[test]
    fn plain_disk_has_land_center_and_water_corner() {
        let (scene, mask) = generate_scene(&IslandParams::disk(1, 32), "d").unwrap();
        assert_eq!(mask.get(16, 16), LAND);
        assert_eq!(mask.get(0, 0), WATER);
        assert_eq!(scene.shape(), (6, 32, 32));
    }

    #[test]
    fn identical_params_give_identical_scenes() {
        let p = IslandParams::random(99, 48);
        assert_eq!(generate_scene(&p, "x").unwrap(), generate_scene(&p, "x").unwrap());
    }

    #[test]
    fn noise_free_class_means_equal_signatures() {
        let mut p = IslandParams::disk(3, 40);
        p.band_signatures.land[Band::Nir.index()] = 0.6;
        p.band_signatures.water[Band::Nir.index()] = 0.05;
        p.harmonic_amplitudes = vec![0.1, 0.05];
        let (scene, mask) = generate_scene(&p, "n").unwrap();
        let nir = scene.band(Band::Nir.index());
        let mut sums = [(0.0f64, 0usize); 2];
        for (v, &c) in nir.iter().zip(mask.classes()) {
            sums[c as usize].0 += *v as f64;
            sums[c as usize].1 += 1;
        }
        assert_eq!(sums[1].0 / sums[1].1 as f64, 0.6f32 as f64);
        assert_eq!(sums[0].0 / sums[0].1 as f64, 0.05f32 as f64);
    }

    #[test]
    fn atoll_ring_only_touches_visible_bands() {
        let mut p = IslandParams::disk(4, 48);
        let (plain, plain_mask) = generate_scene(&p, "a").unwrap();
        p.atoll_ring = Some(AtollRing {
            radius: 0.4,
            intensity: 0.1,
        });
        let (ring, ring_mask) = generate_scene(&p, "a").unwrap();
        assert_eq!(plain_mask, ring_mask);
        for band in Band::ORDER {
            let changed = plain.band(band.index()) != ring.band(band.index());
            assert_eq!(changed, band.is_visible(), "{band:?}");
        }
    }

    #[test]
    fn oversized_harmonics_are_rejected() {
        let mut p = IslandParams::disk(5, 32);
        p.harmonic_amplitudes = vec![0.7, 0.6];
        assert!(generate_scene(&p, "bad").is_err());
        p.harmonic_amplitudes = vec![0.0; 9];
        assert!(p.validate().is_err());
        p.harmonic_amplitudes.clear();
        p.base_radius = 0.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_sizes(225).unwrap(), (181, 22, 22));
        assert_eq!(split_sizes(10).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
        assert_eq!(split_sizes(64).unwrap(), (52, 6, 6));
        assert_eq!(split_sizes(15).unwrap(), (11, 2, 2));
        assert!(split_sizes(2).is_err());
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate_dataset(10, 16, 7, dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(written, loaded);
        assert_eq!(loaded.ids(Split::Train).len(), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn random_islands_are_valid_and_not_degenerate(seed in any::<u64>(), size in 16usize..72) {
            let p = IslandParams::random(seed, size);
            let (_, mask) = generate_scene(&p, "p").unwrap();
            let f = mask.land_fraction();
            prop_assert!(f > 0.01 && f < 0.70, "land fraction {f}");
        }

        #[test]
        fn noise_free_scenes_have_zero_class_variance(seed in any::<u64>()) {
            let mut p = IslandParams::random(seed, 24);
            p.noise_std = 0.0;
            p.atoll_ring = None;
            let (scene, mask) = generate_scene(&p, "p").unwrap();
            for b in 0..NUM_BANDS {
                for class in [WATER, LAND] {
                    let vals: Vec<f32> = scene.band(b).iter().zip(mask.classes())
                        .filter(|(_, &c)| c == class).map(|(v, _)| *v).collect();
                    prop_assert!(vals.windows(2).all(|w| w[0] == w[1]));
                }
            }
        }
    }
}
