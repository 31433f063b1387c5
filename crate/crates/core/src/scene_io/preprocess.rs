use serde::{Deserialize, Serialize};

use super::{LabelMask, MultispectralScene, MIN_SIDE, NUM_BANDS};
use crate::error::{Error, Result};
use crate::nn::ops::{bilinear_resize, nearest_resize};

/// Resize a scene bilinearly and its mask by nearest neighbour so labels
/// stay categorical.
pub fn resize_pair(
    scene: &MultispectralScene,
    mask: &LabelMask,
    target: (usize, usize),
) -> Result<(MultispectralScene, LabelMask)> {
    let (th, tw) = target;
    if th < MIN_SIDE || tw < MIN_SIDE {
        return Err(Error::invalid(format!(
            "resize target {th}x{tw} is degenerate; both sides must be at least {MIN_SIDE}"
        )));
    }
    if (scene.height(), scene.width()) != (mask.height(), mask.width()) {
        return Err(Error::invalid(format!(
            "scene `{}` and its mask differ in shape",
            scene.scene_id
        )));
    }
    let (h, w) = (scene.height(), scene.width());
    let data = bilinear_resize(scene.data(), NUM_BANDS, h, w, th, tw);
    let classes = nearest_resize(mask.classes(), 1, h, w, th, tw);
    Ok((
        scene.with_data(th, tw, data)?,
        LabelMask::new(mask.scene_id.clone(), th, tw, classes)?,
    ))
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-band z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_band_mean: [f64; NUM_BANDS],
    pub per_band_std: [f64; NUM_BANDS],
}

impl NormalizationStats {
    pub fn identity() -> Self {
        Self {
            per_band_mean: [0.0; NUM_BANDS],
            per_band_std: [1.0; NUM_BANDS],
        }
    }

    pub fn apply(&self, scene: &MultispectralScene) -> MultispectralScene {
        let plane = scene.height() * scene.width();
        let data = scene
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let b = i / plane;
                ((v as f64 - self.per_band_mean[b]) / self.per_band_std[b]) as f32
            })
            .collect();
        scene
            .with_data(scene.height(), scene.width(), data)
            .expect("normalization preserves shape and finiteness")
    }
}

/// Population mean and standard deviation of every band over all pixels of
/// the given (training) scenes. Standard deviations are floored at 1e-6.
pub fn compute_normalization<'a, I>(train_scenes: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a MultispectralScene>,
    I::IntoIter: Clone,
{
    let scenes = train_scenes.into_iter();
    let mut sum = [0.0f64; NUM_BANDS];
    let mut count = 0usize;
    for s in scenes.clone() {
        for (b, acc) in sum.iter_mut().enumerate() {
            *acc += s.band(b).iter().map(|&v| v as f64).sum::<f64>();
        }
        count += s.height() * s.width();
    }
    if count == 0 {
        return Err(Error::invalid("normalization needs at least one training scene"));
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = [0.0f64; NUM_BANDS];
    for s in scenes {
        for (b, acc) in sq.iter_mut().enumerate() {
            *acc += s.band(b).iter().map(|&v| (v as f64 - mean[b]).powi(2)).sum::<f64>();
        }
    }
    let std = sq.map(|s| (s / count as f64).sqrt().max(STD_FLOOR));
    Ok(NormalizationStats {
        per_band_mean: mean,
        per_band_std: std,
    })
}
