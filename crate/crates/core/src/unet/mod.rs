//! U-Net style decoder over single-scale ViT token grids and the 2-class
//! segmentation head.
//!
//! The deepest tap is projected to the first stage width. Each of the four
//! stages doubles resolution with a 2×2 transposed convolution, concatenates
//! a skip built from a shallower tap (1×1 projection, then nearest
//! upsampling to the stage resolution), and applies two
//! conv3×3 → GroupNorm → ReLU blocks. Three shallow taps feed the first
//! three stages; the last stage has no skip. A bilinear resize restores the
//! input size when the four doublings do not land on it exactly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::Init;
use crate::nn::norm::NormCache;
use crate::nn::ops::{
    bilinear_resize, bilinear_resize_backward, dropout_mask, relu_backward_inplace, relu_inplace, upsample_nearest,
    upsample_nearest_backward,
};
use crate::nn::{join, Conv2d, ConvTranspose2x2, GroupNorm, Module, Param, Precision, Scalar};
use crate::scene_io::{LabelMask, LAND, WATER};
use crate::vit::{channels_to_tokens, TokenGrid};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub channel_widths: [usize; NUM_STAGES],
    pub head_dropout: f64,
    pub num_classes: usize,
    /// Upper bound on GroupNorm groups; each layer uses the largest divisor
    /// of its width not above this.
    pub norm_groups: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channel_widths: [512, 256, 128, 64],
            head_dropout: 0.1,
            num_classes: 2,
            norm_groups: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.channel_widths;
        if w[NUM_STAGES - 1] == 0 || w.windows(2).any(|p| p[0] < p[1]) {
            return Err(Error::invalid(format!(
                "channel widths {w:?} must be positive and non-increasing"
            )));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::invalid(format!(
                "head_dropout {} outside [0, 1)",
                self.head_dropout
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::invalid(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.norm_groups == 0 {
            return Err(Error::invalid("norm_groups must be positive"));
        }
        Ok(())
    }
}

fn groups_for(width: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(width))
        .rev()
        .find(|g| width.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Pre-softmax class scores, `(2, H, W)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap<T> {
    pub logits: Vec<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> LogitMap<T> {
    pub fn new(logits: Vec<T>, height: usize, width: usize) -> Result<Self> {
        if logits.len() != 2 * height * width {
            return Err(Error::invalid(format!(
                "{} logits do not form a (2, {height}, {width}) map",
                logits.len()
            )));
        }
        Ok(Self { logits, height, width })
    }

    pub fn water(&self) -> &[T] {
        &self.logits[..self.height * self.width]
    }

    pub fn land(&self) -> &[T] {
        &self.logits[self.height * self.width..]
    }
}

/// Per-pixel argmax; ties go to water.
pub fn predict_mask<T: Scalar>(logits: &LogitMap<T>, scene_id: &str) -> LabelMask {
    let classes = logits
        .water()
        .iter()
        .zip(logits.land())
        .map(|(&w, &l)| if l > w { LAND } else { WATER })
        .collect();
    LabelMask::new(scene_id, logits.height, logits.width, classes).expect("shape matches")
}

#[derive(Clone, Debug)]
struct Stage<T> {
    up: ConvTranspose2x2<T>,
    skip: Option<Conv2d<T>>,
    conv1: Conv2d<T>,
    norm1: GroupNorm<T>,
    conv2: Conv2d<T>,
    norm2: GroupNorm<T>,
}

#[derive(Clone, Debug)]
struct StageTrace<T> {
    input: Vec<T>,
    skip_in: Option<Vec<T>>,
    cat: Vec<T>,
    n1: NormCache<T>,
    a1: Vec<T>,
    n2: NormCache<T>,
    a2: Vec<T>,
    side: usize,
}

/// Saved activations of a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct DecodeTrace<T> {
    taps: Vec<Vec<T>>,
    stages: Vec<StageTrace<T>>,
    resized: Vec<T>,
    dropout: Option<Vec<T>>,
    head_in: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct UnetDecoder<T> {
    pub config: DecoderConfig,
    pub embed_dim: usize,
    pub grid: usize,
    pub image_size: usize,
    pub bottleneck: Conv2d<T>,
    stages: Vec<Stage<T>>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> UnetDecoder<T> {
    pub fn new(config: DecoderConfig, embed_dim: usize, grid: usize, image_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if grid == 0 || image_size < grid {
            return Err(Error::invalid(format!(
                "grid {grid} does not fit image size {image_size}"
            )));
        }
        let mut init = Init::new(seed);
        let w = config.channel_widths;
        let bottleneck = Conv2d::new(embed_dim, w[0], 1, &mut init);
        let stages = (0..NUM_STAGES)
            .map(|s| {
                let c_in = if s == 0 { w[0] } else { w[s - 1] };
                let has_skip = s < NUM_STAGES - 1;
                let cat = if has_skip { 2 * w[s] } else { w[s] };
                let g = groups_for(w[s], config.norm_groups);
                Stage {
                    up: ConvTranspose2x2::new(c_in, w[s], &mut init),
                    skip: has_skip.then(|| Conv2d::new(embed_dim, w[s], 1, &mut init)),
                    conv1: Conv2d::new(cat, w[s], 3, &mut init),
                    norm1: GroupNorm::new(w[s], g),
                    conv2: Conv2d::new(w[s], w[s], 3, &mut init),
                    norm2: GroupNorm::new(w[s], g),
                }
            })
            .collect();
        let head = Conv2d::new(w[NUM_STAGES - 1], config.num_classes, 1, &mut init);
        Ok(Self {
            config,
            embed_dim,
            grid,
            image_size,
            bottleneck,
            stages,
            head,
        })
    }

    fn check_taps(&self, taps: &[TokenGrid<T>]) -> Result<()> {
        if taps.len() != NUM_STAGES {
            return Err(Error::invalid(format!(
                "decoder needs {NUM_STAGES} tap grids, got {}",
                taps.len()
            )));
        }
        for t in taps {
            if t.grid_shape != (self.grid, self.grid) || t.dim != self.embed_dim {
                return Err(Error::invalid(format!(
                    "tap grid {:?} of dim {} does not match the decoder's {}x{} grid of dim {}",
                    t.grid_shape, t.dim, self.grid, self.grid, self.embed_dim
                )));
            }
        }
        Ok(())
    }

    /// Forward pass. Head dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        taps: &[TokenGrid<T>],
        prec: Precision,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LogitMap<T>, DecodeTrace<T>)> {
        self.check_taps(taps)?;
        let g = self.grid;
        let tap_ch: Vec<Vec<T>> = taps.iter().map(|t| t.to_channels()).collect();
        let mut x = self.bottleneck.forward(&tap_ch[NUM_STAGES - 1], g, g, prec);
        let mut side = g;
        let mut traces = Vec::with_capacity(NUM_STAGES);
        for (s, stage) in self.stages.iter().enumerate() {
            let input = x;
            let mut cat = stage.up.forward(&input, side, side, prec);
            let out_side = 2 * side;
            let mut skip_in = None;
            if let Some(proj) = &stage.skip {
                let src = &tap_ch[NUM_STAGES - 2 - s];
                let p = proj.forward(src, g, g, prec);
                cat.extend(upsample_nearest(&p, proj.out_channels, g, g, out_side / g));
                skip_in = Some(src.clone());
            }
            let c1 = stage.conv1.forward(&cat, out_side, out_side, prec);
            let (mut a1, n1) = stage.norm1.forward(&c1, prec);
            relu_inplace(&mut a1);
            let c2 = stage.conv2.forward(&a1, out_side, out_side, prec);
            let (mut a2, n2) = stage.norm2.forward(&c2, prec);
            relu_inplace(&mut a2);
            x = a2.clone();
            traces.push(StageTrace {
                input,
                skip_in,
                cat,
                n1,
                a1,
                n2,
                a2,
                side,
            });
            side = out_side;
        }
        let wl = self.config.channel_widths[NUM_STAGES - 1];
        let hw = self.image_size;
        let resized = bilinear_resize(&x, wl, side, side, hw, hw);
        let (head_in, dropout) = match dropout_rng {
            Some(rng) if self.config.head_dropout > 0.0 => {
                let m: Vec<T> = dropout_mask(resized.len(), self.config.head_dropout, rng);
                (resized.iter().zip(&m).map(|(&a, &b)| a * b).collect(), Some(m))
            }
            _ => (resized.clone(), None),
        };
        let logits = self.head.forward(&head_in, hw, hw, prec);
        Ok((
            LogitMap::new(logits, hw, hw)?,
            DecodeTrace {
                taps: tap_ch,
                stages: traces,
                resized,
                dropout,
                head_in,
            },
        ))
    }

    /// Inference-mode decode (no dropout).
    pub fn decode(&self, taps: &[TokenGrid<T>], prec: Precision) -> Result<LogitMap<T>> {
        Ok(self.forward(taps, prec, None)?.0)
    }

    /// Accumulate parameter gradients from `d_logits`. When `tap_grads` is
    /// set, also returns gradients for the four tap grids in token-major
    /// layout.
    pub fn backward(
        &mut self,
        trace: &DecodeTrace<T>,
        d_logits: &[T],
        prec: Precision,
        tap_grads: bool,
    ) -> Option<Vec<Vec<T>>> {
        let g = self.grid;
        let hw = self.image_size;
        let wl = self.config.channel_widths[NUM_STAGES - 1];
        let mut dx = self
            .head
            .backward(&trace.head_in, hw, hw, d_logits, prec, true)
            .unwrap();
        if let Some(m) = &trace.dropout {
            dx.iter_mut().zip(m).for_each(|(a, &b)| *a *= b);
        }
        let last_side = trace.stages.last().map(|t| 2 * t.side).unwrap_or(g);
        debug_assert_eq!(trace.resized.len(), wl * hw * hw);
        let mut dx = bilinear_resize_backward(&dx, wl, last_side, last_side, hw, hw);
        prec.round(&mut dx);
        let mut d_taps: Vec<Vec<T>> = trace.taps.iter().map(|t| vec![T::zero(); t.len()]).collect();
        for (s, (stage, tr)) in self.stages.iter_mut().zip(&trace.stages).enumerate().rev() {
            let out_side = 2 * tr.side;
            relu_backward_inplace(&tr.a2, &mut dx);
            let d = stage.norm2.backward(&tr.n2, &dx, prec);
            let mut d = stage
                .conv2
                .backward(&tr.a1, out_side, out_side, &d, prec, true)
                .unwrap();
            relu_backward_inplace(&tr.a1, &mut d);
            let d = stage.norm1.backward(&tr.n1, &d, prec);
            let dcat = stage
                .conv1
                .backward(&tr.cat, out_side, out_side, &d, prec, true)
                .unwrap();
            let w = stage.up.out_channels;
            let split = w * out_side * out_side;
            if let (Some(proj), Some(src)) = (stage.skip.as_mut(), &tr.skip_in) {
                let dp = upsample_nearest_backward(&dcat[split..], w, g, g, out_side / g);
                let need = tap_grads;
                if let Some(dsrc) = proj.backward(src, g, g, &dp, prec, need) {
                    d_taps[NUM_STAGES - 2 - s]
                        .iter_mut()
                        .zip(&dsrc)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            dx = stage.up.backward(&tr.input, tr.side, tr.side, &dcat[..split], prec);
        }
        let deep = self
            .bottleneck
            .backward(&trace.taps[NUM_STAGES - 1], g, g, &dx, prec, tap_grads);
        tap_grads.then(|| {
            d_taps[NUM_STAGES - 1] = deep.expect("requested");
            d_taps
                .iter()
                .map(|d| channels_to_tokens(d, g * g, self.embed_dim))
                .collect()
        })
    }
}

impl<T: Scalar> Module<T> for UnetDecoder<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), f);
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            s.up.visit_params(&join(&p, "up"), f);
            if let Some(k) = &s.skip {
                k.visit_params(&join(&p, "skip"), f);
            }
            s.conv1.visit_params(&join(&p, "conv1"), f);
            s.norm1.visit_params(&join(&p, "norm1"), f);
            s.conv2.visit_params(&join(&p, "conv2"), f);
            s.norm2.visit_params(&join(&p, "norm2"), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.bottleneck.visit_params_mut(&join(prefix, "bottleneck"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            s.up.visit_params_mut(&join(&p, "up"), f);
            if let Some(k) = &mut s.skip {
                k.visit_params_mut(&join(&p, "skip"), f);
            }
            s.conv1.visit_params_mut(&join(&p, "conv1"), f);
            s.norm1.visit_params_mut(&join(&p, "norm1"), f);
            s.conv2.visit_params_mut(&join(&p, "conv2"), f);
            s.norm2.visit_params_mut(&join(&p, "norm2"), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn taps(grid: usize, dim: usize, seed: u64) -> Vec<TokenGrid<f64>> {
        let mut init = Init::new(seed);
        (0..4)
            .map(|_| TokenGrid::new(init.normal(grid * grid * dim, 1.0), grid, dim).unwrap())
            .collect()
    }

    fn small() -> DecoderConfig {
        DecoderConfig {
            channel_widths: [8, 8, 4, 4],
            norm_groups: 2,
            ..DecoderConfig::default()
        }
    }

    #[test]
    fn group_choice() {
        assert_eq!(groups_for(64, 8), 8);
        assert_eq!(groups_for(12, 8), 6);
        assert_eq!(groups_for(7, 8), 7);
        assert_eq!(groups_for(4, 8), 4);
    }

    #[test]
    fn output_matches_input_size() {
        for (grid, size) in [(2, 32), (4, 64), (3, 40)] {
            let dec = UnetDecoder::<f64>::new(small(), 6, grid, size, 0).unwrap();
            let out = dec.decode(&taps(grid, 6, 1), Precision::Float32).unwrap();
            assert_eq!((out.height, out.width, out.logits.len()), (size, size, 2 * size * size));
            assert!(out.logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_taps() {
        let dec = UnetDecoder::<f64>::new(small(), 6, 2, 32, 0).unwrap();
        assert!(dec.decode(&taps(2, 6, 1)[..3], Precision::Float32).is_err());
        assert!(dec.decode(&taps(3, 6, 1), Precision::Float32).is_err());
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let dec = UnetDecoder::<f64>::new(small(), 6, 2, 32, 0).unwrap();
        let t = taps(2, 6, 1);
        assert_eq!(
            dec.decode(&t, Precision::Float32).unwrap(),
            dec.decode(&t, Precision::Float32).unwrap()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = dec.forward(&t, Precision::Float32, Some(&mut rng)).unwrap().0;
        let b = dec.forward(&t, Precision::Float32, Some(&mut rng)).unwrap().0;
        assert_ne!(a, b);
    }

    #[test]
    fn shallow_taps_are_live() {
        let dec = UnetDecoder::<f64>::new(small(), 6, 2, 32, 3).unwrap();
        let t = taps(2, 6, 4);
        let mut zeroed = t.clone();
        for z in &mut zeroed[..3] {
            z.tokens.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_ne!(
            dec.decode(&t, Precision::Float32).unwrap(),
            dec.decode(&zeroed, Precision::Float32).unwrap()
        );
    }

    #[test]
    fn predict_mask_ties_to_water() {
        let land = LogitMap::new([vec![-3.0f64; 4], vec![3.0; 4]].concat(), 2, 2).unwrap();
        assert_eq!(predict_mask(&land, "x").land_pixels(), 4);
        let tie = LogitMap::new(vec![0.5f64; 8], 2, 2).unwrap();
        assert_eq!(predict_mask(&tie, "x").land_pixels(), 0);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let base = UnetDecoder::<f64>::new(small(), 6, 2, 32, 7).unwrap();
        let t = taps(2, 6, 8);
        let w: Vec<f64> = Init::new(9).normal(2 * 32 * 32, 1.0);
        let loss = |d: &UnetDecoder<f64>, t: &[TokenGrid<f64>]| {
            d.decode(t, Precision::Float32)
                .unwrap()
                .logits
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut dec = base.clone();
        let (_, trace) = dec.forward(&t, Precision::Float32, None).unwrap();
        let d_taps = dec.backward(&trace, &w, Precision::Float32, true).unwrap();
        let grads: Vec<(String, Vec<f64>)> = dec
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect();
        let h = 1e-7;
        for (name, g) in &grads {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.visit_params_mut("", &mut |n, p| {
                    if &n == name {
                        p.value[idx] += h
                    }
                });
                minus.visit_params_mut("", &mut |n, p| {
                    if &n == name {
                        p.value[idx] -= h
                    }
                });
                let num = (loss(&plus, &t) - loss(&minus, &t)) / (2.0 * h);
                let rel = (num - g[idx]).abs() / num.abs().max(g[idx].abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {} numeric {num}", g[idx]);
            }
        }
        for (k, dt) in d_taps.iter().enumerate() {
            for idx in [0, 5, dt.len() - 1] {
                let mut plus = t.clone();
                let mut minus = t.clone();
                plus[k].tokens[idx] += h;
                minus[k].tokens[idx] -= h;
                let num = (loss(&base, &plus) - loss(&base, &minus)) / (2.0 * h);
                let rel = (num - dt[idx]).abs() / num.abs().max(dt[idx].abs()).max(1e-6);
                assert!(rel < 1e-3, "tap {k}[{idx}]: analytic {} numeric {num}", dt[idx]);
            }
        }
    }
}
