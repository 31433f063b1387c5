use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderCache, VitEncoder};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::attention::BlockCache;
use crate::nn::init::{sincos_2d, Init};
use crate::nn::norm::NormCache;
use crate::nn::{join, LayerNorm, Linear, Module, Param, Precision, Scalar, TransformerBlock};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_num_heads: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            decoder_dim: 96,
            decoder_depth: 2,
            decoder_num_heads: 3,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.decoder_dim == 0
            || self.decoder_num_heads == 0
            || !self.decoder_dim.is_multiple_of(self.decoder_num_heads)
        {
            return Err(Error::invalid(format!(
                "decoder_dim {} is not divisible by decoder_num_heads {}",
                self.decoder_dim, self.decoder_num_heads
            )));
        }
        Ok(())
    }
}

/// Number of masked patches, `⌈ratio·n⌉`. Fails when nothing would be
/// masked or nothing would stay visible.
pub fn masked_count(ratio: f64, n: usize) -> Result<usize> {
    // The epsilon keeps products like 0.75·196 = 147 from rounding up.
    let k = (ratio * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "mask_ratio {ratio} over {n} patches leaves {} masked and {} visible",
            k.min(n),
            n.saturating_sub(k)
        )));
    }
    Ok(k)
}

/// Partition of the patch grid, both lists ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Uniform sampling without replacement of the masked patches.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<PatchMask> {
    let k = masked_count(ratio, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut masked = order[..k].to_vec();
    let mut visible = order[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(PatchMask { visible, masked })
}

/// Mean squared error over the masked patches only.
pub fn masked_mse<T: Scalar>(pred: &[T], target: &[T], masked: &[usize], patch_dim: usize) -> f64 {
    let mut sum = 0.0;
    for &i in masked {
        for j in i * patch_dim..(i + 1) * patch_dim {
            let d = pred[j].to_f64().unwrap() - target[j].to_f64().unwrap();
            sum += d * d;
        }
    }
    sum / (masked.len() * patch_dim) as f64
}

/// Gradient of [`masked_mse`] with respect to `pred`, times `scale`.
pub fn masked_mse_grad<T: Scalar>(pred: &[T], target: &[T], masked: &[usize], patch_dim: usize, scale: f64) -> Vec<T> {
    let mut g = vec![T::zero(); pred.len()];
    let c = 2.0 * scale / (masked.len() * patch_dim) as f64;
    for &i in masked {
        for j in i * patch_dim..(i + 1) * patch_dim {
            g[j] = T::c(c * (pred[j].to_f64().unwrap() - target[j].to_f64().unwrap()));
        }
    }
    g
}

/// Encoder plus the lightweight reconstruction decoder used only for
/// pretraining.
#[derive(Clone, Debug)]
pub struct MaeModel<T> {
    pub config: MaeConfig,
    pub encoder: VitEncoder<T>,
    pub enc_to_dec: Linear<T>,
    pub mask_token: Param<T>,
    pub dec_pos: Param<T>,
    pub dec_blocks: Vec<TransformerBlock<T>>,
    pub dec_norm: LayerNorm<T>,
    pub pred: Linear<T>,
}

pub struct MaeCache<T> {
    encoder: EncoderCache<T>,
    enc_norm: NormCache<T>,
    latent: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    dec_norm: NormCache<T>,
    dec_out: Vec<T>,
}

impl<T: Scalar> MaeModel<T> {
    pub fn new(encoder: EncoderConfig, config: MaeConfig, seed: u64) -> Result<Self> {
        let enc = VitEncoder::new(encoder, seed)?;
        Self::from_encoder(enc, config, seed.wrapping_add(1))
    }

    pub fn from_encoder(encoder: VitEncoder<T>, config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        masked_count(config.mask_ratio, encoder.config.num_patches())?;
        let mut init = Init::new(seed);
        let (d, dd) = (encoder.config.embed_dim, config.decoder_dim);
        let n = encoder.config.num_patches();
        Ok(Self {
            enc_to_dec: Linear::new(d, dd, &mut init),
            mask_token: Param::new(&[1, dd], init.normal(dd, 0.02)),
            dec_pos: Param::new(&[n, dd], sincos_2d(encoder.config.grid(), dd)),
            dec_blocks: (0..config.decoder_depth)
                .map(|_| TransformerBlock::new(dd, config.decoder_num_heads, 4, &mut init))
                .collect(),
            dec_norm: LayerNorm::new(dd),
            pred: Linear::new(dd, encoder.config.patch_dim(), &mut init),
            encoder,
            config,
        })
    }

    /// Reconstruct every patch from the visible ones.
    pub fn forward(&self, patches: &[T], mask: &PatchMask, prec: Precision) -> (Vec<T>, MaeCache<T>) {
        let pd = self.encoder.config.patch_dim();
        let n = self.encoder.config.num_patches();
        let dd = self.config.decoder_dim;
        let mut vis = Vec::with_capacity(mask.visible.len() * pd);
        for &i in &mask.visible {
            vis.extend_from_slice(&patches[i * pd..(i + 1) * pd]);
        }
        let (outs, ecache) = self.encoder.forward_tokens(&vis, &mask.visible, prec);
        let (latent, enc_norm) = self.encoder.norm.forward(outs.last().expect("depth >= 1"), prec);
        let z = self.enc_to_dec.forward(&latent, mask.visible.len(), prec);
        let tok = prec.weights(&self.mask_token.value);
        let pos = prec.weights(&self.dec_pos.value);
        let mut x = vec![T::zero(); n * dd];
        for &i in &mask.masked {
            x[i * dd..(i + 1) * dd].copy_from_slice(&tok);
        }
        for (row, &i) in mask.visible.iter().enumerate() {
            x[i * dd..(i + 1) * dd].copy_from_slice(&z[row * dd..(row + 1) * dd]);
        }
        x.iter_mut().zip(pos.iter()).for_each(|(a, &p)| *a += p);
        prec.round(&mut x);
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        for b in &self.dec_blocks {
            let (y, c) = b.forward(&x, n, prec);
            blocks.push(c);
            x = y;
        }
        let (dec_out, dec_norm) = self.dec_norm.forward(&x, prec);
        let pred = self.pred.forward(&dec_out, n, prec);
        (
            pred,
            MaeCache {
                encoder: ecache,
                enc_norm,
                latent,
                blocks,
                dec_norm,
                dec_out,
            },
        )
    }

    pub fn backward(&mut self, cache: &MaeCache<T>, mask: &PatchMask, d_pred: &[T], prec: Precision) {
        let n = self.encoder.config.num_patches();
        let dd = self.config.decoder_dim;
        let g = self.pred.backward(&cache.dec_out, n, d_pred, prec, true).unwrap();
        let mut g = self.dec_norm.backward(&cache.dec_norm, &g, prec);
        for (b, c) in self.dec_blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g, n, prec);
        }
        self.dec_pos.grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        for &i in &mask.masked {
            self.mask_token
                .grad
                .iter_mut()
                .zip(&g[i * dd..(i + 1) * dd])
                .for_each(|(a, &b)| *a += b);
        }
        let mut dz = Vec::with_capacity(mask.visible.len() * dd);
        for &i in &mask.visible {
            dz.extend_from_slice(&g[i * dd..(i + 1) * dd]);
        }
        let dlatent = self
            .enc_to_dec
            .backward(&cache.latent, mask.visible.len(), &dz, prec, true)
            .unwrap();
        let dfinal = self.encoder.norm.backward(&cache.enc_norm, &dlatent, prec);
        let mut d_outputs = vec![None; self.encoder.blocks.len()];
        *d_outputs.last_mut().unwrap() = Some(dfinal);
        self.encoder.backward(&cache.encoder, &d_outputs, prec);
    }

    /// Forward, loss and backward for one image; gradients are scaled by
    /// `scale` and accumulated. Returns the unscaled loss.
    pub fn accumulate(&mut self, patches: &[T], mask: &PatchMask, prec: Precision, scale: f64) -> f64 {
        let pd = self.encoder.config.patch_dim();
        let (pred, cache) = self.forward(patches, mask, prec);
        let loss = masked_mse(&pred, patches, &mask.masked, pd);
        let mut g = masked_mse_grad(&pred, patches, &mask.masked, pd, scale);
        prec.round(&mut g);
        self.backward(&cache, mask, &g, prec);
        loss
    }
}

impl<T: Scalar> Module<T> for MaeModel<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        let p = join(prefix, "mae_decoder");
        self.enc_to_dec.visit_params(&join(&p, "embed"), f);
        f(join(&p, "mask_token"), &self.mask_token);
        f(join(&p, "pos_embed"), &self.dec_pos);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.visit_params(&join(&p, &format!("blocks.{i}")), f);
        }
        self.dec_norm.visit_params(&join(&p, "norm"), f);
        self.pred.visit_params(&join(&p, "pred"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        let p = join(prefix, "mae_decoder");
        self.enc_to_dec.visit_params_mut(&join(&p, "embed"), f);
        f(join(&p, "mask_token"), &mut self.mask_token);
        f(join(&p, "pos_embed"), &mut self.dec_pos);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(&p, &format!("blocks.{i}")), f);
        }
        self.dec_norm.visit_params_mut(&join(&p, "norm"), f);
        self.pred.visit_params_mut(&join(&p, "pred"), f);
    }
}

/// One optimizer step over a batch of patch sequences. Each image gets its
/// own random mask. Returns the mean masked reconstruction loss.
pub fn mae_pretrain_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut MaeModel<T>,
    batch: &[Vec<T>],
    optimizer: &mut AdamW,
    rng: &mut R,
    prec: Precision,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty pretraining batch"));
    }
    let n = model.encoder.config.num_patches();
    model.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for patches in batch {
        let mask = sample_mask(n, model.config.mask_ratio, rng)?;
        total += model.accumulate(patches, &mask, prec, scale);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            step: optimizer.step as usize,
            loss,
        });
    }
    optimizer.step(model)?;
    Ok(loss)
}

/// Settings of a whole pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub mae: MaeConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            precision: Precision::Float32,
            mae: MaeConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("pretraining needs steps > 0 and batch_size > 0"));
        }
        self.mae.validate()?;
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Pretrain `model` on patch sequences for `cfg.steps` steps. Batches walk a
/// seeded shuffle of the images, reshuffled after each pass. Returns the
/// per-step losses.
pub fn mae_pretrain<T: Scalar>(model: &mut MaeModel<T>, images: &[Vec<T>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("pretraining needs at least one image"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3A5C_0FF1);
    let mut opt = AdamW::new(cfg.optimizer());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let loss = mae_pretrain_step(model, &batch, &mut opt, &mut mask_rng, cfg.precision)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("pretrain step {}/{}: loss {loss:.4}", step + 1, cfg.steps);
        }
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            patch_size: 16,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            tap_layers: [1, 2, 2, 2],
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn masked_counts() {
        assert_eq!(masked_count(0.75, 196).unwrap(), 147);
        assert_eq!(masked_count(0.75, 4).unwrap(), 3);
        assert_eq!(masked_count(0.5, 16).unwrap(), 8);
        assert!(masked_count(0.1, 4).is_ok());
        assert!(masked_count(0.99, 4).is_err());
        assert!(masked_count(0.001, 4).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(196, 0.75, &mut rng).unwrap();
        assert_eq!((m.masked.len(), m.visible.len()), (147, 49));
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss_and_visible_values_are_ignored() {
        let target: Vec<f64> = (0..4 * 3).map(|i| i as f64).collect();
        assert_eq!(masked_mse(&target, &target, &[0, 2], 3), 0.0);
        let mut pred = target.clone();
        pred[3] += 10.0; // patch 1 is visible
        pred[11] += 5.0; // patch 3 is visible
        assert_eq!(masked_mse(&pred, &target, &[0, 2], 3), 0.0);
        pred[0] += 1.0;
        assert!((masked_mse(&pred, &target, &[0, 2], 3) - 1.0 / 6.0).abs() < 1e-15);
    }

    fn gradcheck_config() -> (EncoderConfig, MaeConfig) {
        let enc = toy();
        let mae = MaeConfig {
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_num_heads: 2,
            ..MaeConfig::default()
        };
        (enc, mae)
    }

    #[test]
    fn mae_gradient_matches_finite_differences() {
        let (enc, mae) = gradcheck_config();
        let base = MaeModel::<f64>::new(enc, mae, 4).unwrap();
        let mut init = Init::new(8);
        let patches: Vec<f64> = init.normal(4 * 1536, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let mut model = base.clone();
        model.accumulate(&patches, &mask, Precision::Float32, 1.0);
        let grads: Vec<(String, Vec<f64>)> = model
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect();
        let loss = |m: &MaeModel<f64>| {
            let (pred, _) = m.forward(&patches, &mask, Precision::Float32);
            masked_mse(&pred, &patches, &mask.masked, 1536)
        };
        let mut checked = 0;
        for (name, g) in &grads {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let h = 1e-5;
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
                let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let rel = (num - g[idx]).abs() / num.abs().max(g[idx].abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {} numeric {num}", g[idx]);
                checked += 1;
            }
        }
        assert!(checked > 60);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let (enc, mae) = gradcheck_config();
        let mut model = MaeModel::<f32>::new(enc, mae, 5).unwrap();
        let mut init = Init::new(9);
        let batch: Vec<Vec<f32>> = (0..4).map(|_| init.normal(4 * 1536, 1.0)).collect();
        let mut opt = AdamW::new(crate::optim::AdamWConfig {
            learning_rate: 1e-3,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let first = mae_pretrain_step(&mut model, &batch, &mut opt, &mut rng, Precision::Float32).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = mae_pretrain_step(&mut model, &batch, &mut opt, &mut rng, Precision::Float32).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }
}
