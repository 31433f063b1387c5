//! Patch-based Vision Transformer encoder over 6-band input, masked
//! autoencoder pretraining, and frozen-encoder handles.

mod encoder;
mod mae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::scene_io::NUM_BANDS;

pub use encoder::{freeze, EncoderCache, FrozenEncoder, VitEncoder};
pub use mae::{
    mae_pretrain, mae_pretrain_step, masked_count, masked_mse, masked_mse_grad, sample_mask, MaeConfig, MaeModel,
    PatchMask, PretrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_bands: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs feed the decoder, shallow first.
    pub tap_layers: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_bands: NUM_BANDS,
            embed_dim: 192,
            depth: 8,
            num_heads: 3,
            mlp_ratio: 4,
            tap_layers: [2, 4, 6, 8],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_bands != NUM_BANDS {
            return Err(Error::invalid(format!(
                "in_bands must be {NUM_BANDS}, got {}",
                self.in_bands
            )));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("depth and mlp_ratio must be positive"));
        }
        let t = self.tap_layers;
        if t[0] == 0 || t.windows(2).any(|w| w[0] > w[1]) || t[3] != self.depth {
            return Err(Error::invalid(format!(
                "tap_layers {t:?} must be non-decreasing, start at >= 1 and end at depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_bands * self.patch_size * self.patch_size
    }
}

/// Token outputs of one encoder layer, `(N, dim)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Vec<T>,
    pub grid_shape: (usize, usize),
    pub dim: usize,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(tokens: Vec<T>, grid: usize, dim: usize) -> Result<Self> {
        if tokens.len() != grid * grid * dim {
            return Err(Error::invalid(format!(
                "token buffer of {} values does not fit a {grid}x{grid} grid of dim {dim}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            grid_shape: (grid, grid),
            dim,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    /// Channel-major `(dim, G, G)` view for convolutional consumers.
    pub fn to_channels(&self) -> Vec<T> {
        let n = self.num_tokens();
        let mut out = vec![T::zero(); n * self.dim];
        for t in 0..n {
            for c in 0..self.dim {
                out[c * n + t] = self.tokens[t * self.dim + c];
            }
        }
        out
    }
}

/// Inverse of [`TokenGrid::to_channels`] for a gradient buffer.
pub fn channels_to_tokens<T: Scalar>(x: &[T], n: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * dim];
    for c in 0..dim {
        for t in 0..n {
            out[t * dim + c] = x[c * n + t];
        }
    }
    out
}

/// Split a `(C, H, W)` image into row-major patches of `C·p·p` values,
/// each flattened as `(channel, row, col)`.
pub fn patchify<T: Copy>(x: &[T], channels: usize, h: usize, w: usize, p: usize) -> Result<Vec<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    assert_eq!(x.len(), channels * h * w);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..channels {
                for r in 0..p {
                    let start = (c * h + pr * p + r) * w + pc * p;
                    out.extend_from_slice(&x[start..start + p]);
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify<T: Copy + Default>(patches: &[T], channels: usize, h: usize, w: usize, p: usize) -> Result<Vec<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || patches.len() != channels * h * w {
        return Err(Error::invalid(format!(
            "{} patch values cannot form a {channels}x{h}x{w} image with patch {p}",
            patches.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![T::default(); channels * h * w];
    let mut it = patches.chunks_exact(p);
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..channels {
                for r in 0..p {
                    let start = (c * h + pr * p + r) * w + pc * p;
                    out[start..start + p].copy_from_slice(it.next().expect("length checked"));
                }
            }
        }
    }
    Ok(out)
}
