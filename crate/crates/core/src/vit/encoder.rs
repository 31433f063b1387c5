use super::{patchify, EncoderConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::attention::BlockCache;
use crate::nn::init::{sincos_2d, Init};
use crate::nn::{join, LayerNorm, Linear, Module, Param, Precision, Scalar, TransformerBlock};
use crate::scene_io::{MultispectralScene, NUM_BANDS};

/// Linear patch embedding, learned positional embedding, pre-norm blocks.
/// No class token. `norm` is applied only on the pretraining path.
#[derive(Clone, Debug)]
pub struct VitEncoder<T> {
    pub config: EncoderConfig,
    pub patch_embed: Linear<T>,
    pub pos_embed: Param<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
}

/// Activations saved by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    patches: Vec<T>,
    indices: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> VitEncoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.embed_dim;
        let patch_embed = Linear::new(config.patch_dim(), d, &mut init);
        let pos_embed = Param::new(&[config.num_patches(), d], sincos_2d(config.grid(), d));
        let blocks = (0..config.depth)
            .map(|_| TransformerBlock::new(d, config.num_heads, config.mlp_ratio, &mut init))
            .collect();
        Ok(Self {
            patch_embed,
            pos_embed,
            blocks,
            norm: LayerNorm::new(d),
            config,
        })
    }

    /// Run the blocks over the patches at `indices` (any subset of the grid,
    /// in the given order). Returns every block's output.
    pub fn forward_tokens(&self, patches: &[T], indices: &[usize], prec: Precision) -> (Vec<Vec<T>>, EncoderCache<T>) {
        let d = self.config.embed_dim;
        let n = indices.len();
        assert_eq!(patches.len(), n * self.config.patch_dim());
        let mut x = self.patch_embed.forward(patches, n, prec);
        let pos = prec.weights(&self.pos_embed.value);
        for (row, &idx) in indices.iter().enumerate() {
            x[row * d..(row + 1) * d]
                .iter_mut()
                .zip(&pos[idx * d..(idx + 1) * d])
                .for_each(|(v, &p)| *v += p);
        }
        prec.round(&mut x);
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, n, prec);
            caches.push(c);
            outputs.push(y.clone());
            x = y;
        }
        (
            outputs,
            EncoderCache {
                patches: patches.to_vec(),
                indices: indices.to_vec(),
                blocks: caches,
            },
        )
    }

    /// Accumulate parameter gradients given gradients arriving at block
    /// outputs (`d_outputs[i]` for block `i`, `None` when unused).
    pub fn backward(&mut self, cache: &EncoderCache<T>, d_outputs: &[Option<Vec<T>>], prec: Precision) {
        assert_eq!(d_outputs.len(), self.blocks.len());
        let d = self.config.embed_dim;
        let n = cache.indices.len();
        let mut g = vec![T::zero(); n * d];
        for i in (0..self.blocks.len()).rev() {
            if let Some(extra) = &d_outputs[i] {
                g.iter_mut().zip(extra).for_each(|(a, &b)| *a += b);
            }
            g = self.blocks[i].backward(&cache.blocks[i], &g, n, prec);
        }
        for (row, &idx) in cache.indices.iter().enumerate() {
            self.pos_embed.grad[idx * d..(idx + 1) * d]
                .iter_mut()
                .zip(&g[row * d..(row + 1) * d])
                .for_each(|(a, &b)| *a += b);
        }
        self.patch_embed.backward(&cache.patches, n, &g, prec, false);
    }

    /// Patch sequence of a normalized scene, converted to `T`.
    pub fn scene_patches(&self, scene: &MultispectralScene) -> Result<Vec<T>> {
        let (c, h, w) = scene.shape();
        let size = self.config.image_size;
        if c != NUM_BANDS || h != size || w != size {
            return Err(Error::invalid(format!(
                "scene `{}` is {h}x{w} but the encoder expects {size}x{size}",
                scene.scene_id
            )));
        }
        let data: Vec<T> = scene.data().iter().map(|&v| T::c(v as f64)).collect();
        patchify(&data, c, h, w, self.config.patch_size)
    }

    fn taps_from(&self, outputs: &[Vec<T>]) -> Vec<TokenGrid<T>> {
        self.config
            .tap_layers
            .iter()
            .map(|&l| {
                TokenGrid::new(outputs[l - 1].clone(), self.config.grid(), self.config.embed_dim).expect("full grid")
            })
            .collect()
    }

    /// Tap-layer token grids over the full patch grid.
    pub fn encode_patches(&self, patches: &[T], prec: Precision) -> Vec<TokenGrid<T>> {
        let all: Vec<usize> = (0..self.config.num_patches()).collect();
        let (outputs, _) = self.forward_tokens(patches, &all, prec);
        self.taps_from(&outputs)
    }

    /// Like [`Self::encode_patches`] but keeps the cache for a backward pass.
    pub fn encode_patches_train(&self, patches: &[T], prec: Precision) -> (Vec<TokenGrid<T>>, EncoderCache<T>) {
        let all: Vec<usize> = (0..self.config.num_patches()).collect();
        let (outputs, cache) = self.forward_tokens(patches, &all, prec);
        (self.taps_from(&outputs), cache)
    }

    /// Backward from gradients with respect to the four tap grids.
    pub fn backward_taps(&mut self, cache: &EncoderCache<T>, d_taps: &[Vec<T>], prec: Precision) {
        let mut d_outputs: Vec<Option<Vec<T>>> = vec![None; self.blocks.len()];
        // A block tapped more than once gets the sum of its gradients.
        for (&l, g) in self.config.tap_layers.iter().zip(d_taps) {
            match &mut d_outputs[l - 1] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g.clone()),
            }
        }
        self.backward(cache, &d_outputs, prec);
    }

    pub fn encode(&self, scene: &MultispectralScene, prec: Precision) -> Result<Vec<TokenGrid<T>>> {
        Ok(self.encode_patches(&self.scene_patches(scene)?, prec))
    }
}

impl<T: Scalar> Module<T> for VitEncoder<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.patch_embed.visit_params(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.patch_embed.visit_params_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

/// An encoder whose parameters can no longer be reached mutably. The
/// checksum taken at freeze time can be re-verified at any point.
#[derive(Clone, Debug)]
pub struct FrozenEncoder<T> {
    encoder: VitEncoder<T>,
    checksum: String,
}

impl<T: Scalar> FrozenEncoder<T> {
    pub fn encoder(&self) -> &VitEncoder<T> {
        &self.encoder
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Checksum recorded when the encoder was frozen.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// True while the parameters still match the recorded checksum.
    pub fn verify(&self) -> bool {
        self.encoder.checksum() == self.checksum
    }

    pub fn into_inner(self) -> VitEncoder<T> {
        self.encoder
    }
}

impl<T: Scalar> From<VitEncoder<T>> for FrozenEncoder<T> {
    fn from(encoder: VitEncoder<T>) -> Self {
        let checksum = encoder.checksum();
        Self { encoder, checksum }
    }
}

/// Freeze an encoder. Freezing a [`FrozenEncoder`] returns it unchanged.
pub fn freeze<T: Scalar>(encoder: impl Into<FrozenEncoder<T>>) -> FrozenEncoder<T> {
    encoder.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(size: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: size,
            patch_size: 16,
            embed_dim: 16,
            depth: 4,
            num_heads: 2,
            mlp_ratio: 2,
            tap_layers: [1, 2, 3, 4],
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn taps_have_full_grid_shape() {
        let enc = VitEncoder::<f32>::new(toy(64), 0).unwrap();
        let scene = MultispectralScene::new("s", 64, 64, vec![0.1; 6 * 64 * 64]).unwrap();
        let taps = enc.encode(&scene, Precision::Float32).unwrap();
        assert_eq!(taps.len(), 4);
        for t in &taps {
            assert_eq!(t.num_tokens(), 16);
            assert_eq!(t.tokens.len(), 16 * 16);
            assert!(t.tokens.iter().all(|v| v.is_finite()));
        }
        assert_eq!(taps, enc.encode(&scene, Precision::Float32).unwrap());
        let wrong = MultispectralScene::new("s", 32, 32, vec![0.1; 6 * 32 * 32]).unwrap();
        assert!(enc.encode(&wrong, Precision::Float32).is_err());
    }

    #[test]
    fn freeze_is_idempotent() {
        let enc = VitEncoder::<f32>::new(toy(32), 1).unwrap();
        let sum = enc.checksum();
        let frozen = freeze(enc);
        assert_eq!(frozen.checksum(), sum);
        let again = freeze(frozen.clone());
        assert_eq!(again.checksum(), frozen.checksum());
        assert!(again.verify());
    }

    #[test]
    fn tap_gradients_match_finite_differences() {
        let enc0 = VitEncoder::<f64>::new(toy(32), 2).unwrap();
        let mut init = Init::new(3);
        let patches: Vec<f64> = init.normal(4 * 1536, 1.0);
        let w: Vec<Vec<f64>> = (0..4).map(|_| init.normal(4 * 16, 1.0)).collect();
        let loss = |e: &VitEncoder<f64>| {
            e.encode_patches(&patches, Precision::Float32)
                .iter()
                .zip(&w)
                .map(|(t, w)| t.tokens.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let mut enc = enc0.clone();
        let (_, cache) = enc.encode_patches_train(&patches, Precision::Float32);
        enc.backward_taps(&cache, &w, Precision::Float32);
        let grads: Vec<(String, Vec<f64>)> = enc
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.grad.clone()))
            .collect();
        for (name, g) in grads.iter().filter(|(n, _)| !n.starts_with("norm")) {
            let idx = g.len() / 2;
            let mut plus = enc0.clone();
            let mut minus = enc0.clone();
            let h = 1e-6;
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
            let tol = 1e-5 * num.abs().max(g[idx].abs()) + 1e-7;
            assert!((num - g[idx]).abs() < tol, "{name}: {} vs {num}", g[idx]);
        }
    }
}
