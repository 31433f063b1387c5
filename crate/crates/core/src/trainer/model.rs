use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{join, Module, Param, Precision, Scalar};
use crate::scene_io::{LabelMask, MultispectralScene, NormalizationStats};
use crate::unet::{predict_mask, DecodeTrace, DecoderConfig, LogitMap, UnetDecoder};
use crate::vit::{freeze, EncoderCache, EncoderConfig, FrozenEncoder, TokenGrid, VitEncoder};

/// The encoder either frozen or open to gradient updates.
#[derive(Clone, Debug)]
pub enum EncoderState<T> {
    Frozen(FrozenEncoder<T>),
    Trainable(VitEncoder<T>),
}

impl<T: Scalar> EncoderState<T> {
    pub fn encoder(&self) -> &VitEncoder<T> {
        match self {
            EncoderState::Frozen(f) => f.encoder(),
            EncoderState::Trainable(e) => e,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, EncoderState::Frozen(_))
    }

    pub fn checksum(&self) -> String {
        self.encoder().checksum()
    }
}

/// Encoder, decoder and the input normalization they were trained with.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub encoder: EncoderState<T>,
    pub decoder: UnetDecoder<T>,
    pub normalization: NormalizationStats,
}

impl<T: Scalar> SegModel<T> {
    /// Fresh decoder on top of `encoder`.
    pub fn new(
        encoder: VitEncoder<T>,
        decoder_config: DecoderConfig,
        normalization: NormalizationStats,
        frozen: bool,
        seed: u64,
    ) -> Result<Self> {
        let c = &encoder.config;
        let decoder = UnetDecoder::new(decoder_config, c.embed_dim, c.grid(), c.image_size, seed)?;
        let encoder = if frozen {
            EncoderState::Frozen(freeze(encoder))
        } else {
            EncoderState::Trainable(encoder)
        };
        Ok(Self {
            encoder,
            decoder,
            normalization,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder.encoder().config
    }

    /// Taps of an already normalized scene.
    pub fn taps(&self, scene: &MultispectralScene, prec: Precision) -> Result<Vec<TokenGrid<T>>> {
        self.encoder.encoder().encode(scene, prec)
    }

    pub fn taps_train(
        &self,
        scene: &MultispectralScene,
        prec: Precision,
    ) -> Result<(Vec<TokenGrid<T>>, EncoderCache<T>)> {
        let enc = self.encoder.encoder();
        Ok(enc.encode_patches_train(&enc.scene_patches(scene)?, prec))
    }

    pub fn decode_train(
        &self,
        taps: &[TokenGrid<T>],
        prec: Precision,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LogitMap<T>, DecodeTrace<T>)> {
        self.decoder.forward(taps, prec, Some(rng))
    }

    /// Inference on a normalized scene.
    pub fn logits(&self, scene: &MultispectralScene, prec: Precision) -> Result<LogitMap<T>> {
        self.decoder.decode(&self.taps(scene, prec)?, prec)
    }

    /// Inference on a raw scene: normalizes with the stored statistics first.
    pub fn predict(&self, raw: &MultispectralScene, prec: Precision) -> Result<LabelMask> {
        let scene = self.normalization.apply(raw);
        Ok(predict_mask(&self.logits(&scene, prec)?, &raw.scene_id))
    }
}

impl<T: Scalar> Module<T> for SegModel<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.encoder.encoder().visit_params(&join(prefix, "encoder"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }

    /// A frozen encoder is never visited mutably.
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        if let EncoderState::Trainable(e) = &mut self.encoder {
            e.visit_params_mut(&join(prefix, "encoder"), f);
        }
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}
