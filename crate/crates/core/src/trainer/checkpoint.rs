//! Checkpoints as safetensors containers.
//!
//! Tensor names are parameter paths (`encoder.blocks.0.attn.qkv.weight`,
//! `decoder.head.bias`, ...). The string metadata carries the format tag,
//! the configs and normalization as JSON, and a SHA-256 checksum per model
//! part which is re-verified on load.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{de::DeserializeOwned, Serialize};

use super::model::SegModel;
use crate::error::{Error, Result};
use crate::nn::{Module, Param, Scalar};
use crate::scene_io::NormalizationStats;
use crate::unet::{DecoderConfig, UnetDecoder};
use crate::vit::{EncoderConfig, VitEncoder};

pub const FORMAT_TAG: &str = "islandseg-ckpt-v1";

const KIND_ENCODER: &str = "encoder";
const KIND_SEGMENTER: &str = "segmenter";

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Write `bytes` next to `path` and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn serialize_params<T: Scalar>(parts: &[(&str, &dyn Module<T>)], metadata: HashMap<String, String>) -> Result<Vec<u8>> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, module) in parts {
        module.visit_params(prefix, &mut |name, p| {
            let mut bytes = Vec::with_capacity(p.numel() * std::mem::size_of::<T>());
            p.value.iter().for_each(|v| v.write_le(&mut bytes));
            buffers.push((name, p.shape.clone(), bytes));
        });
    }
    let views = buffers
        .iter()
        .map(|(n, s, b)| TensorView::new(T::DTYPE, s.clone(), b).map(|v| (n.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::invalid(format!("tensor serialization failed: {e}")))?;
    safetensors::serialize(views, Some(metadata))
        .map_err(|e| Error::invalid(format!("tensor serialization failed: {e}")))
}

/// Copy tensors named `{prefix}.{param}` into `module`. Every parameter must
/// be present with a matching shape and dtype.
fn fill_params<T: Scalar>(path: &Path, st: &SafeTensors<'_>, prefix: &str, module: &mut dyn Module<T>) -> Result<()> {
    let mut err = None;
    module.visit_params_mut(prefix, &mut |name, p: &mut Param<T>| {
        if err.is_some() {
            return;
        }
        let view = match st.tensor(&name) {
            Ok(v) => v,
            Err(_) => {
                err = Some(ckpt_err(path, format!("missing tensor `{name}`")));
                return;
            }
        };
        if view.dtype() != T::DTYPE || view.shape() != p.shape.as_slice() {
            err = Some(ckpt_err(
                path,
                format!(
                    "tensor `{name}` is {:?} {:?}, expected {:?} {:?}",
                    view.dtype(),
                    view.shape(),
                    T::DTYPE,
                    p.shape
                ),
            ));
            return;
        }
        let size = std::mem::size_of::<T>();
        for (v, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(size)) {
            *v = T::read_le(chunk);
        }
    });
    err.map_or(Ok(()), Err)
}

fn meta_json<V: DeserializeOwned>(path: &Path, meta: &HashMap<String, String>, key: &str) -> Result<V> {
    let raw = meta
        .get(key)
        .ok_or_else(|| ckpt_err(path, format!("metadata key `{key}` missing")))?;
    serde_json::from_str(raw).map_err(|e| ckpt_err(path, format!("metadata `{key}`: {e}")))
}

fn to_json<V: Serialize>(v: &V) -> String {
    serde_json::to_string(v).expect("config serializes")
}

fn read_container(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse<'a>(path: &Path, bytes: &'a [u8], kind: &str) -> Result<(SafeTensors<'a>, HashMap<String, String>)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(ckpt_err(path, format!("not an {FORMAT_TAG} container")));
    }
    let found = meta.get("kind").map(String::as_str).unwrap_or("");
    if found != kind && !(kind == KIND_ENCODER && found == KIND_SEGMENTER) {
        return Err(ckpt_err(path, format!("expected a {kind} checkpoint, found `{found}`")));
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok((st, meta))
}

fn verify<T: Scalar>(path: &Path, meta: &HashMap<String, String>, key: &str, module: &dyn Module<T>) -> Result<()> {
    let want = meta
        .get(key)
        .ok_or_else(|| ckpt_err(path, format!("metadata key `{key}` missing")))?;
    let got = module.checksum();
    if &got != want {
        return Err(ckpt_err(path, format!("{key} mismatch: stored {want}, computed {got}")));
    }
    Ok(())
}

/// Save a pretrained encoder on its own.
pub fn save_encoder<T: Scalar>(path: &Path, encoder: &VitEncoder<T>, extra: &[(&str, String)]) -> Result<()> {
    let mut meta = HashMap::from([
        ("format".to_string(), FORMAT_TAG.to_string()),
        ("kind".to_string(), KIND_ENCODER.to_string()),
        ("encoder_config".to_string(), to_json(&encoder.config)),
        ("encoder_checksum".to_string(), encoder.checksum()),
    ]);
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let bytes = serialize_params::<T>(&[("encoder", encoder)], meta)?;
    write_atomic(path, &bytes)
}

/// Load the encoder part of an encoder or full checkpoint.
pub fn load_encoder<T: Scalar>(path: &Path) -> Result<VitEncoder<T>> {
    let bytes = read_container(path)?;
    let (st, meta) = parse(path, &bytes, KIND_ENCODER)?;
    let config: EncoderConfig = meta_json(path, &meta, "encoder_config")?;
    let mut enc = VitEncoder::new(config, 0)?;
    fill_params(path, &st, "encoder", &mut enc)?;
    verify(path, &meta, "encoder_checksum", &enc)?;
    Ok(enc)
}

/// Save encoder, decoder and normalization together.
pub fn save_model<T: Scalar>(path: &Path, model: &SegModel<T>, extra: &[(&str, String)]) -> Result<()> {
    let enc = model.encoder.encoder();
    let mut meta = HashMap::from([
        ("format".to_string(), FORMAT_TAG.to_string()),
        ("kind".to_string(), KIND_SEGMENTER.to_string()),
        ("encoder_config".to_string(), to_json(&enc.config)),
        ("decoder_config".to_string(), to_json(&model.decoder.config)),
        ("normalization".to_string(), to_json(&model.normalization)),
        ("encoder_checksum".to_string(), enc.checksum()),
        ("decoder_checksum".to_string(), model.decoder.checksum()),
        ("encoder_frozen".to_string(), model.encoder.is_frozen().to_string()),
    ]);
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let bytes = serialize_params::<T>(&[("encoder", enc), ("decoder", &model.decoder)], meta)?;
    write_atomic(path, &bytes)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<SegModel<T>> {
    let bytes = read_container(path)?;
    let (st, meta) = parse(path, &bytes, KIND_SEGMENTER)?;
    let enc_cfg: EncoderConfig = meta_json(path, &meta, "encoder_config")?;
    let dec_cfg: DecoderConfig = meta_json(path, &meta, "decoder_config")?;
    let normalization: NormalizationStats = meta_json(path, &meta, "normalization")?;
    let frozen = meta.get("encoder_frozen").map(String::as_str) != Some("false");
    let mut enc = VitEncoder::new(enc_cfg, 0)?;
    fill_params(path, &st, "encoder", &mut enc)?;
    verify(path, &meta, "encoder_checksum", &enc)?;
    let c = &enc.config;
    let mut dec = UnetDecoder::new(dec_cfg, c.embed_dim, c.grid(), c.image_size, 0)?;
    fill_params(path, &st, "decoder", &mut dec)?;
    verify(path, &meta, "decoder_checksum", &dec)?;
    let mut model = SegModel::new(enc, dec.config.clone(), normalization, frozen, 0)?;
    model.decoder = dec;
    Ok(model)
}

/// String metadata of a checkpoint, without loading tensors.
pub fn read_checkpoint_metadata(path: &Path) -> Result<HashMap<String, String>> {
    let bytes = read_container(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(header.metadata().clone().unwrap_or_default())
}
