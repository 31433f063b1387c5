//! Fine-tuning: cross-entropy, AdamW, per-epoch validation and
//! checkpointing, best-validation-IoU selection.

pub mod checkpoint;
mod model;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, aggregate_all, confusion, ConfusionCounts, MetricsReport, Scheme};
use crate::nn::{Module, Precision, Scalar};
use crate::optim::{AdamW, AdamWConfig};
use crate::scene_io::{resize_pair, LabelMask, NormalizationStats, Sample, LAND};
use crate::unet::{predict_mask, LogitMap};
use crate::vit::TokenGrid;

pub use checkpoint::{load_encoder, load_model, read_checkpoint_metadata, save_encoder, save_model, FORMAT_TAG};
pub use model::{EncoderState, SegModel};

/// Sum over pixels of `−log softmax(logits)[true class]`, in `f64`, with
/// the gradient of `sum / count` with respect to the logits.
pub fn cross_entropy_sum_and_grad<T: Scalar>(
    logits: &LogitMap<T>,
    mask: &LabelMask,
    count: f64,
) -> Result<(f64, Vec<T>)> {
    check_aligned(logits, mask)?;
    let hw = logits.height * logits.width;
    let mut grad = vec![T::zero(); 2 * hw];
    let mut total = 0.0;
    for (i, &c) in mask.classes().iter().enumerate() {
        let w = logits.logits[i].to_f64().unwrap();
        let l = logits.logits[hw + i].to_f64().unwrap();
        let m = w.max(l);
        let lse = m + ((w - m).exp() + (l - m).exp()).ln();
        let (p_w, p_l) = ((w - lse).exp(), (l - lse).exp());
        let is_land = c == LAND;
        total += lse - if is_land { l } else { w };
        grad[i] = T::c((p_w - if is_land { 0.0 } else { 1.0 }) / count);
        grad[hw + i] = T::c((p_l - if is_land { 1.0 } else { 0.0 }) / count);
    }
    Ok((total, grad))
}

fn check_aligned<T: Scalar>(logits: &LogitMap<T>, mask: &LabelMask) -> Result<()> {
    if (logits.height, logits.width) != (mask.height(), mask.width()) {
        return Err(Error::invalid(format!(
            "logits are {}x{} but the mask is {}x{}",
            logits.height,
            logits.width,
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Mean per-pixel cross-entropy, always in full precision.
pub fn cross_entropy_loss<T: Scalar>(logits: &LogitMap<T>, mask: &LabelMask) -> Result<f64> {
    let n = (logits.height * logits.width) as f64;
    Ok(cross_entropy_sum_and_grad(logits, mask, n)?.0 / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Keep one checkpoint file per epoch instead of a rolling `last` file.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            max_epochs: 30,
            batch_size: 4,
            learning_rate: opt.learning_rate,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            precision: Precision::Float32,
            seed: 0,
            freeze_encoder: true,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        self.optimizer().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
    pub wall_time_s: f64,
    pub checkpoint_path: PathBuf,
}

impl EpochRecord {
    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss == other.train_loss
            && self.val_iou == other.val_iou
            && self.val_f1 == other.val_f1
            && self.checkpoint_path == other.checkpoint_path
    }
}

/// Scores of one model on one split, under every aggregation scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Macro-image-land IoU.
    pub iou: f64,
    /// Macro-image-land F1.
    pub f1: f64,
    pub reports: Vec<MetricsReport>,
}

impl EvalSummary {
    pub fn report(&self, scheme: Scheme) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.scheme == scheme)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunResult {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint_path: PathBuf,
    /// Test scores of the best-validation checkpoint.
    pub test: Option<EvalSummary>,
    /// Test scores after the last epoch.
    pub final_test: Option<EvalSummary>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub decoder_checksum_initial: String,
    pub decoder_checksum_final: String,
}

/// 1-based index of the highest value; the earliest wins ties. `None` for
/// an empty sequence.
pub fn select_best_epoch(val_iou: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_iou.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Resize to the model input size, then normalize.
pub fn prepare_samples(samples: &[Sample], stats: &NormalizationStats, size: usize) -> Result<Vec<Sample>> {
    samples
        .par_iter()
        .map(|s| {
            let (scene, mask) = if (s.scene.height(), s.scene.width()) == (size, size) {
                (s.scene.clone(), s.mask.clone())
            } else {
                resize_pair(&s.scene, &s.mask, (size, size))?
            };
            Sample::new(stats.apply(&scene), mask)
        })
        .collect()
}

/// Per-image confusion counts of `model` on prepared samples.
pub fn confusion_counts<T: Scalar>(
    model: &SegModel<T>,
    samples: &[Sample],
    prec: Precision,
) -> Result<Vec<(String, ConfusionCounts)>> {
    samples
        .iter()
        .map(|s| {
            let pred = predict_mask(&model.logits(&s.scene, prec)?, s.id());
            Ok((s.id().to_string(), confusion(&pred, &s.mask)?))
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &SegModel<T>, samples: &[Sample], prec: Precision) -> Result<EvalSummary> {
    let counts = confusion_counts(model, samples, prec)?;
    let main = aggregate(&counts, Scheme::MacroImageLand)?;
    Ok(EvalSummary {
        iou: main.iou,
        f1: main.f1,
        reports: aggregate_all(&counts)?,
    })
}

/// Training, validation and optional test samples, already prepared with
/// [`prepare_samples`].
#[derive(Clone, Copy)]
pub struct FitData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: Option<&'a [Sample]>,
    /// Where checkpoints go; `run_dir/checkpoints` when unset.
    pub checkpoint_dir: Option<&'a Path>,
}

const LOG_FILE: &str = "epochs.jsonl";

/// Fine-tune `model` and leave it holding the best-validation weights.
///
/// Writes `epochs.jsonl` under `run_dir` and checkpoints under
/// `data.checkpoint_dir`.
pub fn fit<T: Scalar>(
    model: &mut SegModel<T>,
    data: FitData<'_>,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<TrainRunResult> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid(format!(
            "fit needs non-empty train and val sets (got {} and {})",
            data.train.len(),
            data.val.len()
        )));
    }
    if cfg.freeze_encoder != model.encoder.is_frozen() {
        return Err(Error::invalid(format!(
            "freeze_encoder is {} but the model's encoder is {}",
            cfg.freeze_encoder,
            if model.encoder.is_frozen() {
                "frozen"
            } else {
                "trainable"
            }
        )));
    }
    let prec = cfg.precision;
    let ckpt_dir = data
        .checkpoint_dir
        .map_or_else(|| run_dir.join("checkpoints"), Path::to_path_buf);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(LOG_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let encoder_before = model.encoder.checksum();
    let decoder_initial = model.decoder.checksum();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD20F_0D20);
    let mut opt = AdamW::new(cfg.optimizer());

    // A frozen encoder is a fixed function, so its taps are computed once.
    let cached: Option<Vec<Vec<TokenGrid<T>>>> = if model.encoder.is_frozen() {
        Some(
            data.train
                .par_iter()
                .map(|s| model.taps(&s.scene, prec))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let best_path = ckpt_dir.join("best.safetensors");
    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, SegModel<T>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            match &mut model.encoder {
                EncoderState::Frozen(_) => model.decoder.zero_grads(),
                EncoderState::Trainable(e) => {
                    e.zero_grads();
                    model.decoder.zero_grads();
                }
            }
            let count = (batch.len() * model.decoder.image_size * model.decoder.image_size) as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = &data.train[i];
                let (taps, enc_cache) = match &cached {
                    Some(c) => (c[i].clone(), None),
                    None => {
                        let (t, c) = model.taps_train(&sample.scene, prec)?;
                        (t, Some(c))
                    }
                };
                let (logits, trace) = model.decode_train(&taps, prec, &mut dropout_rng)?;
                let (sum, mut grad) = cross_entropy_sum_and_grad(&logits, &sample.mask, count)?;
                prec.round(&mut grad);
                batch_loss += sum / count;
                let d_taps = model.decoder.backward(&trace, &grad, prec, enc_cache.is_some());
                if let (Some(c), Some(d), EncoderState::Trainable(e)) = (enc_cache, d_taps, &mut model.encoder) {
                    e.backward_taps(&c, &d, prec);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss * batch.len() as f64;
            match &mut model.encoder {
                EncoderState::Frozen(_) => opt.step(&mut model.decoder)?,
                EncoderState::Trainable(_) => opt.step(model)?,
            }
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val = evaluate(model, data.val, prec)?;
        let ckpt = if cfg.keep_epoch_checkpoints {
            ckpt_dir.join(format!("epoch_{epoch:03}.safetensors"))
        } else {
            ckpt_dir.join("last.safetensors")
        };
        save_epoch(model, &ckpt, epoch, val.iou)?;
        if best.as_ref().is_none_or(|(b, _)| val.iou > *b) {
            save_epoch(model, &best_path, epoch, val.iou)?;
            best = Some((val.iou, model.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_iou: val.iou,
            val_f1: val.f1,
            wall_time_s: t0.elapsed().as_secs_f64(),
            checkpoint_path: ckpt,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, val IoU {:.4}, val F1 {:.4} ({:.1}s)",
            cfg.max_epochs,
            record.train_loss,
            record.val_iou,
            record.val_f1,
            record.wall_time_s
        );
        writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        epochs.push(record);
    }

    let encoder_after = model.encoder.checksum();
    if let EncoderState::Frozen(f) = &model.encoder {
        if !f.verify() || encoder_after != encoder_before {
            return Err(Error::invalid("frozen encoder parameters changed during fine-tuning"));
        }
    }
    let decoder_final = model.decoder.checksum();
    let final_test = data.test.map(|t| evaluate(model, t, prec)).transpose()?;
    let ious: Vec<f64> = epochs.iter().map(|e| e.val_iou).collect();
    let best_epoch = select_best_epoch(&ious).expect("at least one epoch");
    *model = best.expect("at least one epoch").1;
    let test = data.test.map(|t| evaluate(model, t, prec)).transpose()?;
    let ids = |s: &[Sample]| s.iter().map(|x| x.id().to_string()).collect::<Vec<_>>();
    Ok(TrainRunResult {
        epochs,
        best_epoch,
        best_checkpoint_path: best_path,
        test,
        final_test,
        train_ids: ids(data.train),
        val_ids: ids(data.val),
        test_ids: data.test.map(ids).unwrap_or_default(),
        encoder_checksum_before: encoder_before,
        encoder_checksum_after: encoder_after,
        decoder_checksum_initial: decoder_initial,
        decoder_checksum_final: decoder_final,
    })
}

fn save_epoch<T: Scalar>(model: &SegModel<T>, path: &Path, epoch: usize, val_iou: f64) -> Result<()> {
    checkpoint::save_model(
        path,
        model,
        &[("epoch", epoch.to_string()), ("val_iou", val_iou.to_string())],
    )
}

/// Read back an `epochs.jsonl` log.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::Init;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = LogitMap::new(vec![0.3f64; 18], 3, 3).unwrap();
        let mask = LabelMask::new("m", 3, 3, vec![1, 0, 1, 0, 0, 1, 1, 1, 0]).unwrap();
        assert!((cross_entropy_loss(&logits, &mask).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let classes = vec![1u8, 0, 0, 1];
        let mut logits = vec![0.0f32; 8];
        for (i, &c) in classes.iter().enumerate() {
            let (w, l) = if c == 1 { (-20.0, 20.0) } else { (20.0, -20.0) };
            logits[i] = w;
            logits[4 + i] = l;
        }
        let map = LogitMap::new(logits, 2, 2).unwrap();
        let mask = LabelMask::new("m", 2, 2, classes).unwrap();
        assert!(cross_entropy_loss(&map, &mask).unwrap() < 1e-8);
    }

    #[test]
    fn random_case_matches_direct_softmax() {
        let v: Vec<f64> = Init::new(3).normal(18, 2.0);
        let classes = vec![0u8, 1, 1, 0, 1, 0, 0, 0, 1];
        let map = LogitMap::new(v.clone(), 3, 3).unwrap();
        let mask = LabelMask::new("m", 3, 3, classes.clone()).unwrap();
        let mut want = 0.0;
        for (i, &c) in classes.iter().enumerate() {
            let (w, l) = (v[i], v[9 + i]);
            let p = if c == 1 {
                l.exp() / (w.exp() + l.exp())
            } else {
                w.exp() / (w.exp() + l.exp())
            };
            want -= p.ln();
        }
        want /= 9.0;
        assert!((cross_entropy_loss(&map, &mask).unwrap() - want).abs() < 1e-10);
        assert!(cross_entropy_loss(&map, &LabelMask::new("m", 1, 9, classes).unwrap()).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let v: Vec<f64> = Init::new(4).normal(32, 1.5);
        let mask = LabelMask::new("m", 4, 4, vec![0, 1, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 0, 0, 1]).unwrap();
        let (_, g) = cross_entropy_sum_and_grad(&LogitMap::new(v.clone(), 4, 4).unwrap(), &mask, 16.0).unwrap();
        for i in 0..32 {
            let h = 1e-6;
            let mut p = v.clone();
            p[i] += h;
            let mut m = v.clone();
            m[i] -= h;
            let f = |x: Vec<f64>| cross_entropy_loss(&LogitMap::new(x, 4, 4).unwrap(), &mask).unwrap();
            let num = (f(p) - f(m)) / (2.0 * h);
            assert!((num - g[i]).abs() / num.abs().max(1e-6) < 1e-3);
        }
    }

    #[test]
    fn best_epoch_selection() {
        assert_eq!(select_best_epoch(&[0.5, 0.9, 0.7]), Some(2));
        assert_eq!(select_best_epoch(&[0.8, 0.8]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
        assert_eq!(select_best_epoch(&[0.1, 0.3, 0.3, 0.2]), Some(2));
    }

    #[test]
    fn config_defaults_follow_the_training_regime() {
        let c = TrainConfig::default();
        assert_eq!((c.max_epochs, c.batch_size, c.learning_rate), (30, 4, 1e-4));
        assert!(c.freeze_encoder);
        assert!(TrainConfig {
            batch_size: 0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..c
        }
        .validate()
        .is_err());
    }
}
