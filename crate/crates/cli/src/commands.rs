use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use islandseg::metrics::Scheme;
use islandseg::nn::Precision;
use islandseg::scene_io::{
    compute_normalization, ingest_directory, load_manifest, load_mask, load_split, resize_pair, sample_training_subset,
    write_manifest, DatasetManifest, LabelMask, Sample, Split,
};
use islandseg::shoreline::{extract_shorelines, simplify, ShorelineSet};
use islandseg::sweep::{emit_report, run_sweep, SweepOptions, SweepPlan, SweepResult};
use islandseg::synthgen::generate_dataset;
use islandseg::trainer::{
    evaluate, fit, load_encoder, load_model, prepare_samples, save_encoder, FitData, SegModel, TrainConfig,
};
use islandseg::unet::DecoderConfig;
use islandseg::vit::{mae_pretrain, EncoderConfig, MaeModel, PretrainConfig, VitEncoder};
use islandseg::Error;

use crate::args::*;
use crate::provenance::{self, load_config, unix_now, Provenance};
use crate::{CliError, CliResult};

/// Fine-tuning never runs longer than this many epochs.
pub const MAX_EPOCHS: usize = 30;

const CACHE_ENV: &str = "ISLANDSEG_CACHE";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))?;
    Ok(())
}

fn require(path: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| usage(format!("{flag} is required")))
}

/// Checkpoint directory for a run under `out`, relocated below
/// `$ISLANDSEG_CACHE` when that is set.
pub fn checkpoint_dir(out: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        Some(root) => {
            let abs = std::path::absolute(out).unwrap_or_else(|_| out.to_path_buf());
            let digest = Sha256::digest(abs.to_string_lossy().as_bytes());
            let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("run");
            PathBuf::from(root).join(format!("{name}-{}", hex8(&digest)))
        }
        None => out.join("checkpoints"),
    }
}

fn hex8(bytes: &[u8]) -> String {
    bytes[..4].iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_split(s: &str) -> CliResult<Split> {
    Split::parse(s).ok_or_else(|| usage(format!("unknown split `{s}` (expected train, val or test)")))
}

fn tap_layers(v: &[usize]) -> CliResult<[usize; 4]> {
    v.try_into()
        .map_err(|_| usage(format!("--tap-layers needs exactly 4 values, got {}", v.len())))
}

fn apply_encoder_args(cfg: &mut EncoderConfig, a: &EncoderArgs) -> CliResult<()> {
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(image_size, patch_size, embed_dim, depth, num_heads, mlp_ratio);
    if let Some(t) = &a.tap_layers {
        cfg.tap_layers = tap_layers(t)?;
    }
    Ok(())
}

fn apply_decoder_args(cfg: &mut DecoderConfig, a: &DecoderArgs) -> CliResult<()> {
    if let Some(w) = &a.channel_widths {
        cfg.channel_widths = w
            .as_slice()
            .try_into()
            .map_err(|_| usage(format!("--channel-widths needs exactly 4 values, got {}", w.len())))?;
    }
    if let Some(d) = a.head_dropout {
        cfg.head_dropout = d;
    }
    if let Some(g) = a.norm_groups {
        cfg.norm_groups = g;
    }
    Ok(())
}

fn apply_train_args(cfg: &mut TrainConfig, a: &TrainArgs) {
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(
        max_epochs,
        batch_size,
        learning_rate,
        beta1,
        beta2,
        eps,
        weight_decay,
        precision,
        freeze_encoder,
        keep_epoch_checkpoints
    );
}

fn clamp_epochs(cfg: &mut TrainConfig) {
    if cfg.max_epochs > MAX_EPOCHS {
        log::warn!("max_epochs {} capped at {MAX_EPOCHS}", cfg.max_epochs);
        cfg.max_epochs = MAX_EPOCHS;
    }
}

/// Settings and outputs of one subcommand.
struct Outcome {
    config: serde_json::Value,
    seed: u64,
    outputs: Vec<PathBuf>,
}

pub fn run(cli: &crate::args::Cli) -> CliResult<()> {
    let started = unix_now();
    let name = cli.command.name();
    let mut resolved: Option<(serde_json::Value, u64)> = None;
    let result = dispatch(cli, &mut resolved);
    let (config, seed, outputs, status, error) = match &result {
        Ok(o) => (o.config.clone(), o.seed, o.outputs.clone(), "ok", None),
        Err(e) => {
            let (c, s) = resolved
                .clone()
                .unwrap_or((serde_json::Value::Null, cli.seed.unwrap_or(0)));
            (c, s, Vec::new(), "error", Some(e.to_string()))
        }
    };
    let record = Provenance {
        subcommand: name.to_string(),
        argv: std::env::args().collect(),
        seed,
        config,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        status: status.to_string(),
        error,
        outputs,
    };
    match provenance::write(&cli.out, &record) {
        Ok(p) => log::info!("provenance written to {}", p.display()),
        Err(e) if result.is_ok() => return Err(e),
        Err(e) => log::warn!("could not write provenance: {e}"),
    }
    result.map(|_| ())
}

fn dispatch(cli: &crate::args::Cli, resolved: &mut Option<(serde_json::Value, u64)>) -> CliResult<Outcome> {
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Synth(a) => synth(cli, a, cfg_path, resolved),
        Command::Ingest(a) => ingest(cli, a, cfg_path, resolved),
        Command::Pretrain(a) => pretrain(cli, a, cfg_path, resolved),
        Command::Finetune(a) => finetune(cli, a, cfg_path, resolved),
        Command::Evaluate(a) => evaluate_cmd(cli, a, cfg_path, resolved),
        Command::Sweep(a) => sweep(cli, a, cfg_path, resolved),
        Command::Extract(a) => extract(cli, a, cfg_path, resolved),
        Command::Report(a) => report(cli, a, cfg_path, resolved),
    }
}

fn record<C: Serialize>(
    cfg: &C,
    seed: u64,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<serde_json::Value> {
    let v = serde_json::to_value(cfg)?;
    *resolved = Some((v.clone(), seed));
    Ok(v)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 225,
            size: 224,
            seed: 0,
        }
    }
}

fn synth(
    cli: &Cli,
    a: &SynthArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let mut cfg: SynthConfig = load_config(cfg_path, "synth")?.unwrap_or_default();
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.size = a.size.unwrap_or(cfg.size);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    let config = record(&cfg, cfg.seed, resolved)?;
    log::info!("generating {} scenes of {}x{} px", cfg.n, cfg.size, cfg.size);
    let manifest = generate_dataset(cfg.n, cfg.size, cfg.seed, &cli.out)?;
    let c = manifest.split_counts();
    log::info!(
        "wrote {} train / {} val / {} test to {}",
        c[&Split::Train],
        c[&Split::Val],
        c[&Split::Test],
        cli.out.display()
    );
    Ok(Outcome {
        config,
        seed: cfg.seed,
        outputs: vec![cli.out.join("manifest.json")],
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub scenes: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub seed: u64,
}

fn ingest(
    cli: &Cli,
    a: &IngestArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let mut cfg: IngestConfig = load_config(cfg_path, "ingest")?.unwrap_or_default();
    cfg.scenes = a.scenes.clone().or(cfg.scenes);
    cfg.masks = a.masks.clone().or(cfg.masks);
    cfg.splits = a.splits.clone().or(cfg.splits);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    let config = record(&cfg, cfg.seed, resolved)?;
    let scenes = require(&cfg.scenes, "--scenes")?;
    let masks = require(&cfg.masks, "--masks")?;
    let splits: Option<BTreeMap<String, Split>> = match &cfg.splits {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::format(p, format!("split file: {e}")))?)
        }
        None => None,
    };
    let manifest = ingest_directory(&scenes, &masks, splits.as_ref(), cfg.seed)?;
    std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let path = cli.out.join("manifest.json");
    write_manifest(&path, &manifest)?;
    let c = manifest.split_counts();
    log::info!(
        "manifest {}: {} train / {} val / {} test",
        path.display(),
        c[&Split::Train],
        c[&Split::Val],
        c[&Split::Test]
    );
    Ok(Outcome {
        config,
        seed: cfg.seed,
        outputs: vec![path],
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainCmdConfig {
    pub manifest: Option<PathBuf>,
    pub all_splits: bool,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
}

fn pretrain(
    cli: &Cli,
    a: &PretrainArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let mut cfg: PretrainCmdConfig = load_config(cfg_path, "pretrain")?.unwrap_or_default();
    cfg.manifest = a.manifest.clone().or(cfg.manifest);
    cfg.all_splits = a.all_splits.unwrap_or(cfg.all_splits);
    let p = &mut cfg.pretrain;
    p.steps = a.steps.unwrap_or(p.steps);
    p.batch_size = a.batch_size.unwrap_or(p.batch_size);
    p.learning_rate = a.learning_rate.unwrap_or(p.learning_rate);
    p.weight_decay = a.weight_decay.unwrap_or(p.weight_decay);
    p.mae.mask_ratio = a.mask_ratio.unwrap_or(p.mae.mask_ratio);
    p.precision = a.precision.unwrap_or(p.precision);
    p.seed = cli.seed.unwrap_or(p.seed);
    apply_encoder_args(&mut cfg.encoder, &a.encoder)?;
    let seed = cfg.pretrain.seed;
    let config = record(&cfg, seed, resolved)?;
    cfg.encoder.validate()?;
    cfg.pretrain.validate()?;

    let manifest = load_manifest(&require(&cfg.manifest, "--manifest")?)?;
    let splits: &[Split] = if cfg.all_splits { &Split::ALL } else { &[Split::Train] };
    let mut samples: Vec<Sample> = Vec::new();
    for &s in splits {
        samples.extend(load_split(&manifest, s)?);
    }
    if samples.is_empty() {
        return Err(usage("no scenes to pretrain on"));
    }
    let stats = compute_normalization(samples.iter().map(|s| &s.scene))?;
    let prepared = prepare_samples(&samples, &stats, cfg.encoder.image_size)?;
    let mut model = MaeModel::<f32>::new(cfg.encoder.clone(), cfg.pretrain.mae.clone(), seed)?;
    let patches: Vec<Vec<f32>> = prepared
        .iter()
        .map(|s| model.encoder.scene_patches(&s.scene))
        .collect::<Result<_, _>>()?;
    log::info!(
        "pretraining on {} scenes for {} steps",
        patches.len(),
        cfg.pretrain.steps
    );
    let losses = mae_pretrain(&mut model, &patches, &cfg.pretrain)?;
    let ckpt = checkpoint_dir(&cli.out).join("encoder.safetensors");
    save_encoder(
        &ckpt,
        &model.encoder,
        &[
            ("normalization", serde_json::to_string(&stats)?),
            ("pretrain_config", serde_json::to_string(&cfg.pretrain)?),
        ],
    )?;
    let loss_path = cli.out.join("pretrain_losses.json");
    write_json(&loss_path, &losses)?;
    log::info!(
        "final loss {:.4}; encoder saved to {}",
        losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(Outcome {
        config,
        seed,
        outputs: vec![ckpt, loss_path],
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub manifest: Option<PathBuf>,
    pub encoder_checkpoint: Option<PathBuf>,
    pub train_size: Option<usize>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

/// Training scenes in subset order plus normalization from the whole
/// training split.
fn training_scenes(
    manifest: &DatasetManifest,
    train_size: Option<usize>,
    seed: u64,
) -> CliResult<(Vec<Sample>, islandseg::scene_io::NormalizationStats)> {
    let all = load_split(manifest, Split::Train)?;
    let stats = compute_normalization(all.iter().map(|s| &s.scene))?;
    let chosen = match train_size {
        None => all,
        Some(k) => {
            let ids: Vec<String> = all.iter().map(|s| s.id().to_string()).collect();
            let subset = sample_training_subset(&ids, k, seed)?;
            let mut by_id: BTreeMap<String, Sample> = all.into_iter().map(|s| (s.id().to_string(), s)).collect();
            subset
                .iter()
                .map(|id| by_id.remove(id).expect("subset ids come from the split"))
                .collect()
        }
    };
    Ok((chosen, stats))
}

fn finetune(
    cli: &Cli,
    a: &FinetuneArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let mut cfg: FinetuneConfig = load_config(cfg_path, "finetune")?.unwrap_or_default();
    cfg.manifest = a.manifest.clone().or(cfg.manifest);
    cfg.encoder_checkpoint = a.encoder_checkpoint.clone().or(cfg.encoder_checkpoint);
    cfg.train_size = a.train_size.or(cfg.train_size);
    apply_encoder_args(&mut cfg.encoder, &a.encoder)?;
    apply_decoder_args(&mut cfg.decoder, &a.decoder)?;
    apply_train_args(&mut cfg.train, &a.train);
    cfg.train.seed = cli.seed.unwrap_or(cfg.train.seed);
    clamp_epochs(&mut cfg.train);
    let seed = cfg.train.seed;
    let manifest_path = require(&cfg.manifest, "--manifest")?;
    let encoder = match &cfg.encoder_checkpoint {
        Some(p) => {
            let enc: VitEncoder<f32> = load_encoder(p)?;
            cfg.encoder = enc.config.clone();
            enc
        }
        None => VitEncoder::new(cfg.encoder.clone(), seed)?,
    };
    let config = record(&cfg, seed, resolved)?;
    cfg.decoder.validate()?;
    cfg.train.validate()?;

    let manifest = load_manifest(&manifest_path)?;
    manifest.require_splits()?;
    let size = cfg.encoder.image_size;
    let (train, stats) = training_scenes(&manifest, cfg.train_size, seed)?;
    let train = prepare_samples(&train, &stats, size)?;
    let val = prepare_samples(&load_split(&manifest, Split::Val)?, &stats, size)?;
    let test = prepare_samples(&load_split(&manifest, Split::Test)?, &stats, size)?;
    let mut model = SegModel::new(encoder, cfg.decoder.clone(), stats, cfg.train.freeze_encoder, seed)?;
    let ckpt_dir = checkpoint_dir(&cli.out);
    log::info!(
        "fine-tuning on {} scenes for {} epochs ({} val, {} test)",
        train.len(),
        cfg.train.max_epochs,
        val.len(),
        test.len()
    );
    let result = fit(
        &mut model,
        FitData {
            train: &train,
            val: &val,
            test: Some(&test),
            checkpoint_dir: Some(&ckpt_dir),
        },
        &cfg.train,
        &cli.out,
    )
    .map_err(CliError::Core)?;
    let result_path = cli.out.join("result.json");
    write_json(&result_path, &result)?;
    if let (Some(t), Some(f)) = (&result.test, &result.final_test) {
        log::info!(
            "best epoch {}: test IoU {:.4}, F1 {:.4} (last epoch: IoU {:.4}, F1 {:.4})",
            result.best_epoch,
            t.iou,
            t.f1,
            f.iou,
            f.f1
        );
    }
    Ok(Outcome {
        config,
        seed,
        outputs: vec![
            result_path,
            cli.out.join("epochs.jsonl"),
            result.best_checkpoint_path.clone(),
        ],
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: Option<String>,
    pub manifest: Option<PathBuf>,
    pub split: String,
    pub precision: Precision,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            manifest: None,
            split: "test".into(),
            precision: Precision::Float32,
        }
    }
}

/// `best` and `last` name checkpoints of the run under `out`.
fn resolve_checkpoint(spec: &str, out: &Path) -> PathBuf {
    match spec {
        "best" | "last" => checkpoint_dir(out).join(format!("{spec}.safetensors")),
        other => PathBuf::from(other),
    }
}

fn evaluate_cmd(
    cli: &Cli,
    a: &EvaluateArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let mut cfg: EvaluateConfig = load_config(cfg_path, "evaluate")?.unwrap_or_default();
    cfg.checkpoint = a.checkpoint.clone().or(cfg.checkpoint);
    cfg.manifest = a.manifest.clone().or(cfg.manifest);
    cfg.split = a.split.clone().unwrap_or(cfg.split);
    cfg.precision = a.precision.unwrap_or(cfg.precision);
    let seed = cli.seed.unwrap_or(0);
    let config = record(&cfg, seed, resolved)?;
    let spec = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let split = parse_split(&cfg.split)?;
    let ckpt = resolve_checkpoint(&spec, &cli.out);
    if !ckpt.is_file() {
        return Err(Error::MissingFile(ckpt).into());
    }
    let model: SegModel<f32> = load_model(&ckpt)?;
    let manifest = load_manifest(&require(&cfg.manifest, "--manifest")?)?;
    let samples = load_split(&manifest, split)?;
    if samples.is_empty() {
        return Err(usage(format!("split {split} is empty")));
    }
    let prepared = prepare_samples(&samples, &model.normalization, model.encoder_config().image_size)?;
    let summary = evaluate(&model, &prepared, cfg.precision)?;
    for r in &summary.reports {
        log::info!("{split} {:>16}: IoU {:.4}, F1 {:.4}", r.scheme.as_str(), r.iou, r.f1);
    }
    let path = cli.out.join(format!("eval_{split}.json"));
    write_json(&path, &summary)?;
    Ok(Outcome {
        config,
        seed,
        outputs: vec![path],
    })
}

fn sweep(
    cli: &Cli,
    a: &SweepArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let plan_path = a.plan.as_deref().or(cfg_path);
    let mut plan: SweepPlan =
        load_config(plan_path, "sweep")?.ok_or_else(|| usage("sweep needs a plan file (--plan or --config)"))?;
    if let Some(m) = &a.manifest {
        plan.manifest = m.clone();
    }
    if let Some(s) = &a.sizes {
        plan.sizes = s.clone();
    }
    apply_train_args(&mut plan.train, &a.train);
    clamp_epochs(&mut plan.train);
    plan.seed = cli.seed.unwrap_or(plan.seed);
    let config = record(&plan, plan.seed, resolved)?;
    let options = SweepOptions {
        jobs: cli.jobs.unwrap_or(1),
        checkpoint_root: std::env::var_os(CACHE_ENV).is_some().then(|| checkpoint_dir(&cli.out)),
    };
    let result = run_sweep(&plan, &cli.out, &options)?;
    let outputs = emit_report(&result, &cli.out)?;
    eprint!("{}", islandseg::sweep::format_table(&result));
    if result.partial {
        let failed = result.rows.iter().filter(|c| c.scores().is_none()).count();
        log::warn!("{failed} sweep cell(s) failed; see results.json");
    }
    Ok(Outcome {
        config,
        seed: plan.seed,
        outputs,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub manifest: Option<PathBuf>,
    pub split: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub mask_files: Vec<PathBuf>,
    pub resolution_m: f64,
    pub simplify: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            split: None,
            checkpoint: None,
            mask_files: Vec::new(),
            resolution_m: 30.0,
            simplify: 0.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct ExtractIndexEntry {
    scene_id: String,
    polylines: usize,
    closed: usize,
    total_length_m: f64,
    file: PathBuf,
}

fn extract(
    cli: &Cli,
    a: &ExtractArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let mut cfg: ExtractConfig = load_config(cfg_path, "extract")?.unwrap_or_default();
    cfg.manifest = a.manifest.clone().or(cfg.manifest);
    cfg.split = a.split.clone().or(cfg.split);
    cfg.checkpoint = a.checkpoint.clone().or(cfg.checkpoint);
    if !a.mask_files.is_empty() {
        cfg.mask_files = a.mask_files.clone();
    }
    cfg.resolution_m = a.resolution_m.unwrap_or(cfg.resolution_m);
    cfg.simplify = a.simplify.unwrap_or(cfg.simplify);
    let seed = cli.seed.unwrap_or(0);
    let config = record(&cfg, seed, resolved)?;
    if !(cfg.resolution_m > 0.0 && cfg.simplify >= 0.0) {
        return Err(usage("--resolution-m must be positive and --simplify non-negative"));
    }

    // (mask, geo) per scene.
    let mut masks: Vec<(LabelMask, Option<islandseg::scene_io::GeoTransform>)> = Vec::new();
    for p in &cfg.mask_files {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("mask").to_string();
        masks.push((load_mask(p, &id)?, None));
    }
    if let Some(mp) = &cfg.manifest {
        let manifest = load_manifest(mp)?;
        let splits = match &cfg.split {
            Some(s) => vec![parse_split(s)?],
            None => Split::ALL.to_vec(),
        };
        let model: Option<SegModel<f32>> = match &cfg.checkpoint {
            Some(c) => Some(load_model(c)?),
            None => None,
        };
        for s in splits {
            for sample in load_split(&manifest, s)? {
                let geo = sample.scene.geo.clone();
                let mask = match &model {
                    None => sample.mask,
                    Some(m) => {
                        let size = m.encoder_config().image_size;
                        let (h, w) = (sample.scene.height(), sample.scene.width());
                        let (small, _) = resize_pair(&sample.scene, &sample.mask, (size, size))?;
                        let pred = m.predict(&small, Precision::Float32)?;
                        if (h, w) == (size, size) {
                            pred
                        } else {
                            resize_pair(&small, &pred, (h, w))?.1
                        }
                    }
                };
                masks.push((mask, geo));
            }
        }
    } else if cfg.checkpoint.is_some() {
        return Err(usage("--checkpoint needs --manifest to find scenes"));
    }
    if masks.is_empty() {
        return Err(usage("nothing to extract: give --manifest or --mask-file"));
    }

    let dir = cli.out.join("shorelines");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut index = Vec::with_capacity(masks.len());
    for (mask, geo) in &masks {
        let mut lines = extract_shorelines(mask);
        if cfg.simplify > 0.0 {
            lines = lines.iter().map(|l| simplify(l, cfg.simplify)).collect();
        }
        let set = ShorelineSet::new(&mask.scene_id, &lines, cfg.resolution_m, geo.as_ref());
        let file = dir.join(format!("{}.json", mask.scene_id));
        set.write(&file)?;
        index.push(ExtractIndexEntry {
            scene_id: mask.scene_id.clone(),
            polylines: lines.len(),
            closed: lines.iter().filter(|l| l.closed).count(),
            total_length_m: set.polylines.iter().map(|p| p.length_m).sum(),
            file,
        });
    }
    let index_path = dir.join("index.json");
    write_json(&index_path, &index)?;
    log::info!("extracted shorelines for {} scenes into {}", index.len(), dir.display());
    Ok(Outcome {
        config,
        seed,
        outputs: vec![index_path],
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub results: Option<PathBuf>,
}

fn report(
    cli: &Cli,
    a: &ReportArgs,
    cfg_path: Option<&Path>,
    resolved: &mut Option<(serde_json::Value, u64)>,
) -> CliResult<Outcome> {
    let mut cfg: ReportConfig = load_config(cfg_path, "report")?.unwrap_or_default();
    cfg.results = a.results.clone().or(cfg.results);
    let seed = cli.seed.unwrap_or(0);
    let config = record(&cfg, seed, resolved)?;
    let result = SweepResult::read(&require(&cfg.results, "--results")?)?;
    let outputs = emit_report(&result, &cli.out)?;
    eprint!("{}", islandseg::sweep::format_table(&result));
    for r in result.rows.iter().filter_map(|c| c.run().map(|run| (c, run))) {
        let (cell, run) = r;
        if let Some(m) = run.test.as_ref().and_then(|t| t.report(Scheme::MicroLand)) {
            log::info!("{} n={}: micro-land IoU {:.4}", cell.variant, cell.size, m.iou);
        }
    }
    Ok(Outcome { config, seed, outputs })
}
