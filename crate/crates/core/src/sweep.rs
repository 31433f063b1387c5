//! Training-set-size ablation: one fresh model per (size, variant) cell,
//! all scored on the same validation and test scenes.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene_io::{
    compute_normalization, load_manifest, load_split, sample_training_subset, NormalizationStats, Sample, Split,
};
use crate::trainer::{fit, load_encoder, prepare_samples, FitData, SegModel, TrainConfig, TrainRunResult};
use crate::unet::DecoderConfig;
use crate::vit::{EncoderConfig, VitEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullKeyword {
    Full,
}

/// A training-set size: an explicit count or the whole training split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeSpec {
    Count(usize),
    Full(FullKeyword),
}

impl SizeSpec {
    pub fn resolve(self, train_len: usize) -> usize {
        match self {
            SizeSpec::Count(n) => n,
            SizeSpec::Full(_) => train_len,
        }
    }
}

pub fn default_sizes() -> Vec<SizeSpec> {
    let mut v: Vec<SizeSpec> = [5, 10, 25, 50, 75, 100, 125, 150]
        .into_iter()
        .map(SizeSpec::Count)
        .collect();
    v.push(SizeSpec::Full(FullKeyword::Full));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub name: String,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Pretrained encoder weights. Without one the encoder keeps its seeded
    /// random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<SizeSpec>,
    pub variants: Vec<ModelVariant>,
    #[serde(default)]
    pub train: TrainConfig,
    pub manifest: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl SweepPlan {
    /// Sizes resolved against the training split, checked ascending and in range.
    pub fn resolved_sizes(&self, train_len: usize) -> Result<Vec<usize>> {
        let sizes: Vec<usize> = self.sizes.iter().map(|s| s.resolve(train_len)).collect();
        if sizes.is_empty() {
            return Err(Error::invalid("sweep plan has no sizes"));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "sweep sizes must be strictly ascending, got {sizes:?}"
            )));
        }
        if let Some(&bad) = sizes.iter().find(|&&n| n == 0 || n > train_len) {
            return Err(Error::invalid(format!(
                "sweep size {bad} is outside 1..={train_len} (training split size)"
            )));
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::invalid("sweep plan needs at least one model variant"));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("sweep variant names must be unique"));
        }
        for v in &self.variants {
            v.encoder.validate()?;
            v.decoder.validate()?;
        }
        self.train.validate()
    }
}

/// Seed of one cell, independent of scheduling order.
pub fn cell_seed(seed: u64, size: usize, variant: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{size}:{variant}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok {
        /// Best-validation checkpoint scored on the test split.
        test_iou: f64,
        test_f1: f64,
        /// Last-epoch weights scored on the test split.
        final_test_iou: f64,
        final_test_f1: f64,
        run: Box<TrainRunResult>,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub size: usize,
    pub variant: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub outcome: CellOutcome,
}

impl SweepCell {
    pub fn scores(&self) -> Option<(f64, f64)> {
        match &self.outcome {
            CellOutcome::Ok { test_iou, test_f1, .. } => Some((*test_iou, *test_f1)),
            CellOutcome::Failed { .. } => None,
        }
    }

    pub fn run(&self) -> Option<&TrainRunResult> {
        match &self.outcome {
            CellOutcome::Ok { run, .. } => Some(run),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepProvenance {
    pub seed: u64,
    pub plan: SweepPlan,
    pub version: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// One cell per (size, variant), sizes ascending, variants in plan order.
    pub rows: Vec<SweepCell>,
    /// True when at least one cell failed.
    pub partial: bool,
    pub provenance: SweepProvenance,
}

impl SweepResult {
    pub fn cell(&self, size: usize, variant: &str) -> Option<&SweepCell> {
        self.rows.iter().find(|c| c.size == size && c.variant == variant)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.rows.iter().map(|c| c.size).collect();
        s.dedup();
        s
    }

    pub fn variants(&self) -> Vec<String> {
        self.provenance.plan.variants.iter().map(|v| v.name.clone()).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct SweepData {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    stats: NormalizationStats,
}

struct PreparedEval {
    val: Vec<Sample>,
    test: Vec<Sample>,
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    data: &SweepData,
    eval: &PreparedEval,
    encoder: &VitEncoder<f32>,
    variant: &ModelVariant,
    train_cfg: &TrainConfig,
    subset: &[String],
    seed: u64,
    run_dir: &Path,
    checkpoint_dir: Option<PathBuf>,
) -> Result<TrainRunResult> {
    let chosen: Vec<Sample> = subset
        .iter()
        .map(|id| {
            data.train
                .iter()
                .find(|s| s.id() == id)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("subset id {id} not in training split")))
        })
        .collect::<Result<_>>()?;
    let train = prepare_samples(&chosen, &data.stats, encoder.config.image_size)?;
    let mut model = SegModel::new(
        encoder.clone(),
        variant.decoder.clone(),
        data.stats.clone(),
        train_cfg.freeze_encoder,
        seed,
    )?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let result = fit(
        &mut model,
        FitData {
            train: &train,
            val: &eval.val,
            test: Some(&eval.test),
            checkpoint_dir: checkpoint_dir.as_deref(),
        },
        &cfg,
        run_dir,
    )?;
    let text = serde_json::to_string_pretty(&result)?;
    let path = run_dir.join("result.json");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

fn outcome(result: Result<TrainRunResult>) -> CellOutcome {
    match result {
        Ok(run) => {
            let (test, fin) = (run.test.as_ref(), run.final_test.as_ref());
            match (test, fin) {
                (Some(t), Some(f)) => CellOutcome::Ok {
                    test_iou: t.iou,
                    test_f1: t.f1,
                    final_test_iou: f.iou,
                    final_test_f1: f.f1,
                    run: Box::new(run),
                },
                _ => CellOutcome::Failed {
                    error: "run finished without test scores".into(),
                },
            }
        }
        Err(e) => CellOutcome::Failed { error: e.to_string() },
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Cells trained concurrently; 0 and 1 both mean sequential.
    pub jobs: usize,
    /// Root for cell checkpoints instead of each cell's run directory.
    pub checkpoint_root: Option<PathBuf>,
}

/// Train and score every (size, variant) cell under `out_dir/runs`. A
/// failing cell is recorded and the sweep continues.
pub fn run_sweep(plan: &SweepPlan, out_dir: &Path, options: &SweepOptions) -> Result<SweepResult> {
    let jobs = options.jobs;
    let started = unix_now();
    plan.validate()?;
    let manifest = load_manifest(&plan.manifest)?;
    manifest.require_splits()?;
    let data = {
        let train = load_split(&manifest, Split::Train)?;
        let stats = compute_normalization(train.iter().map(|s| &s.scene))?;
        SweepData {
            val: load_split(&manifest, Split::Val)?,
            test: load_split(&manifest, Split::Test)?,
            train,
            stats,
        }
    };
    let train_ids: Vec<String> = data.train.iter().map(|s| s.id().to_string()).collect();
    let sizes = plan.resolved_sizes(train_ids.len())?;

    let mut encoders = Vec::with_capacity(plan.variants.len());
    for v in &plan.variants {
        let enc = match &v.encoder_checkpoint {
            Some(p) => {
                let enc: VitEncoder<f32> = load_encoder(p)?;
                if enc.config != v.encoder {
                    return Err(Error::invalid(format!(
                        "variant {}: checkpoint {} has a different encoder config",
                        v.name,
                        p.display()
                    )));
                }
                enc
            }
            None => VitEncoder::new(v.encoder.clone(), plan.seed)?,
        };
        encoders.push(enc);
    }
    let mut evals: BTreeMap<usize, PreparedEval> = BTreeMap::new();
    for v in &plan.variants {
        let size = v.encoder.image_size;
        if let std::collections::btree_map::Entry::Vacant(e) = evals.entry(size) {
            e.insert(PreparedEval {
                val: prepare_samples(&data.val, &data.stats, size)?,
                test: prepare_samples(&data.test, &data.stats, size)?,
            });
        }
    }

    // Subsets depend only on the plan seed, so variants share them.
    let subsets: Vec<Vec<String>> = sizes
        .iter()
        .map(|&k| sample_training_subset(&train_ids, k, plan.seed))
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..sizes.len())
        .flat_map(|si| (0..plan.variants.len()).map(move |vi| (si, vi)))
        .collect();
    let run_one = |&(si, vi): &(usize, usize)| -> SweepCell {
        let v = &plan.variants[vi];
        let size = sizes[si];
        let seed = cell_seed(plan.seed, size, &v.name);
        let cell_dir = Path::new(&v.name).join(format!("n{size:04}"));
        let run_dir = out_dir.join("runs").join(&cell_dir);
        let ckpt_dir = options.checkpoint_root.as_ref().map(|r| r.join(&cell_dir));
        log::info!("sweep cell: {} with {size} training images", v.name);
        let eval = &evals[&v.encoder.image_size];
        let res = catch_unwind(AssertUnwindSafe(|| {
            run_cell(
                &data,
                eval,
                &encoders[vi],
                v,
                &plan.train,
                &subsets[si],
                seed,
                &run_dir,
                ckpt_dir.clone(),
            )
        }))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(Error::invalid(format!("cell panicked: {msg}")))
        });
        let outcome = outcome(res);
        if let CellOutcome::Failed { error } = &outcome {
            log::warn!("sweep cell {} / {size} failed: {error}", v.name);
        }
        SweepCell {
            size,
            variant: v.name.clone(),
            seed,
            run_dir,
            outcome,
        }
    };
    let rows: Vec<SweepCell> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run_one).collect())
    } else {
        cells.iter().map(run_one).collect()
    };
    let partial = rows.iter().any(|c| c.scores().is_none());
    Ok(SweepResult {
        rows,
        partial,
        provenance: SweepProvenance {
            seed: plan.seed,
            plan: plan.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_s: started,
            finished_unix_s: unix_now(),
        },
    })
}

/// Aligned text table: one row per size, IoU and F1 columns per variant.
pub fn format_table(result: &SweepResult) -> String {
    let variants = result.variants();
    let mut header = vec!["Training Images".to_string()];
    for v in &variants {
        header.push(format!("{v} IoU"));
        header.push(format!("{v} F1"));
    }
    let mut rows = vec![header];
    for size in result.sizes() {
        let mut row = vec![size.to_string()];
        for v in &variants {
            match result.cell(size, v).and_then(SweepCell::scores) {
                Some((iou, f1)) => {
                    row.push(format!("{iou:.4}"));
                    row.push(format!("{f1:.4}"));
                }
                None => {
                    row.push("failed".into());
                    row.push("failed".into());
                }
            }
        }
        rows.push(row);
    }
    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu-sans-fonts/DejaVuSans.ttf",
    "/Library/Fonts/DejaVuSans.ttf",
];

/// Registers a sans-serif font once. Charts omit text when none is found.
fn fonts_available() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env = std::env::var("ISLANDSEG_FONT").ok();
        let paths = env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied());
        for p in paths {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no font found; plots are written without labels");
        false
    })
}

struct Chart<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    series: Vec<(String, Vec<(f64, f64)>)>,
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn draw_chart(path: &Path, chart: &Chart<'_>) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));
    let pts = chart.series.iter().flat_map(|(_, s)| s.iter());
    let (xmin, xmax) = pts
        .clone()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = pts.fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if xmin > xmax {
        return Err(Error::Plot(format!("{}: nothing to plot", path.display())));
    }
    let (x0, x1) = padded(xmin, xmax);
    let (y0, y1) = padded(ymin.min(0.0), ymax.max(1.0));
    let text = fonts_available();
    let root = BitMapBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption(chart.title, ("sans-serif", 24))
            .x_label_area_size(45)
            .y_label_area_size(60);
    }
    let mut ctx = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(|e| plot_err(&e))?;
    let mut mesh = ctx.configure_mesh();
    if text {
        mesh.x_desc(chart.x_label).y_desc(chart.y_label);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| plot_err(&e))?;
    for (i, (name, s)) in chart.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line = ctx
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?;
        if text {
            line.label(name.as_str())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        ctx.draw_series(s.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    if text {
        ctx.configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))
}

/// Write the table, the JSON results and the plots under `out_dir`.
/// Returns the paths written.
pub fn emit_report(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.rows.is_empty() {
        return Err(Error::invalid("sweep result has no cells"));
    }
    let plots = out_dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();

    let table = out_dir.join("table.txt");
    std::fs::write(&table, format_table(result)).map_err(|e| Error::io(&table, e))?;
    written.push(table);

    let json = out_dir.join("results.json");
    std::fs::write(&json, serde_json::to_string_pretty(result)?).map_err(|e| Error::io(&json, e))?;
    written.push(json);

    let variants = result.variants();
    for (metric, pick) in [("iou", 0usize), ("f1", 1usize)] {
        let series = variants
            .iter()
            .map(|v| {
                let pts = result
                    .rows
                    .iter()
                    .filter(|c| &c.variant == v)
                    .filter_map(|c| c.scores().map(|s| (c.size as f64, if pick == 0 { s.0 } else { s.1 })))
                    .collect();
                (v.clone(), pts)
            })
            .filter(|(_, p): &(String, Vec<(f64, f64)>)| !p.is_empty())
            .collect::<Vec<_>>();
        if series.is_empty() {
            continue;
        }
        let path = plots.join(format!("{metric}_vs_size.png"));
        let label = if metric == "iou" { "IoU" } else { "F1" };
        let title = format!("Test {label} vs training dataset size");
        draw_chart(
            &path,
            &Chart {
                title: &title,
                x_label: "training images",
                y_label: label,
                series,
            },
        )?;
        written.push(path);
    }

    for cell in &result.rows {
        let Some(run) = cell.run() else { continue };
        let pts: Vec<(f64, f64)> = run.epochs.iter().map(|e| (e.epoch as f64, e.val_iou)).collect();
        let path = plots.join(format!("curve_{}_n{:04}.png", cell.variant, cell.size));
        let title = format!("{}: {} images, validation IoU", cell.variant, cell.size);
        draw_chart(
            &path,
            &Chart {
                title: &title,
                x_label: "epoch",
                y_label: "IoU",
                series: vec![("val IoU".into(), pts)],
            },
        )?;
        written.push(path);
    }
    Ok(written)
}
