//! End-to-end commands: synth → prune → train → finetune → eval → report.
//!
//! Every command is a pure function of its config, its input files and the
//! root seed; per-stage seeds are derived from the root seed and a stage tag.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{prune_causal, CausalPruneConfig};
use crate::metrics::{
    nasa_score, retention_stats, rmse, separability, EvalReport, RetentionSummary, ScatterPoint, WindowFate,
};
use crate::predictor::{
    finetune, load_checkpoint, save_checkpoint, train, Dataset, EpochRecord, Mat, PredictorConfig,
    PredictorModel, TrainConfig,
};
use crate::report::{read_json, read_jsonl, write_json, write_jsonl};
use crate::screen::{fit_gmm, optimize_threshold, posterior_hq, window_features, GmmModel, ScreenConfig};
use crate::series::{
    apply_normalizer, downsample, fit_normalizer, load_series, make_windows, write_series, NormalizerParams,
    SensorSeries, SeriesSchema, Window,
};
use crate::synth::{gen_degradation, window_truth, CorruptSpan, DegradationSpec, WindowTruth};
use crate::gp::TraceRecord;
use crate::{Error, Result};

/// Experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Causal stage then quality screening.
    Cg,
    /// Causal stage only.
    Pc,
    /// No pruning.
    Full,
    /// Every `sub_stride`-th window by index, no model-based pruning.
    Sub,
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cg" => Ok(Arm::Cg),
            "pc" => Ok(Arm::Pc),
            "full" => Ok(Arm::Full),
            "sub" => Ok(Arm::Sub),
            other => Err(Error::Config(format!("unknown arm `{other}` (expected cg, pc, full or sub)"))),
        }
    }
}

/// What `synth` writes: a corrupted target set, plus clean source and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub target: DegradationSpec,
    pub source_units: usize,
    pub test_units: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            target: DegradationSpec::default(),
            source_units: 10,
            test_units: 5,
        }
    }
}

/// Data file locations. Relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub test: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            source: "source.csv".into(),
            target: "target.csv".into(),
            test: "test.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub arm: Arm,
    pub data: DataPaths,
    pub schema: SeriesSchema,
    pub downsample: usize,
    pub window: usize,
    pub stride: usize,
    /// Window-index stride of the `sub` arm.
    pub sub_stride: usize,
    /// Optional piecewise-linear RUL ceiling applied to training labels.
    pub rul_cap: Option<f64>,
    /// Labels are divided by this before training.
    pub label_scale: f64,
    /// Stride of the windows scored by `eval`.
    pub eval_stride: usize,
    pub synth: SynthConfig,
    pub causal: CausalPruneConfig,
    pub screen: ScreenConfig,
    pub predictor: PredictorConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: "run".into(),
            arm: Arm::Cg,
            data: DataPaths::default(),
            schema: SeriesSchema::default(),
            downsample: 10,
            window: 50,
            stride: 1,
            sub_stride: 10,
            rul_cap: None,
            label_scale: 100.0,
            eval_stride: 1,
            synth: SynthConfig::default(),
            causal: CausalPruneConfig::default(),
            screen: ScreenConfig::default(),
            predictor: PredictorConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings sized for the bundled synthetic benchmark: no decimation, one
    /// causal segment per unit, a fixed alignment threshold scaled to the
    /// 7x7 strength matrix, and a small predictor.
    pub fn synth_benchmark() -> Self {
        PipelineConfig {
            downsample: 1,
            label_scale: 500.0,
            causal: CausalPruneConfig {
                // One segment per unit; thresholds sized for the 7x7 strength
                // matrix of six sensors plus RUL.
                segment_span: 500.0,
                fixed_epsilon: Some(0.05),
                ..CausalPruneConfig::default()
            },
            predictor: PredictorConfig {
                embed_dim: 16,
                heads: 2,
                layers: 2,
                ffn_dim: 32,
                head_dims: [50, 10],
                input_channels: 6,
                seq_len: 50,
            },
            pretrain: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs: 30,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                learning_rate: 0.003,
                batch_size: 16,
                max_epochs: 30,
                freeze_first: 1,
                beta: 0.0,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    /// The benchmark with the adaptive `mean - gamma * std` alignment
    /// threshold: keeps only windows better aligned than typical, roughly a
    /// tenth of the target set.
    pub fn synth_aggressive() -> Self {
        let mut cfg = Self::synth_benchmark();
        cfg.causal.fixed_epsilon = None;
        cfg.causal.gamma = 0.6;
        cfg
    }

    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::json(format!("reading {}", path.display()), e))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.window == 0 || self.stride == 0 || self.sub_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("downsample, window and stride values must be >= 1".into()));
        }
        if !(self.label_scale > 0.0 && self.label_scale.is_finite()) {
            return Err(Error::Config("label_scale must be finite and > 0".into()));
        }
        if let Some(cap) = self.rul_cap {
            if !(cap > 0.0) {
                return Err(Error::Config("rul_cap must be > 0".into()));
            }
        }
        if self.predictor.seq_len != self.window {
            return Err(Error::Config(format!(
                "predictor.seq_len {} differs from window {}",
                self.predictor.seq_len, self.window
            )));
        }
        self.synth.target.validate()?;
        self.causal.validate()?;
        self.screen.validate()?;
        self.predictor.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.finetune.freeze_first > self.predictor.layers {
            return Err(Error::Config(format!(
                "finetune.freeze_first {} exceeds predictor.layers {}",
                self.finetune.freeze_first, self.predictor.layers
            )));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Derives an independent seed for one pipeline stage.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    // FNV-1a over the tag, mixed into the root seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(root ^ h).random()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

// ---------------------------------------------------------------- synth

pub const SPANS_FILE: &str = "corrupt_spans.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub source: Vec<SensorSeries>,
    pub target: Vec<SensorSeries>,
    pub test: Vec<SensorSeries>,
    pub spans: Vec<CorruptSpan>,
}

/// Generates the three datasets in memory.
pub fn synth_datasets(cfg: &SynthConfig, root_seed: u64) -> Result<SynthOutput> {
    let target_spec = DegradationSpec {
        seed: stage_seed(root_seed ^ cfg.target.seed, "synth.target"),
        ..cfg.target.clone()
    };
    let clean = |units: usize, tag: &str| DegradationSpec {
        units,
        corrupt_fraction: 0.0,
        seed: stage_seed(root_seed ^ cfg.target.seed, tag),
        ..cfg.target.clone()
    };
    let (target, spans) = gen_degradation(&target_spec)?;
    let (source, _) = gen_degradation(&clean(cfg.source_units.max(1), "synth.source"))?;
    let (test, _) = gen_degradation(&clean(cfg.test_units.max(1), "synth.test"))?;
    Ok(SynthOutput {
        source,
        target,
        test,
        spans,
    })
}

pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let out = synth_datasets(&cfg.synth, cfg.seed)?;
    write_series(&cfg.resolve(&cfg.data.source), &out.source)?;
    write_series(&cfg.resolve(&cfg.data.target), &out.target)?;
    write_series(&cfg.resolve(&cfg.data.test), &out.test)?;
    write_jsonl(&cfg.artifact(SPANS_FILE), &out.spans)?;
    write_json(&cfg.artifact("synth_spec.json"), &cfg.synth)?;
    Ok(out)
}

// ---------------------------------------------------------------- prune

pub const INDEX_FILE: &str = "prune_index.jsonl";
pub const PRUNE_REPORT_FILE: &str = "prune_report.json";
pub const BO_TRACE_FILE: &str = "bo_trace.jsonl";

/// One line of the prune index. `mse_causal` is absent when the causal stage
/// did not run; `q` is absent for windows that never reached screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneIndexRecord {
    pub window_id: usize,
    pub unit: String,
    pub rul_level: f64,
    pub start: usize,
    pub mse_causal: Option<f64>,
    pub q: Option<f64>,
    pub retained: bool,
}

impl PruneIndexRecord {
    pub fn fate(&self) -> WindowFate {
        if self.retained {
            WindowFate::Kept
        } else if self.mse_causal.is_some() && self.q.is_none() {
            WindowFate::RemovedCausal
        } else if self.q.is_some() {
            WindowFate::RemovedQuality
        } else {
            WindowFate::RemovedOther
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoSummary {
    pub candidates: usize,
    pub retained: usize,
    /// Retained fraction of the windows that reached screening.
    pub retention: f64,
    pub theta: f64,
    pub gmm: GmmModel,
    pub em_iterations: usize,
    pub em_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub arm: Arm,
    pub windows: usize,
    pub retention: RetentionSummary,
    pub stage_two: Option<StageTwoSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub index: Vec<PruneIndexRecord>,
    pub report: PruneReport,
    pub trace: Vec<TraceRecord>,
}

/// Downsamples, normalizes (fitted on `series` itself) and windows a dataset.
pub fn prepare_windows(series: &[SensorSeries], cfg: &PipelineConfig, norm: Option<&NormalizerParams>) -> Result<(Vec<SensorSeries>, Vec<Window>, NormalizerParams)> {
    let decimated = series
        .iter()
        .map(|s| downsample(s, cfg.downsample))
        .collect::<Result<Vec<_>>>()?;
    let params = match norm {
        Some(p) => p.clone(),
        None => fit_normalizer(&decimated)?,
    };
    let normalized = decimated
        .iter()
        .map(|s| apply_normalizer(s, &params))
        .collect::<Result<Vec<_>>>()?;
    let mut windows = Vec::new();
    for s in &normalized {
        windows.extend(make_windows(s, cfg.window, cfg.stride)?);
    }
    Ok((normalized, windows, params))
}

/// Runs the configured arm over prepared windows.
pub fn prune_windows(series: &[SensorSeries], windows: &[Window], cfg: &PipelineConfig) -> Result<PruneOutcome> {
    if windows.is_empty() {
        return Err(Error::arg("no windows to prune"));
    }
    let mut index: Vec<PruneIndexRecord> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| PruneIndexRecord {
            window_id: i,
            unit: w.unit_id.clone(),
            rul_level: w.rul_level,
            start: w.start,
            mse_causal: None,
            q: None,
            retained: true,
        })
        .collect();

    let mut stage_two = None;
    let mut trace = Vec::new();
    match cfg.arm {
        Arm::Full => {}
        Arm::Sub => {
            for r in &mut index {
                r.retained = r.window_id % cfg.sub_stride == 0;
            }
        }
        Arm::Pc | Arm::Cg => {
            let fidelity = prune_causal(windows, series, &cfg.causal)?;
            for (r, f) in index.iter_mut().zip(&fidelity) {
                r.mse_causal = Some(f.mse);
                r.retained = f.retained;
            }
            if cfg.arm == Arm::Cg {
                let survivors: Vec<usize> = index.iter().filter(|r| r.retained).map(|r| r.window_id).collect();
                if survivors.len() >= 4 {
                    let feats: Vec<_> = survivors.iter().map(|&i| window_features(&windows[i], &cfg.screen)).collect();
                    let fit = fit_gmm(&feats, &cfg.screen, stage_seed(cfg.seed, "gmm"))?;
                    let q = feats
                        .iter()
                        .map(|f| posterior_hq(f, &fit.model))
                        .collect::<Result<Vec<f64>>>()?;
                    let outcome = optimize_threshold(&q, &feats, &cfg.screen, cfg.screen.bo_budget, stage_seed(cfg.seed, "bo"))?;
                    let mut kept = 0;
                    for (&i, &qi) in survivors.iter().zip(&q) {
                        index[i].q = Some(qi);
                        index[i].retained = qi >= outcome.theta;
                        kept += usize::from(index[i].retained);
                    }
                    trace = outcome.trace;
                    stage_two = Some(StageTwoSummary {
                        candidates: survivors.len(),
                        retained: kept,
                        retention: kept as f64 / survivors.len() as f64,
                        theta: outcome.theta,
                        gmm: fit.model,
                        em_iterations: fit.objective.len(),
                        em_converged: fit.converged,
                    });
                }
            }
        }
    }
    let fates: Vec<WindowFate> = index.iter().map(PruneIndexRecord::fate).collect();
    let report = PruneReport {
        arm: cfg.arm,
        windows: windows.len(),
        retention: retention_stats(&fates),
        stage_two,
    };
    Ok(PruneOutcome { index, report, trace })
}

/// Stage 1 then stage 2 on the target dataset; writes the index, report and
/// optimization trace. An empty retained set is an error, after writing.
pub fn cmd_prune(cfg: &PipelineConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let raw = load_series(&cfg.resolve(&cfg.data.target), &cfg.schema)?;
    let (series, windows, _) = prepare_windows(&raw, cfg, None)?;
    let outcome = prune_windows(&series, &windows, cfg)?;
    write_jsonl(&cfg.artifact(INDEX_FILE), &outcome.index)?;
    write_json(&cfg.artifact(PRUNE_REPORT_FILE), &outcome.report)?;
    write_jsonl(&cfg.artifact(BO_TRACE_FILE), &outcome.trace)?;
    if outcome.report.retention.retained == 0 {
        return Err(Error::arg(format!(
            "pruning retained no windows (report written to {})",
            cfg.artifact(PRUNE_REPORT_FILE).display()
        )));
    }
    Ok(outcome)
}

/// Confusion of a prune index against generator ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selectivity {
    pub clean: usize,
    pub clean_retained: usize,
    pub clean_retained_stage_one: usize,
    pub corrupted: usize,
    pub corrupted_discarded: usize,
    pub mixed: usize,
    pub mixed_discarded: usize,
}

impl Selectivity {
    pub fn clean_retention(&self) -> f64 {
        self.clean_retained as f64 / self.clean.max(1) as f64
    }

    pub fn clean_retention_stage_one(&self) -> f64 {
        self.clean_retained_stage_one as f64 / self.clean.max(1) as f64
    }

    pub fn corrupted_discard(&self) -> f64 {
        self.corrupted_discarded as f64 / self.corrupted.max(1) as f64
    }
}

pub fn selectivity(index: &[PruneIndexRecord], windows: &[Window], spans: &[CorruptSpan]) -> Selectivity {
    let mut s = Selectivity {
        clean: 0,
        clean_retained: 0,
        clean_retained_stage_one: 0,
        corrupted: 0,
        corrupted_discarded: 0,
        mixed: 0,
        mixed_discarded: 0,
    };
    for (r, w) in index.iter().zip(windows) {
        match window_truth(w, spans) {
            WindowTruth::Clean => {
                s.clean += 1;
                s.clean_retained += usize::from(r.retained);
                s.clean_retained_stage_one += usize::from(r.fate() != WindowFate::RemovedCausal);
            }
            WindowTruth::Corrupted => {
                s.corrupted += 1;
                s.corrupted_discarded += usize::from(!r.retained);
            }
            WindowTruth::Mixed => {
                s.mixed += 1;
                s.mixed_discarded += usize::from(!r.retained);
            }
        }
    }
    s
}

// ---------------------------------------------------------------- train / finetune

pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const FINETUNED_FILE: &str = "finetuned.json";

/// Preprocessing attached to a checkpoint so evaluation sees identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub normalizer: NormalizerParams,
    pub label_scale: f64,
    pub rul_cap: Option<f64>,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.meta.json"))
}

fn history_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.history.jsonl"))
}

pub fn capped_label(rul: f64, cap: Option<f64>) -> f64 {
    cap.map_or(rul, |c| rul.min(c))
}

/// Model inputs (sensor rows only) and scaled labels for `windows`.
pub fn to_dataset(windows: &[&Window], label_scale: f64, cap: Option<f64>) -> Dataset {
    Dataset {
        inputs: windows.iter().map(|w| Mat::from_rows(&w.sensor_rows())).collect(),
        labels: windows.iter().map(|w| capped_label(w.label, cap) / label_scale).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub model: PredictorModel,
    pub meta: ModelMeta,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub samples: usize,
}

fn check_channels(model_cfg: &PredictorConfig, windows: &[Window]) -> Result<()> {
    if let Some(w) = windows.first() {
        if w.sensors() != model_cfg.input_channels {
            return Err(Error::Shape(format!(
                "data has {} sensor channels, predictor expects {}",
                w.sensors(),
                model_cfg.input_channels
            )));
        }
    }
    Ok(())
}

/// Trains from scratch on in-memory source series.
pub fn pretrain_on(series: &[SensorSeries], cfg: &PipelineConfig) -> Result<TrainRun> {
    let (_, windows, normalizer) = prepare_windows(series, cfg, None)?;
    check_channels(&cfg.predictor, &windows)?;
    let refs: Vec<&Window> = windows.iter().collect();
    let data = to_dataset(&refs, cfg.label_scale, cfg.rul_cap);
    let model = PredictorModel::new(cfg.predictor.clone(), stage_seed(cfg.seed, "init"))?;
    let tc = TrainConfig {
        seed: stage_seed(cfg.seed, "pretrain"),
        ..cfg.pretrain.clone()
    };
    let out = train(&model, &data, &tc)?;
    Ok(TrainRun {
        model: out.model,
        meta: ModelMeta {
            normalizer,
            label_scale: cfg.label_scale,
            rul_cap: cfg.rul_cap,
        },
        history: out.history,
        best_epoch: out.best_epoch,
        samples: data.len(),
    })
}

fn save_run(path: &Path, run: &TrainRun, seed: u64) -> Result<()> {
    save_checkpoint(path, &run.model, seed)?;
    write_json(&meta_path(path), &run.meta)?;
    // wall time is the only nondeterministic field; it goes in its own file
    #[derive(Serialize)]
    struct Loss {
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
    }
    let losses: Vec<Loss> = run
        .history
        .iter()
        .map(|r| Loss {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
        })
        .collect();
    write_jsonl(&history_path(path), &losses)?;
    let timing_path = path.with_file_name(format!(
        "{}.timing.jsonl",
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    write_jsonl(&timing_path, &run.history)
}

/// Loads a checkpoint with its preprocessing metadata.
pub fn load_model(path: &Path) -> Result<(PredictorModel, ModelMeta)> {
    let (model, _) = load_checkpoint(path)?;
    let meta: ModelMeta = read_json(&meta_path(path))?;
    Ok((model, meta))
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainRun> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let source = load_series(&cfg.resolve(&cfg.data.source), &cfg.schema)?;
    let run = pretrain_on(&source, cfg)?;
    save_run(&cfg.artifact(PRETRAINED_FILE), &run, stage_seed(cfg.seed, "pretrain"))?;
    Ok(run)
}

/// Fine-tunes `pretrained` on the retained windows of `target`.
///
/// `retained` is indexed by window id; `None` keeps every window.
pub fn finetune_on(
    pretrained: &PredictorModel,
    target: &[SensorSeries],
    retained: Option<&[bool]>,
    cfg: &PipelineConfig,
) -> Result<TrainRun> {
    if pretrained.config != cfg.predictor {
        return Err(Error::Shape(format!(
            "checkpoint architecture {:?} differs from configured predictor {:?}",
            pretrained.config, cfg.predictor
        )));
    }
    let (_, windows, normalizer) = prepare_windows(target, cfg, None)?;
    check_channels(&cfg.predictor, &windows)?;
    let chosen: Vec<&Window> = match retained {
        Some(flags) => {
            if flags.len() != windows.len() {
                return Err(Error::Shape(format!(
                    "prune index covers {} windows, target data has {}",
                    flags.len(),
                    windows.len()
                )));
            }
            windows.iter().zip(flags).filter(|(_, &k)| k).map(|(w, _)| w).collect()
        }
        None => windows.iter().collect(),
    };
    if chosen.is_empty() {
        return Err(Error::arg("no retained windows to fine-tune on"));
    }
    let data = to_dataset(&chosen, cfg.label_scale, cfg.rul_cap);
    let tc = TrainConfig {
        seed: stage_seed(cfg.seed, "finetune"),
        ..cfg.finetune.clone()
    };
    let out = finetune(pretrained, &data, &tc)?;
    Ok(TrainRun {
        model: out.model,
        meta: ModelMeta {
            normalizer,
            label_scale: cfg.label_scale,
            rul_cap: cfg.rul_cap,
        },
        history: out.history,
        best_epoch: out.best_epoch,
        samples: data.len(),
    })
}

/// Fine-tunes the pretrained checkpoint on the windows the prune index keeps
/// (every window when the index is absent and the arm is `full`).
pub fn cmd_finetune(cfg: &PipelineConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let (pretrained, _) = load_model(&cfg.artifact(PRETRAINED_FILE))?;
    let target = load_series(&cfg.resolve(&cfg.data.target), &cfg.schema)?;
    let index_path = cfg.artifact(INDEX_FILE);
    let flags: Option<Vec<bool>> = if cfg.arm == Arm::Full && !index_path.exists() {
        None
    } else {
        let index: Vec<PruneIndexRecord> = read_jsonl(&index_path)?;
        Some(index.iter().map(|r| r.retained).collect())
    };
    let run = finetune_on(&pretrained, &target, flags.as_deref(), cfg)?;
    save_run(&cfg.artifact(FINETUNED_FILE), &run, stage_seed(cfg.seed, "finetune"))?;
    Ok(run)
}

// ---------------------------------------------------------------- eval

pub const EVAL_FILE: &str = "eval_report.json";
pub const TRACES_FILE: &str = "eval_traces.jsonl";
pub const SCATTER_FILE: &str = "scatter.jsonl";

/// Predicted vs true RUL along one unit's trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTrace {
    pub unit: String,
    pub rul: Vec<f64>,
    pub pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub traces: Vec<UnitTrace>,
}

/// Scores a model on held-out series, in RUL units.
pub fn evaluate_on(model: &PredictorModel, meta: &ModelMeta, test: &[SensorSeries], cfg: &PipelineConfig) -> Result<EvalOutcome> {
    let eval_cfg = PipelineConfig {
        stride: cfg.eval_stride,
        ..cfg.clone()
    };
    let (_, windows, _) = prepare_windows(test, &eval_cfg, Some(&meta.normalizer))?;
    check_channels(&model.config, &windows)?;
    if windows.is_empty() {
        return Err(Error::arg("test data yields no windows"));
    }
    let mut traces: BTreeMap<String, UnitTrace> = BTreeMap::new();
    let mut order = Vec::new();
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for w in &windows {
        let y = capped_label(w.label, meta.rul_cap);
        let p = model.predict(&Mat::from_rows(&w.sensor_rows()))? * meta.label_scale;
        preds.push(p);
        labels.push(y);
        let t = traces.entry(w.unit_id.clone()).or_insert_with(|| {
            order.push(w.unit_id.clone());
            UnitTrace {
                unit: w.unit_id.clone(),
                rul: Vec::new(),
                pred: Vec::new(),
            }
        });
        t.rul.push(y);
        t.pred.push(p);
    }
    let report = EvalReport {
        rmse: rmse(&preds, &labels)?,
        nasa_score: nasa_score(&preds, &labels)?,
        n: preds.len(),
        retention_fraction: 1.0,
        separability_accuracy: None,
    };
    let traces = order.into_iter().map(|u| traces.remove(&u).expect("inserted")).collect();
    Ok(EvalOutcome { report, traces })
}

/// Evaluates the fine-tuned checkpoint (the pretrained one when no
/// fine-tuned model exists) on the test data. When a prune index is present
/// the report also carries its retention and the separability diagnostic.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    let ft = cfg.artifact(FINETUNED_FILE);
    let ck = if ft.exists() { ft } else { cfg.artifact(PRETRAINED_FILE) };
    let (model, meta) = load_model(&ck)?;
    let test = load_series(&cfg.resolve(&cfg.data.test), &cfg.schema)?;
    let mut out = evaluate_on(&model, &meta, &test, cfg)?;

    let index_path = cfg.artifact(INDEX_FILE);
    if index_path.exists() {
        let index: Vec<PruneIndexRecord> = read_jsonl(&index_path)?;
        let fates: Vec<WindowFate> = index.iter().map(PruneIndexRecord::fate).collect();
        out.report.retention_fraction = retention_stats(&fates).fraction;
        let target = load_series(&cfg.resolve(&cfg.data.target), &cfg.schema)?;
        let (_, windows, _) = prepare_windows(&target, cfg, None)?;
        if windows.len() == index.len() {
            let (mut kept, mut dropped) = (Vec::new(), Vec::new());
            for (w, r) in windows.iter().zip(&index) {
                let f = window_features(w, &cfg.screen).f.to_vec();
                if r.retained {
                    kept.push(f);
                } else {
                    dropped.push(f);
                }
            }
            if let Some(sep) = separability(&kept, &dropped, stage_seed(cfg.seed, "separability"))? {
                out.report.separability_accuracy = Some(sep.accuracy);
                write_jsonl::<ScatterPoint>(&cfg.artifact(SCATTER_FILE), &sep.scatter)?;
            }
        }
    }
    write_json(&cfg.artifact(EVAL_FILE), &out.report)?;
    write_jsonl(&cfg.artifact(TRACES_FILE), &out.traces)?;
    Ok(out)
}

// ---------------------------------------------------------------- report

/// Collected summary of whatever artifacts exist in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: Arm,
    pub prune: Option<PruneReport>,
    pub pretrain_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
    pub eval: Option<EvalReport>,
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<RunSummary> {
    let opt_json = |name: &str| -> Result<Option<serde_json::Value>> {
        let p = cfg.artifact(name);
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    };
    let epochs = |ck: &str| -> Result<Option<usize>> {
        let p = history_path(&cfg.artifact(ck));
        if p.exists() {
            Ok(Some(read_jsonl::<serde_json::Value>(&p)?.len()))
        } else {
            Ok(None)
        }
    };
    let prune = opt_json(PRUNE_REPORT_FILE)?
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::json("parsing prune report", e))?;
    let eval = opt_json(EVAL_FILE)?
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::json("parsing eval report", e))?;
    let summary = RunSummary {
        arm: cfg.arm,
        prune,
        pretrain_epochs: epochs(PRETRAINED_FILE)?,
        finetune_epochs: epochs(FINETUNED_FILE)?,
        eval,
    };
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.artifact("summary.json"), &summary)?;
    Ok(summary)
}

/// Per-epoch mean wall time of a history.
pub fn mean_epoch_seconds(history: &[EpochRecord]) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    history.iter().map(|r| r.seconds).sum::<f64>() / history.len() as f64
}

/// Wall-clock helper for callers that time whole commands.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}
