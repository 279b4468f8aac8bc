//! Command implementations behind the `deft` binary. Each command is a plain
//! function over core types so integration tests can drive the tool without
//! spawning processes; `main.rs` only parses flags, prints, and maps errors
//! to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use deft_core::data::{load_folder, prepare_eval, save_dataset, synth_generate, Sample, SynthSpec};
use deft_core::gradcheck::{block_suite, model_suite, op_suite};
use deft_core::metrics::{curves_to_csv, evaluate};
use deft_core::model::flops_estimate;
use deft_core::train::{records_to_csv, train, TrainConfig, TrainRecord};
use deft_core::{
    load_checkpoint, save_checkpoint, DefTModel, Error, GradCheckReport, MetricsReport,
    ModelConfig, Result, Toggles,
};

/// Bump when the run-config layout changes incompatibly.
pub const CONFIG_VERSION: u32 = 1;

/// Threshold count for the precision/recall sweep written by `eval`.
pub const EVAL_CURVE_POINTS: usize = 11;

// ───────────────────────── run configuration ─────────────────────────

/// Dataset source: a generator spec, a directory holding `images/` and
/// `masks/`, or neither (which means default synthetic data). Field order
/// matters for TOML: plain values must precede the nested table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    /// Directory with `images/` and `masks/` subdirectories, as written by
    /// the `synth` command.
    pub folder: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
}

pub enum DataSource {
    Synth(SynthSpec),
    Folder(PathBuf),
}

impl DataConfig {
    /// `folder` wins when present; otherwise the explicit or default
    /// generator spec. `validate` rejects configs that set both.
    pub fn source(&self) -> DataSource {
        if let Some(dir) = &self.folder {
            DataSource::Folder(dir.clone())
        } else {
            DataSource::Synth(self.synth.clone().unwrap_or_default())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folder.is_some() && self.synth.is_some() {
            return Err(Error::config(
                "data.folder and data.synth are mutually exclusive; pick one source",
            ));
        }
        if let Some(spec) = &self.synth {
            spec.validate()?;
        }
        Ok(())
    }
}

/// One file that fully determines a run. Every field has a default matching
/// the published architecture and schedule, so an empty file is a valid
/// config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            output_dir: PathBuf::from("deft-out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::format(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (this build reads version {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}

/// Reads the config (or starts from defaults) and applies flag overrides.
/// `--seed` retargets both weight-init/shuffling and dataset generation so
/// one number pins the whole run.
pub fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    output_dir: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        if cfg.data.folder.is_none() {
            let mut spec = cfg.data.synth.take().unwrap_or_default();
            spec.seed = s;
            cfg.data.synth = Some(spec);
        }
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Maps the error taxonomy onto stable process exit codes: 2 for anything
/// wrong with the request (config values, usage, impossible shapes), 3 for
/// the filesystem and malformed artifacts, 4 for numeric failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Shape(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numeric(_) | Error::Degenerate(_) => 4,
    }
}

/// Materializes the configured dataset in memory.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample<f32>>> {
    match cfg.data.source() {
        DataSource::Synth(spec) => synth_generate(&spec),
        DataSource::Folder(dir) => {
            let (samples, report) = load_folder(&dir.join("images"), &dir.join("masks"))?;
            if samples.is_empty() {
                return Err(Error::usage(format!(
                    "no usable image/mask pairs under {} ({} entries skipped)",
                    dir.display(),
                    report.skipped()
                )));
            }
            Ok(samples)
        }
    }
}

// ───────────────────────── commands ─────────────────────────

/// Generates the configured synthetic dataset and writes it to
/// `output_dir/images` and `output_dir/masks`. Returns the pair count.
pub fn cmd_synth(cfg: &RunConfig) -> Result<usize> {
    let spec = match cfg.data.source() {
        DataSource::Synth(spec) => spec,
        DataSource::Folder(_) => {
            return Err(Error::usage(
                "synth generates data; the config points at an existing folder",
            ))
        }
    };
    let samples = synth_generate::<f32>(&spec)?;
    save_dataset(&samples, &cfg.output_dir)?;
    Ok(samples.len())
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub records: Vec<TrainRecord>,
}

/// Full training run: loads or generates data, trains from a seeded
/// initialization, and writes `checkpoint.deft`, `loss.csv`, and the
/// resolved `config.toml` under `output_dir`. With `epochs = 0` the
/// checkpoint holds the untouched initial weights.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let samples = load_samples(cfg)?;
    let mut model = DefTModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let records = train(&mut model, &samples, &cfg.train)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let loss_csv = cfg.output_dir.join("loss.csv");
    fs::write(&loss_csv, records_to_csv(&records))?;
    let checkpoint = cfg.output_dir.join("checkpoint.deft");
    save_checkpoint(&checkpoint, &model)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    Ok(TrainArtifacts {
        checkpoint,
        loss_csv,
        records,
    })
}

/// Scores a checkpoint against `data_dir/images` + `data_dir/masks` at the
/// checkpoint's native input size. Writes `metrics.json`, `curves.csv`, and
/// the ingest report under `output_dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    threshold: f64,
    output_dir: &Path,
) -> Result<MetricsReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::usage(format!(
            "threshold must lie in [0,1], got {threshold}"
        )));
    }
    let model = load_checkpoint::<f32>(checkpoint)?;
    let (raw, report) = load_folder(&data_dir.join("images"), &data_dir.join("masks"))?;
    if raw.is_empty() {
        return Err(Error::usage(format!(
            "no usable image/mask pairs under {} ({} entries skipped)",
            data_dir.display(),
            report.skipped()
        )));
    }
    let size = model.config.input_size;
    let prepared: Vec<Sample<f32>> = raw
        .iter()
        .map(|s| prepare_eval(s, size))
        .collect::<Result<_>>()?;
    let metrics = evaluate(&model, &prepared, threshold, EVAL_CURVE_POINTS)?;
    fs::create_dir_all(output_dir)?;
    fs::write(output_dir.join("metrics.json"), metrics.to_json())?;
    if let Some(curves) = &metrics.curves {
        fs::write(output_dir.join("curves.csv"), curves_to_csv(curves))?;
    }
    fs::write(output_dir.join("ingest.jsonl"), report.to_jsonl())?;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Every autodiff op in isolation, exhaustive probes, f64.
    Op,
    /// One full transformer block end to end, exhaustive probes.
    Block,
    /// The whole reduced model through its deep-supervised outputs, sampled
    /// probes.
    Model,
}

impl std::str::FromStr for GradScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(GradScope::Op),
            "block" => Ok(GradScope::Block),
            "model" => Ok(GradScope::Model),
            other => Err(Error::usage(format!(
                "unknown gradcheck scope '{other}' (expected op, block, or model)"
            ))),
        }
    }
}

/// Runs the finite-difference suite for one scope. `corrupt` deliberately
/// perturbs an analytic gradient first, proving the harness can fail.
pub fn cmd_gradcheck(scope: GradScope, corrupt: bool) -> Result<Vec<GradCheckReport>> {
    match scope {
        GradScope::Op => op_suite(corrupt),
        GradScope::Block => block_suite(corrupt),
        GradScope::Model => model_suite(corrupt),
    }
}

pub fn render_gradcheck(reports: &[GradCheckReport]) -> String {
    let mut out = String::new();
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4);
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  max_rel_err {:>10.3e}  checked {:>6}  tol {:>7.0e}  {}",
            r.name,
            r.max_rel_err,
            r.checked,
            r.tolerance,
            if r.pass() { "PASS" } else { "FAIL" },
        );
    }
    let failed = reports.iter().filter(|r| !r.pass()).count();
    let _ = writeln!(
        out,
        "{} checks, {} failed: {}",
        reports.len(),
        failed,
        if failed == 0 { "PASS" } else { "FAIL" }
    );
    out
}

pub struct ParamsSummary {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
    pub flops_input: usize,
    pub flops: u64,
}

/// Counts parameters per top-level module and estimates forward FLOPs
/// (multiply-accumulates × 2, dominant terms only) at the given input size.
/// Writes `params.csv` under `output_dir`.
pub fn cmd_params(
    model_cfg: &ModelConfig,
    input_size: usize,
    output_dir: &Path,
) -> Result<ParamsSummary> {
    model_cfg.validate()?;
    if input_size == 0 || input_size % 32 != 0 {
        return Err(Error::usage(format!(
            "input_size must be a positive multiple of 32, got {input_size}"
        )));
    }
    let model = DefTModel::<f32>::new(model_cfg.clone(), 0)?;
    let total = model.param_count();
    let breakdown = model.param_breakdown();
    let flops = flops_estimate(model_cfg, input_size);
    let mut csv = String::from("module,parameters\n");
    for (name, n) in &breakdown {
        let _ = writeln!(csv, "{name},{n}");
    }
    let _ = writeln!(csv, "total,{total}");
    fs::create_dir_all(output_dir)?;
    fs::write(output_dir.join("params.csv"), csv)?;
    Ok(ParamsSummary {
        total,
        breakdown,
        flops_input: input_size,
        flops,
    })
}

pub fn render_params(s: &ParamsSummary) -> String {
    let mut out = String::new();
    for (name, n) in &s.breakdown {
        let _ = writeln!(out, "{name:<8} {n:>12}");
    }
    let _ = writeln!(out, "{:<8} {:>12}", "total", s.total);
    let _ = writeln!(
        out,
        "forward FLOPs at {0}x{0}: {1:.2}G",
        s.flops_input,
        s.flops as f64 / 1e9
    );
    out
}

/// The five architectural components, in the order the ablation table adds
/// them on top of the plain pyramid-transformer baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Csb,
    Pab,
    Lpb,
    Lmps,
    Cffn,
}

pub const ABLATION_FEATURES: [Feature; 5] = [
    Feature::Csb,
    Feature::Pab,
    Feature::Lpb,
    Feature::Lmps,
    Feature::Cffn,
];

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Feature::Csb => "csb",
            Feature::Pab => "pab",
            Feature::Lpb => "lpb",
            Feature::Lmps => "lmps",
            Feature::Cffn => "cffn",
        }
    }

    fn enable(self, t: &mut Toggles) {
        match self {
            Feature::Csb => t.use_csb = true,
            Feature::Pab => t.use_pab = true,
            Feature::Lpb => t.use_lpb = true,
            Feature::Lmps => t.use_lmps = true,
            Feature::Cffn => t.use_cffn = true,
        }
    }
}

/// Parses a comma-separated toggle list into canonical order, deduplicated.
/// An empty string means "baseline only".
pub fn parse_toggles(s: &str) -> Result<Vec<Feature>> {
    let mut requested = [false; 5];
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let lower = tok.to_ascii_lowercase();
        let idx = ABLATION_FEATURES
            .iter()
            .position(|f| f.name() == lower)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown toggle '{tok}' (expected any of csb, pab, lpb, lmps, cffn)"
                ))
            })?;
        requested[idx] = true;
    }
    Ok(ABLATION_FEATURES
        .iter()
        .copied()
        .zip(requested)
        .filter_map(|(f, on)| on.then_some(f))
        .collect())
}

pub struct AblateRow {
    pub label: String,
    pub toggles: Toggles,
    pub metrics: MetricsReport,
}

pub fn ablation_to_csv(rows: &[AblateRow]) -> String {
    let mut out = String::from("configuration,fpr,fnr,acc,f1,mae\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label, m.fpr, m.fnr, m.acc, m.f1, m.mae
        );
    }
    out
}

/// Trains and scores one model per cumulative configuration: the all-off
/// baseline first, then one row per requested feature added in canonical
/// order. Every row shares the dataset, schedule, and seed, so rows differ
/// only in architecture. Writes `ablation.csv` plus one checkpoint per row
/// under `output_dir/ablate`.
pub fn cmd_ablate(cfg: &RunConfig, features: &[Feature], threshold: f64) -> Result<Vec<AblateRow>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::usage(format!(
            "threshold must lie in [0,1], got {threshold}"
        )));
    }
    let samples = load_samples(cfg)?;
    let prepared: Vec<Sample<f32>> = samples
        .iter()
        .map(|s| prepare_eval(s, cfg.model.input_size))
        .collect::<Result<_>>()?;

    let all_off = Toggles {
        use_csb: false,
        use_pab: false,
        use_lpb: false,
        use_lmps: false,
        use_cffn: false,
    };
    let mut variants = vec![("baseline".to_string(), all_off)];
    let mut cumulative = all_off;
    for f in features {
        f.enable(&mut cumulative);
        variants.push((format!("+{}", f.name()), cumulative));
    }

    let ckpt_dir = cfg.output_dir.join("ablate");
    fs::create_dir_all(&ckpt_dir)?;
    let mut rows = Vec::new();
    for (label, toggles) in variants {
        let mut model_cfg = cfg.model.clone();
        model_cfg.toggles = toggles;
        let mut model = DefTModel::<f32>::new(model_cfg, cfg.train.seed)?;
        train(&mut model, &samples, &cfg.train)?;
        let metrics = evaluate(&model, &prepared, threshold, 0)?;
        save_checkpoint(
            &ckpt_dir.join(format!("{}.deft", label.trim_start_matches('+'))),
            &model,
        )?;
        rows.push(AblateRow {
            label,
            toggles,
            metrics,
        });
    }
    fs::write(cfg.output_dir.join("ablation.csv"), ablation_to_csv(&rows))?;
    Ok(rows)
}
