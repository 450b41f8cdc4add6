//! Subcommand implementations behind the `hpvd` binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hpvd_core::io::{self, StudyDetections};
use hpvd_core::metrics::{auc_lroc, bonferroni, compare_auc_paired, froc, lroc, AucEstimate, StudyEval};
use hpvd_core::phantom::{generate_dataset, write_dataset, PhantomConfig, SplitRequest};
use hpvd_core::postprocess::{pipeline, PostprocessConfig};
use hpvd_core::{LesionKind, PhaseSet, Study};
use hpvd_net::train::{log_csv, train};
use hpvd_net::{infer_study, Checkpoint, InferConfig, NetError, TrainConfig};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hpvd", version, about = "Hetero-phase liver lesion detection pipeline")]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration; missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into --out.
    Phantom {
        /// NAME=TARGETS:CONTROLS, repeatable.
        #[arg(long = "split", default_values = ["train=32:32", "test=16:16"])]
        splits: Vec<SplitArg>,
    },
    /// Train a detector on one split.
    Train {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Run detection and post-processing on one split.
    Infer {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Phase subset, e.g. "NC", "NC,VP", "all".
        #[arg(long, default_value = "all")]
        phases: PhaseSet,
    },
    /// FROC and LROC reports for a detections file.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Both)]
        mode: EvalMode,
    },
    /// Paired LROC AUC comparison of two detections files.
    Compare {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Number of tests for the Bonferroni correction.
        #[arg(long, default_value_t = 1)]
        m: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Froc,
    Lroc,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitArg(pub SplitRequest);

impl FromStr for SplitArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let err = || format!("expected NAME=TARGETS:CONTROLS, got {s:?}");
        let (name, counts) = s.split_once('=').ok_or_else(err)?;
        let (t, c) = counts.split_once(':').ok_or_else(err)?;
        if name.is_empty() {
            return Err(err());
        }
        let t = t.parse().map_err(|_| err())?;
        let c = c.parse().map_err(|_| err())?;
        Ok(SplitArg(SplitRequest::new(name, t, c)))
    }
}

/// Invalid invocation or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoBB threshold for a detection to hit a lesion.
    pub tau_iobb: f64,
    /// FROC curve is reported up to this many false positives per study.
    pub max_fps: f64,
    /// FROC operating points summarized in the report.
    pub operating_points: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tau_iobb: 0.3, max_fps: 8.0, operating_points: vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<NetError>() {
            return match e {
                NetError::Divergence { .. } | NetError::NonFiniteLoss(_) => EXIT_DIVERGENCE,
                NetError::Config(_) => EXIT_USAGE,
                NetError::Core(c) => core_exit_code(c),
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<hpvd_core::Error>() {
            return core_exit_code(e);
        }
    }
    EXIT_DATA
}

fn core_exit_code(e: &hpvd_core::Error) -> i32 {
    match e {
        hpvd_core::Error::InvalidConfig(_) | hpvd_core::Error::InvalidPhaseSelector(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Phantom { splits } => cmd_phantom(&cfg, splits, cli.seed, &cli.out),
        Command::Train { index, split } => cmd_train(&cfg, index, split, cli.seed, &cli.out),
        Command::Infer { index, split, checkpoint, phases } => {
            cmd_infer(&cfg, index, split, checkpoint, *phases, &cli.out).map(|_| ())
        }
        Command::Eval { index, split, detections, mode } => cmd_eval(&cfg, index, split, detections, *mode, &cli.out),
        Command::Compare { index, split, a, b, m } => cmd_compare(&cfg, index, split, a, b, *m, &cli.out),
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

pub fn cmd_phantom(cfg: &RunConfig, splits: &[SplitArg], seed: u64, out: &Path) -> Result<()> {
    cfg.phantom.validate().map_err(|e| usage(e.to_string()))?;
    let requests: Vec<SplitRequest> = splits.iter().map(|s| s.0.clone()).collect();
    let mut names = std::collections::BTreeSet::new();
    if let Some(dup) = requests.iter().find(|r| !names.insert(r.name.as_str())) {
        return Err(usage(format!("split {} given twice", dup.name)));
    }
    let ds = generate_dataset(&cfg.phantom, &requests, seed)?;
    create_out(out)?;
    write_dataset(out, &ds)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, index: &Path, split: &str, seed: u64, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    let studies = io::load_split(index, split)?;
    let trained = train(&studies, &cfg.train, seed)?;
    create_out(out)?;
    let ckpt = Checkpoint { params: trained.params, phase_stats: trained.stats, train_config: Some(cfg.train.clone()) };
    ckpt.save(&out.join("checkpoint.json"))?;
    io::write_text(&out.join("train_log.csv"), &log_csv(&trained.log))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyError {
    pub study_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferOutput {
    pub raw: Vec<StudyDetections>,
    pub detections: Vec<StudyDetections>,
    pub errors: Vec<StudyError>,
}

fn net_code(e: &NetError) -> &'static str {
    match e {
        NetError::Core(c) => c.code(),
        NetError::Shape(_) => "shape",
        NetError::EmptyPhases => "empty_phases",
        NetError::UninitializedStats(_) => "uninitialized_stats",
        NetError::Divergence { .. } => "divergence",
        NetError::NonFiniteLoss(_) => "non_finite_loss",
        NetError::Config(_) => "config",
        NetError::Checkpoint(_) => "checkpoint",
    }
}

/// Raw and post-processed detections of one study; the post-processing sees
/// only the selected phases.
pub fn detect_study(
    study: &Study,
    ckpt: &Checkpoint,
    phases: PhaseSet,
    cfg: &RunConfig,
) -> std::result::Result<(Vec<hpvd_core::Detection>, Vec<hpvd_core::Detection>), NetError> {
    let selected = study.select_phases(phases)?;
    let raw = infer_study(&selected, &ckpt.params, &ckpt.phase_stats, phases, &cfg.infer)?;
    let out = pipeline(&raw, &selected, &cfg.postprocess)?;
    Ok((raw, out.hcc))
}

pub fn cmd_infer(cfg: &RunConfig, index: &Path, split: &str, checkpoint: &Path, phases: PhaseSet, out: &Path) -> Result<InferOutput> {
    cfg.postprocess.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let idx = io::read_index(index)?;
    let root = index.parent().unwrap_or(Path::new("."));
    let mut result = InferOutput::default();
    for entry in idx.split(split) {
        let outcome = io::load_study(&root.join(&entry.dir))
            .map_err(NetError::from)
            .and_then(|s| detect_study(&s, &ckpt, phases, cfg));
        match outcome {
            Ok((raw, fin)) => {
                result.raw.push(StudyDetections { study_id: entry.id.clone(), detections: raw });
                result.detections.push(StudyDetections { study_id: entry.id.clone(), detections: fin });
            }
            Err(e) => result.errors.push(StudyError {
                study_id: entry.id.clone(),
                code: net_code(&e).into(),
                message: e.to_string(),
            }),
        }
    }
    create_out(out)?;
    io::write_detections(&out.join("detections_raw.json"), &result.raw)?;
    io::write_detections(&out.join("detections.json"), &result.detections)?;
    io::write_json(&out.join("errors.json"), &result.errors)?;
    Ok(result)
}

/// Pairs the ground truth of every study in `split` with its detections.
/// Studies absent from `dets` are evaluated with no detections.
pub fn build_evals(index: &Path, split: &str, dets: Vec<StudyDetections>) -> Result<Vec<StudyEval>> {
    let idx = io::read_index(index)?;
    let root = index.parent().unwrap_or(Path::new("."));
    let mut by_id: std::collections::BTreeMap<String, Vec<hpvd_core::Detection>> =
        dets.into_iter().map(|d| (d.study_id, d.detections)).collect();
    let mut evals = Vec::new();
    for entry in idx.split(split) {
        let m = io::read_manifest(&root.join(&entry.dir))?;
        let boxes = |k: LesionKind| m.lesions.iter().filter(|l| l.kind == k).map(|l| l.bbox).collect();
        evals.push(StudyEval {
            study_id: entry.id.clone(),
            gt_hcc: boxes(LesionKind::Hcc),
            gt_tace: boxes(LesionKind::Tace),
            detections: by_id.remove(&entry.id).unwrap_or_default(),
        });
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(hpvd_core::Error::MismatchedStudies(format!("study {extra} is not in split {split}")).into());
    }
    Ok(evals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fps_per_study: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau_iobb: f64,
    pub n_studies: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lroc: Option<AucEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lroc_area: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub froc: Option<Vec<OperatingPoint>>,
}

pub fn evaluate(evals: &[StudyEval], cfg: &EvalConfig, mode: EvalMode) -> Result<(EvalReport, Option<String>, Option<String>)> {
    let mut report = EvalReport { tau_iobb: cfg.tau_iobb, n_studies: evals.len(), lroc: None, lroc_area: None, froc: None };
    let (mut froc_csv, mut lroc_csv) = (None, None);
    if mode != EvalMode::Lroc {
        let curve = froc(evals, cfg.tau_iobb)?;
        report.froc = Some(
            cfg.operating_points
                .iter()
                .map(|&f| OperatingPoint { fps_per_study: f, sensitivity: hpvd_core::metrics::sensitivity_at(&curve, f) })
                .collect(),
        );
        froc_csv = Some(curve.to_csv(cfg.max_fps));
    }
    if mode != EvalMode::Froc {
        let curve = lroc(evals, cfg.tau_iobb)?;
        report.lroc = Some(auc_lroc(evals, cfg.tau_iobb)?);
        report.lroc_area = Some(curve.area());
        lroc_csv = Some(curve.to_csv());
    }
    Ok((report, froc_csv, lroc_csv))
}

pub fn cmd_eval(cfg: &RunConfig, index: &Path, split: &str, detections: &Path, mode: EvalMode, out: &Path) -> Result<()> {
    let evals = build_evals(index, split, io::read_detections(detections)?)?;
    let (report, froc_csv, lroc_csv) = evaluate(&evals, &cfg.eval, mode)?;
    create_out(out)?;
    if let Some(csv) = froc_csv {
        io::write_text(&out.join("froc.csv"), &csv)?;
    }
    if let Some(csv) = lroc_csv {
        io::write_text(&out.join("lroc.csv"), &csv)?;
    }
    io::write_json(&out.join("auc.json"), &report)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub auc_a: f64,
    pub auc_b: f64,
    pub delta: f64,
    pub z: f64,
    pub p: f64,
    pub m: usize,
    pub p_bonferroni: f64,
}

pub fn compare(a: &[StudyEval], b: &[StudyEval], tau_iobb: f64, m: usize) -> Result<ComparisonReport> {
    if m == 0 {
        return Err(usage("m must be at least 1"));
    }
    let c = compare_auc_paired(a, b, tau_iobb)?;
    Ok(ComparisonReport {
        auc_a: auc_lroc(a, tau_iobb)?.auc,
        auc_b: auc_lroc(b, tau_iobb)?.auc,
        delta: c.delta,
        z: c.z,
        p: c.p,
        m,
        p_bonferroni: bonferroni(&[c.p], m)?[0],
    })
}

pub fn cmd_compare(cfg: &RunConfig, index: &Path, split: &str, a: &Path, b: &Path, m: usize, out: &Path) -> Result<()> {
    let (da, db) = (io::read_detections(a)?, io::read_detections(b)?);
    let ids = |d: &[StudyDetections]| d.iter().map(|s| s.study_id.clone()).collect::<std::collections::BTreeSet<_>>();
    if ids(&da) != ids(&db) {
        return Err(hpvd_core::Error::MismatchedStudies("detection files cover different studies".into()).into());
    }
    let ea = build_evals(index, split, da)?;
    let eb = build_evals(index, split, db)?;
    let report = compare(&ea, &eb, cfg.eval.tau_iobb, m)?;
    create_out(out)?;
    io::write_json(&out.join("comparison.json"), &report)?;
    Ok(())
}
