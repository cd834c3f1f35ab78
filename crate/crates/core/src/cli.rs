//! Command-line front end.
//!
//! Exit codes: 0 success, 1 gradient check failure, 2 input error,
//! 3 evaluation protocol error, 4 numerical failure. Failures print one line
//! of the form `error[<category>]: <message>` on stderr.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::autodiff::{gradcheck_all, gradcheck_with_fault, GradReport};
use crate::metrics::{
    self, AssignmentPolicy, DcfConfig, MetricsError, ReportConfig, Sweep, TrialRecord,
};
use crate::model::{self, ModelError, SavedModel};
use crate::objectives::ObjectiveError;
use crate::synthdata::{self, SynthError};
use crate::trainer::{self, TrainConfig, TrainError};

/// Entries with `A(1 − A)` below this count as near-binary in gate summaries.
pub const NEAR_BINARY: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "fairgate", version, about = "Gated speaker embeddings and verification fairness metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a trial score file: EER, minDCF and subgroup fairness.
    Eval(EvalArgs),
    /// Export the full threshold sweep of a score file as CSV.
    Sweep(SweepArgs),
    /// Train the toy model on a synthetic corpus.
    TrainToy(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the gate mask of a checkpoint for one utterance.
    GateDemo(GateDemoArgs),
    /// Write a synthetic corpus (features, manifest, trials) to disk.
    ExportCorpus(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ScoreOptions {
    /// Trial score CSV.
    #[arg(long)]
    pub scores: PathBuf,
    /// Use the raw detection cost instead of the normalized one.
    #[arg(long)]
    pub unnormalized_dcf: bool,
    /// Prior of a mated trial in the detection cost.
    #[arg(long, default_value_t = 0.01)]
    pub p_target: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub score: ScoreOptions,
    /// Weight of the FMR Gini term in GARBE.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// FMR at which the shared operating threshold is calibrated.
    #[arg(long, default_value_t = 0.01)]
    pub fmr_target: f64,
    /// Subgroup assignment: both_sides, enroll_side or test_side.
    #[arg(long, default_value_t = AssignmentPolicy::BothSides)]
    pub policy: AssignmentPolicy,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub score: ScoreOptions,
    /// Output CSV with columns threshold,fmr,fnmr,dcf.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for checkpoints, the run log and the final report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Corrupts the backward rule of the named op.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct GateDemoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature file of one utterance (`[F, T]`).
    #[arg(long)]
    pub utterance: PathBuf,
    /// Also write the mask and summary as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Training configuration whose `corpus.*` keys describe the corpus.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Protocol(_) => "protocol",
            CliError::Numerical(_) => "numerical",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    /// The single stderr line for this failure.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.category())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Protocol(_) => CliError::Protocol(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Autodiff(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Objective(ObjectiveError::NonFiniteRisk) => CliError::Numerical(e.to_string()),
            TrainError::Objective(_) => CliError::Numerical(e.to_string()),
            TrainError::Metrics(m) => m.into(),
            TrainError::Model(m) => m.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn with_path(path: &Path, e: impl Into<CliError>) -> CliError {
    match e.into() {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        CliError::Protocol(m) => CliError::Protocol(format!("{}: {m}", path.display())),
        CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", path.display())),
    }
}

fn load_scores(path: &Path) -> Result<Vec<TrialRecord>, CliError> {
    metrics::read_scores(path).map_err(|e| with_path(path, e))
}

fn dcf_config(opts: &ScoreOptions) -> DcfConfig {
    DcfConfig {
        p_target: opts.p_target,
        normalized: !opts.unnormalized_dcf,
        ..DcfConfig::default()
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    TrainConfig::parse(&text).map_err(|e| with_path(path, e))
}

/// Runs one command. `Ok(false)` means the command ran but reported failure.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<bool, CliError> {
    match cli.command {
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::TrainToy(a) => cmd_train_toy(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::GateDemo(a) => cmd_gate_demo(&a, out),
        Command::ExportCorpus(a) => cmd_export_corpus(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Input(format!("writing output: {e}")))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    let trials = load_scores(&args.score.scores)?;
    let config = ReportConfig {
        alpha: args.alpha,
        fmr_target: args.fmr_target,
        dcf: dcf_config(&args.score),
        policy: args.policy,
    };
    let report = metrics::fairness_report(&trials, &config)?;
    if let Some(path) = &args.report {
        fs::write(path, report.to_json() + "\n").map_err(|e| io_error(path, e))?;
    }
    let mut line = report.summary_line();
    if args.score.unnormalized_dcf {
        line = format!(
            "EER {:.2}%  minDCF {:.4} (unnormalized)  GARBE {:.2}",
            report.eer_percent, report.min_dcf_unnormalized, report.garbe
        );
    }
    let mut text = format!("{line}\n");
    for row in &report.subgroups {
        let _ = writeln!(
            text,
            "  {}: FNMR {:.2}%  FMR {:.2}%  ({} mated, {} non-mated)",
            row.group, row.fnmr_percent, row.fmr_percent, row.mated, row.non_mated
        );
    }
    emit(out, &text)?;
    Ok(true)
}

/// Sweep rows as CSV text with a header.
pub fn sweep_csv(sweep: &Sweep, cost: &DcfConfig) -> String {
    let norm = if cost.normalized { cost.normalizer() } else { 1.0 };
    let mut s = String::from("threshold,fmr,fnmr,dcf\n");
    for p in &sweep.points {
        let dcf = (cost.c_fnmr * cost.p_target * p.fnmr
            + cost.c_fmr * (1.0 - cost.p_target) * p.fmr)
            / norm;
        let _ = writeln!(s, "{:e},{:e},{:e},{:e}", p.threshold, p.fmr, p.fnmr, dcf);
    }
    s
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    let trials = load_scores(&args.score.scores)?;
    let sweep = Sweep::new(&trials)?;
    let cost = dcf_config(&args.score);
    cost.validate()?;
    fs::write(&args.out, sweep_csv(&sweep, &cost)).map_err(|e| io_error(&args.out, e))?;
    emit(
        out,
        &format!("wrote {} sweep points to {}\n", sweep.points.len(), args.out.display()),
    )?;
    Ok(true)
}

pub fn cmd_train_toy(args: &TrainArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    fs::write(args.out.join("config.cfg"), config.render())
        .map_err(|e| io_error(&args.out, e))?;
    let outcome = trainer::train(&config, Some(&args.out))?;
    trainer::write_artifacts(&outcome, &args.out)?;
    let fin = &outcome.final_eval;
    emit(
        out,
        &format!(
            "step {}: {}\nartifacts in {}\n",
            fin.step,
            fin.report.summary_line(),
            args.out.display()
        ),
    )?;
    Ok(true)
}

/// Per-op table printed by `gradcheck`.
pub fn gradcheck_table(reports: &[GradReport]) -> String {
    let width = reports.iter().map(|r| r.op.len()).max().unwrap_or(2).max(2);
    let mut s = format!("{:<width$}  {:>12}  status\n", "op", "max_rel_err");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>12.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let _ = writeln!(s, "{} ops checked, {failed} failed", reports.len());
    s
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    if !(args.tol > 0.0 && args.tol.is_finite()) {
        return Err(CliError::Input(format!("--tol must be positive, got {}", args.tol)));
    }
    let reports = match &args.inject_fault {
        Some(op) => gradcheck_with_fault(args.seed, args.tol, op),
        None => gradcheck_all(args.seed, args.tol),
    };
    emit(out, &gradcheck_table(&reports))?;
    Ok(reports.iter().all(|r| r.passed))
}

/// Gate mask of one utterance with its summary statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GateSummary {
    /// `[C][T]` mask entries.
    pub mask: Vec<Vec<f64>>,
    pub mean: f64,
    pub near_binary_fraction: f64,
    pub channel_means: Vec<f64>,
}

pub fn gate_summary(saved: &SavedModel, features: &crate::autodiff::Tensor) -> Result<GateSummary, CliError> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(CliError::Input(format!("utterance must be [F, T], got {shape:?}")));
    }
    let x = features.clone().reshaped([1, shape[0], shape[1]]).map_err(ModelError::from)?;
    let a = model::gate_mask(&saved.params, &x)?;
    let t = a.shape()[2];
    let mask: Vec<Vec<f64>> = a.data().chunks(t).map(<[f64]>::to_vec).collect();
    let n = a.numel() as f64;
    let near = a.data().iter().filter(|&&v| v * (1.0 - v) < NEAR_BINARY).count() as f64;
    Ok(GateSummary {
        channel_means: mask.iter().map(|row| row.iter().sum::<f64>() / t as f64).collect(),
        mean: a.mean(),
        near_binary_fraction: near / n,
        mask,
    })
}

pub fn cmd_gate_demo(args: &GateDemoArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    let saved = SavedModel::load(&args.checkpoint).map_err(|e| with_path(&args.checkpoint, e))?;
    let features =
        synthdata::load_features(&args.utterance).map_err(|e| with_path(&args.utterance, e))?;
    let summary = gate_summary(&saved, &features)?;
    let mut s = String::new();
    for row in &summary.mask {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    let _ = writeln!(s, "mean {:.6}", summary.mean);
    let _ = writeln!(s, "near_binary_fraction {:.6}", summary.near_binary_fraction);
    let means: Vec<String> = summary.channel_means.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(s, "channel_means {}", means.join(" "));
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&summary).expect("gate summary is finite");
        fs::write(path, json + "\n").map_err(|e| io_error(path, e))?;
    }
    emit(out, &s)?;
    Ok(true)
}

pub fn cmd_export_corpus(args: &ExportArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    let config = load_config(args.config.as_deref())?;
    let corpus = synthdata::generate_corpus(&config.corpus)?;
    synthdata::export_corpus(&corpus, &args.out)?;
    emit(
        out,
        &format!(
            "wrote {} training and {} held-out utterances, {} trials to {}\n",
            corpus.train.len(),
            corpus.eval.len(),
            corpus.trials.len(),
            args.out.display()
        ),
    )?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::ModelParams;
    use crate::Group;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trial(score: f64, mated: bool, g: Group) -> TrialRecord {
        TrialRecord {
            enroll_id: "e".into(),
            test_id: "t".into(),
            score,
            mated,
            group_enroll: g,
            group_test: g,
        }
    }

    #[test]
    fn error_lines_carry_category_and_code() {
        let e: CliError = MetricsError::Parse {
            line: 5,
            message: "bad".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.line(), "error[input]: score file line 5: bad");
        let e: CliError = MetricsError::Protocol("no mated trials".into()).into();
        assert_eq!((e.exit_code(), e.category()), (3, "protocol"));
        let e: CliError = TrainError::Diverged {
            step: 3,
            reason: "x".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn sweep_csv_matches_min_dcf() {
        let trials: Vec<TrialRecord> = [(0.9, true), (0.7, false), (0.6, true), (0.2, false)]
            .iter()
            .enumerate()
            .map(|(i, &(s, m))| trial(s, m, if i % 2 == 0 { Group::M } else { Group::F }))
            .collect();
        let sweep = Sweep::new(&trials).unwrap();
        let cost = DcfConfig::default();
        let csv = sweep_csv(&sweep, &cost);
        let dcfs: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(dcfs.len(), 4 + 2);
        let min = dcfs.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(min, metrics::min_dcf(&trials, &cost).unwrap().0);
    }

    #[test]
    fn fresh_gate_is_neutral_and_summary_consistent() {
        let cfg = TrainConfig::default().model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let saved = SavedModel {
            params: ModelParams::init(&cfg, &mut rng),
            aam_scale: 30.0,
            aam_margin: 0.2,
            step: 0,
        };
        let x = Tensor::randn([cfg.feature_bins, 20], 1.0, &mut rng);
        let s = gate_summary(&saved, &x).unwrap();
        assert!((s.mean - 0.5).abs() < 0.05, "{}", s.mean);
        let flat: Vec<f64> = s.mask.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!((mean - s.mean).abs() < 1e-12);
        assert_eq!(s.channel_means.len(), cfg.channels);
        assert!(gate_summary(&saved, &Tensor::zeros([cfg.feature_bins + 1, 20])).is_err());
    }
}
