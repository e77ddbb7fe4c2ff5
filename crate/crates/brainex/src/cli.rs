//! The `brainex` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use brainex_core::bayesnet::NetworkWeights;
use brainex_core::densecrf::{FilterKind, Normalization};
use brainex_core::Axis;
use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::dataset::{fold_indices, write_phantoms, Manifest};
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentRunner, Variant};
use crate::nifti;
use crate::pipeline;
use crate::report::{self, Metric, NamedReport};
use crate::seeds::stage_seed;

/// Variable that sets the log filter (`error`, `warn`, `info`, `debug`).
pub const LOG_ENV: &str = "BRAINEX_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "brainex",
    version,
    about = "Brain extraction with Monte Carlo dropout segmentation and 3D CRF refinement",
    after_help = "Volumes are uncompressed single-file NIfTI-1 (.nii); .nii.gz is not supported.\n\
                  Set BRAINEX_LOG=info (or debug) for progress output on stderr."
)]
pub struct Cli {
    /// Pipeline configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded phantom subjects and a manifest.
    Phantom(PhantomArgs),
    /// Train a network on the training folds of a manifest.
    Train(TrainArgs),
    /// Monte Carlo dropout prediction for one volume.
    Predict(PredictArgs),
    /// Refine a probability volume with the dense CRF.
    Refine(RefineArgs),
    /// Evaluate masks against references.
    Eval(EvalArgs),
    /// Paired Wilcoxon signed-rank test between two report sets.
    Stats(StatsArgs),
    /// Run an uncertainty experiment on generated phantoms.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Output directory [default: data_dir from the config].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest [default: <data_dir>/manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Held-out fold; training uses all other folds.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Weights file [default: <output_dir>/fold<k>/weights.bseg].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log CSV [default: next to the weights, train_log.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Number of dropout samples T.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub axis: Option<Axis>,
    /// Mean probabilities, one volume per label (4-D NIfTI).
    #[arg(long)]
    pub out_prob: PathBuf,
    #[arg(long)]
    pub out_uncertainty: PathBuf,
    /// Also write the per-sample probabilities into this directory.
    #[arg(long, value_name = "DIR")]
    pub dump_samples: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Probabilities, one volume per label (4-D NIfTI).
    #[arg(long)]
    pub prob: PathBuf,
    /// Intensity volume the probabilities were predicted from.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
    #[arg(long)]
    pub theta_alpha: Option<f64>,
    #[arg(long)]
    pub theta_beta: Option<f64>,
    #[arg(long)]
    pub theta_gamma: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// fast, lattice or naive.
    #[arg(long)]
    pub filter: Option<FilterKind>,
    /// Kernel normalization: symmetric or none.
    #[arg(long)]
    pub normalization: Option<Normalization>,
    #[arg(long)]
    pub out_prob: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Masks to evaluate; several give a batch report.
    #[arg(long, required = true, num_args = 1..)]
    pub mask: Vec<PathBuf>,
    /// References, paired with the masks in order.
    #[arg(long, required = true, num_args = 1..)]
    pub reference: Vec<PathBuf>,
    /// Uncertainty volumes, paired with the masks in order.
    #[arg(long, num_args = 1..)]
    pub uncertainty: Vec<PathBuf>,
    /// Region for the total uncertainty.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    /// JSON report: an object for one mask, an array for several.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV summary with mean and std rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "dice")]
    pub metric: Metric,
    /// Number of comparisons for the Bonferroni correction.
    #[arg(long, default_value_t = 1)]
    pub comparisons: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// train-size, label-corruption, rotation or contrast-shift.
    #[arg(long)]
    pub variant: Variant,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub test_subjects: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Output directory [default: <output_dir>/experiment-<variant>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Invalid(_) => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Phantom(a) => {
            let dir = a.out.unwrap_or_else(|| cfg.data_dir.clone());
            let m = write_phantoms(&cfg, a.count, cfg.seed, &dir).map_err(|e| e.in_stage("phantom"))?;
            log::info!("wrote {} phantoms to {}", m.entries.len(), dir.display());
        }
        Command::Train(a) => {
            if let Some(k) = a.folds {
                cfg.folds = k;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            cfg.validate()?;
            let manifest_path = a.manifest.unwrap_or_else(|| cfg.data_dir.join("manifest.json"));
            let manifest = Manifest::load(&manifest_path)?;
            let (train, test) = fold_indices(manifest.entries.len(), cfg.folds, a.fold, cfg.seed)?;
            log::info!("fold {}: {} training, {} held-out subjects", a.fold, train.len(), test.len());
            let subjects =
                train.iter().map(|&i| manifest.load_subject(i)).collect::<Result<Vec<_>>>()?;
            let seed = stage_seed(cfg.seed, "train", a.fold as u64);
            let (weights, log) = pipeline::train_subjects(&subjects, &cfg, seed).map_err(|e| e.in_stage("train"))?;
            let out = a.out.unwrap_or_else(|| cfg.output_dir.join(format!("fold{}", a.fold)).join("weights.bseg"));
            create_parent(&out)?;
            fs::write(&out, weights.to_bytes()).map_err(|e| Error::io(&out, e))?;
            let log_path = a.log.unwrap_or_else(|| out.with_file_name("train_log.csv"));
            create_parent(&log_path)?;
            pipeline::write_training_log(&log, cfg.net.num_labels, &log_path)?;
            let split = serde_json::json!({ "fold": a.fold, "train": train, "test": test });
            report::write_json(&split, &out.with_file_name("split.json"))?;
        }
        Command::Predict(a) => {
            if let Some(t) = a.samples {
                cfg.mc_samples = t;
            }
            if let Some(axis) = a.axis {
                cfg.axis = axis;
            }
            cfg.validate()?;
            let weights = read_weights(&a.weights)?;
            let vol = nifti::read_volume(&a.input)?;
            let pred = pipeline::predict(&weights, &vol, &cfg, cfg.seed, a.dump_samples.is_some())
                .map_err(|e| e.in_stage("predict"))?;
            for p in [&a.out_prob, &a.out_uncertainty] {
                create_parent(p)?;
            }
            nifti::write_probs(&pred.mean, &a.out_prob)?;
            nifti::write_uncertainty(&pred.uncertainty, &a.out_uncertainty)?;
            if let Some(dir) = a.dump_samples {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (t, s) in pred.samples.iter().enumerate() {
                    nifti::write_probs(s, &dir.join(format!("sample_{t:03}.nii")))?;
                }
            }
        }
        Command::Refine(a) => {
            let crf = &mut cfg.crf;
            let overrides = [
                (&mut crf.w1, a.w1),
                (&mut crf.w2, a.w2),
                (&mut crf.theta_alpha, a.theta_alpha),
                (&mut crf.theta_beta, a.theta_beta),
                (&mut crf.theta_gamma, a.theta_gamma),
            ];
            for (field, value) in overrides {
                if let Some(v) = value {
                    *field = v;
                }
            }
            if let Some(n) = a.iters {
                crf.iterations = n;
            }
            if let Some(n) = a.normalization {
                crf.normalization = n;
            }
            if let Some(f) = a.filter {
                cfg.filter = f;
            }
            cfg.crf.validate().map_err(|e| Error::Invalid(e.to_string()))?;
            let probs = nifti::read_probs(&a.prob)?;
            let vol = nifti::read_volume(&a.image)?;
            let (q, mask) = pipeline::refine(&probs, &vol, &cfg.crf, cfg.filter).map_err(|e| e.in_stage("refine"))?;
            for p in [&a.out_prob, &a.out_mask] {
                create_parent(p)?;
            }
            nifti::write_probs(&q, &a.out_prob)?;
            nifti::write_labels(&mask, &a.out_mask)?;
        }
        Command::Eval(a) => eval(&a)?,
        Command::Stats(a) => {
            let ra = report::read_reports(&a.a)?;
            let rb = report::read_reports(&a.b)?;
            let stats = report::compare(&ra, &rb, a.metric, a.comparisons)?;
            create_parent(&a.out)?;
            report::write_json(&stats, &a.out)?;
        }
        Command::Experiment(a) => {
            if let Some(r) = a.repeats {
                cfg.experiment.repeats = r;
            }
            if let Some(n) = a.test_subjects {
                cfg.experiment.test_subjects = n;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            cfg.validate()?;
            let dir = a.out.unwrap_or_else(|| cfg.output_dir.join(format!("experiment-{}", a.variant)));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut runner = ExperimentRunner::new(&cfg, &cfg.experiment)?;
            let records = runner.run(a.variant)?;
            let summary = experiment::summarize(&records);
            report::write_json(&records, &dir.join("records.json"))?;
            experiment::write_records_csv(&records, &dir.join("records.csv"))?;
            experiment::write_summary_csv(&summary, &dir.join("summary.csv"))?;
        }
    }
    Ok(())
}

fn read_weights(path: &Path) -> Result<NetworkWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NetworkWeights::from_bytes(&bytes).map_err(|e| Error::from(e).in_file(path))
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.mask.len() != a.reference.len() {
        return Err(Error::Invalid(format!("{} masks but {} references", a.mask.len(), a.reference.len())));
    }
    if !a.uncertainty.is_empty() && a.uncertainty.len() != a.mask.len() {
        return Err(Error::Invalid(format!("{} masks but {} uncertainty volumes", a.mask.len(), a.uncertainty.len())));
    }
    let roi = a.roi.as_deref().map(|p| nifti::read_labels(p, 2)).transpose()?;
    let mut reports = Vec::with_capacity(a.mask.len());
    for (i, (m, r)) in a.mask.iter().zip(&a.reference).enumerate() {
        let mask = nifti::read_labels(m, 2)?;
        let reference = nifti::read_labels(r, 2)?;
        let u = a.uncertainty.get(i).map(|p| nifti::read_uncertainty(p)).transpose()?;
        let report = pipeline::evaluate_mask(&mask, &reference, u.as_ref(), roi.as_ref())
            .map_err(|e| e.in_file(m).in_stage("eval"))?;
        reports.push(NamedReport { name: m.display().to_string(), report });
    }
    create_parent(&a.out)?;
    if let [single] = reports.as_slice() {
        report::write_json(&single.report, &a.out)?;
    } else {
        let plain: Vec<_> = reports.iter().map(|r| &r.report).collect();
        report::write_json(&plain, &a.out)?;
    }
    if let Some(csv) = &a.csv {
        create_parent(csv)?;
        report::write_summary_csv(&reports, csv)?;
    }
    Ok(())
}
