//! `viewco`: data generation, training, evaluation and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use viewco::checkpoint::{stored_dtype, Checkpoint};
use viewco::config::RunConfig;
use viewco::gradcheck::{self, Component, GRADCHECK_TOL};
use viewco::segment::{evaluate, write_eval_tsv, EvalOptions, LabelSet, Predictor, Segmenter};
use viewco::synth::{write_dataset, Dataset, DEFAULT_CLASSES};
use viewco::trainer::fit;
use viewco::{DType, Error, Scalar};

const EVAL_TSV: &str = "eval.tsv";
const PREDICTIONS_DIR: &str = "predictions";

#[derive(Parser)]
#[command(name = "viewco", version, about = "Multi-view consistency learning for text-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image-caption corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated shape classes.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CLASSES.map(String::from))]
        classes: Vec<String>,
    },
    /// Train from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Zero-shot segmentation of a dataset; writes eval.tsv and masks under predictions/.
    Eval {
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the threshold stored in the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also measure cross-view consistency.
        #[arg(long)]
        consistency: bool,
        /// Score the ground-truth masks instead of model predictions.
        #[arg(long, hide = true)]
        ground_truth: bool,
    },
    /// Compare analytic gradients of every loss and encoder with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the sign of one component's analytic gradient.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Usage problems exit with 2, everything else with 1.
fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn gen_data(out: &Path, size: usize, seed: u64, classes: &[String]) -> viewco::Result<()> {
    let canvas = viewco::encoder::EncoderConfig::toy().image_size;
    write_dataset(out, size, seed, classes, canvas)?;
    println!("wrote {size} pairs to {}", out.display());
    Ok(())
}

fn train(config: &Path) -> viewco::Result<()> {
    let run = RunConfig::load(config)?;
    if let Some(expected) = &run.classes {
        let found = Dataset::open(&run.train.dataset)?.classes;
        if &found != expected {
            return Err(Error::Config(format!("dataset classes {found:?} differ from labels.classes {expected:?}")));
        }
    }
    let (steps, last) = match run.precision {
        DType::F32 => summarize(fit::<f32>(&run.train)?.losses),
        DType::F64 => summarize(fit::<f64>(&run.train)?.losses),
    };
    match last {
        Some(loss) => println!("trained {steps} steps, final loss {loss:.6}"),
        None => println!("no training steps; wrote initial checkpoint"),
    }
    println!("checkpoint: {}", run.train.checkpoint.display());
    Ok(())
}

fn summarize<T: Scalar>(losses: Vec<viewco::losses::LossBreakdown<T>>) -> (usize, Option<f64>) {
    (losses.len(), losses.last().map(|l| l.total.f64()))
}

fn eval_with<T: Scalar>(
    checkpoint: Option<&Path>,
    dataset: &Dataset,
    threshold: Option<f64>,
    consistency: bool,
) -> viewco::Result<String> {
    let num_classes = dataset.classes.len() + 1;
    let predictions = PathBuf::from(PREDICTIONS_DIR);
    fs::create_dir_all(&predictions)?;
    let segmenter = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::<T>::load(path)?;
            let labels = LabelSet::new(dataset.classes.clone(), threshold.unwrap_or(ckpt.train.threshold))?;
            let tau = ckpt.train.inference_tau;
            Some(Segmenter::new(ckpt, labels, tau)?)
        }
        None => None,
    };
    let aug = match &segmenter {
        Some(s) => s.checkpoint.train.aug.clone(),
        None => viewco::augment::AugConfig::new(dataset_canvas(dataset)?),
    };
    let predictor = match &segmenter {
        Some(s) => Predictor::Model(s),
        None => Predictor::GroundTruth,
    };
    let opts = EvalOptions { consistency, aug, predictions: Some(&predictions) };
    let report = evaluate(&predictor, dataset, num_classes, &opts)?;
    write_eval_tsv(Path::new(EVAL_TSV), &report)?;
    Ok(report.summary())
}

fn dataset_canvas(dataset: &Dataset) -> viewco::Result<usize> {
    match dataset.entries.first() {
        Some(_) => Ok(dataset.load(0)?.image.width()),
        None => Ok(viewco::encoder::EncoderConfig::toy().image_size),
    }
}

fn eval(
    checkpoint: Option<&Path>,
    dataset: &Path,
    threshold: Option<f64>,
    consistency: bool,
    ground_truth: bool,
) -> viewco::Result<()> {
    if let Some(t) = threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
        }
    }
    let dataset = Dataset::open(dataset)?;
    let checkpoint = if ground_truth { None } else { checkpoint };
    if let Some(path) = checkpoint.filter(|p| !p.exists()) {
        let msg = format!("checkpoint {} not found", path.display());
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, msg)));
    }
    let summary = match checkpoint.map(stored_dtype).transpose()? {
        Some(DType::F64) => eval_with::<f64>(checkpoint, &dataset, threshold, consistency)?,
        _ => eval_with::<f32>(checkpoint, &dataset, threshold, consistency)?,
    };
    println!("{summary}");
    Ok(())
}

fn run_gradcheck(seed: u64, inject: Option<&str>) -> viewco::Result<bool> {
    let inject = match inject {
        Some(name) => Some(
            Component::from_name(name).ok_or_else(|| Error::Config(format!("unknown component {name:?}")))?,
        ),
        None => None,
    };
    let report = gradcheck::run(seed, inject)?;
    for &(c, err) in &report.rows {
        let verdict = if err < GRADCHECK_TOL { "ok" } else { "FAIL" };
        println!("{c:<16} {err:.3e} {verdict}");
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { out, size, seed, classes } => gen_data(out, *size, *seed, classes).map(|_| true),
        Command::Train { config } => train(config).map(|_| true),
        Command::Eval { checkpoint, dataset, threshold, consistency, ground_truth } => {
            eval(checkpoint.as_deref(), dataset, *threshold, *consistency, *ground_truth).map(|_| true)
        }
        Command::Gradcheck { seed, inject_fault } => run_gradcheck(*seed, inject_fault.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            if matches!(err, Error::NonFiniteObjective) {
                eprintln!("training diverged; try a lower base_lr or grad_clip");
            }
            exit_code(&err)
        }
    }
}
