use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use peg_core::data::{
    cross_file_violations, parse_ground_truth, scan_ground_truth, scan_predictions,
    write_ground_truth, write_predictions, DataError,
};
use peg_core::kernels::KernelConfig;
use peg_core::metrics::{evaluate, threshold_key, write_pr_csv, EvalOptions, Protocol};
use peg_core::selftest::{run_suite, SelftestOptions, Suite};
use peg_core::synth::{
    fd_train, generate_dataset, noisy_predictions, write_loss_trace, write_memory_sidecar,
    SynthSpec, TrainOptions,
};
use peg_core::{PegPredictionSet, PegSampleGT};

#[derive(Parser)]
#[command(
    name = "peg-eval",
    version,
    about = "Phrase extraction and grounding evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// CMAP and Recall@k of a prediction file.
    Score(ScoreArgs),
    /// Pooled P-R curve at one threshold as CSV.
    PrCurve(PrCurveArgs),
    /// Checks both files and their consistency.
    Validate(Inputs),
    /// Runs the randomized oracle suites.
    Selftest(SelftestArgs),
    /// Writes a synthetic dataset, optionally training the reference decoder on it.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Anybox,
    Merged,
    Both,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Dual IOU thresholds for CMAP.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    thresholds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    protocol: ProtocolArg,
    /// Also report the mean CMAP over 0.50:0.05:0.95.
    #[arg(long)]
    mean_range: bool,
    /// Report JSON path. Without it the JSON goes to stdout after the summary.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PrCurveArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// CSV path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to one suite; repeatable.
    #[arg(long)]
    suite: Vec<Suite>,
    /// Trials per suite instead of each suite's default.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Finite-difference train the decoder and write its predictions.
    #[arg(long)]
    train: bool,
    /// Write jittered ground truth with distractors as the prediction file.
    #[arg(long, conflicts_with = "train")]
    noisy_pred: bool,
    /// key=value decoder config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = TrainOptions::default().max_steps)]
    max_steps: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const EXIT_INPUT: u8 = 1;
const EXIT_CROSS_FILE: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

fn input(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_INPUT,
        error,
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_default_env()
        .filter_level(log::LevelFilter::Warn)
        .parse_default_env()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::PrCurve(a) => cmd_pr_curve(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(input)
}

fn with_file<T>(path: &Path, r: Result<T, DataError>) -> Result<T, Failure> {
    r.map_err(|e| input(anyhow::anyhow!("{}: {e}", path.display())))
}

/// Parses both files and rejects cross-file inconsistencies.
fn load(inputs: &Inputs) -> Result<(Vec<PegSampleGT>, Vec<PegPredictionSet>), Failure> {
    let gt = with_file(&inputs.gt, parse_ground_truth(open(&inputs.gt)?))?;
    let scanned = with_file(&inputs.pred, scan_predictions(open(&inputs.pred)?))?;
    if let Some(e) = scanned.errors.into_iter().next() {
        return Err(input(anyhow::anyhow!("{}: {e}", inputs.pred.display())));
    }
    let violations = cross_file_violations(&gt, &scanned.records);
    if let Some(v) = violations.first() {
        return Err(Failure {
            code: EXIT_CROSS_FILE,
            error: anyhow::anyhow!("{}: {v}", inputs.pred.display()),
        });
    }
    Ok((gt, scanned.records.into_iter().map(|(_, r)| r).collect()))
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display())),
        None => io::stdout()
            .write_all(bytes)
            .context("cannot write to stdout"),
    }
    .map_err(input)
}

fn cmd_score(a: ScoreArgs) -> CmdResult {
    let (gt, preds) = load(&a.inputs)?;
    let protocols = match a.protocol {
        ProtocolArg::Anybox => vec![Protocol::AnyBox],
        ProtocolArg::Merged => vec![Protocol::MergedBoxes],
        ProtocolArg::Both => vec![Protocol::AnyBox, Protocol::MergedBoxes],
    };
    let options = EvalOptions {
        thresholds: a.thresholds,
        ks: a.k,
        protocols,
        mean_range: a.mean_range,
        threads: a.threads.max(1),
        ..EvalOptions::default()
    };
    let report = evaluate(&gt, &preds, &options).map_err(|e| input(e.into()))?;
    let mut summary = String::new();
    for (k, v) in &report.cmap {
        summary.push_str(&format!("cmap@{k} = {v:.6}\n"));
    }
    let mut recalls: Vec<_> = report.recall_at_k.iter().collect();
    recalls.sort_by_key(|(key, _)| {
        let (proto, k) = key.split_once('@').unwrap_or((key, "0"));
        (proto.to_string(), k.parse::<usize>().unwrap_or(0))
    });
    for (k, v) in recalls {
        summary.push_str(&format!("recall {k} = {v:.6}\n"));
    }
    print!("{summary}");
    write_output(a.output.as_deref(), report.to_json().as_bytes())
}

fn cmd_pr_curve(a: PrCurveArgs) -> CmdResult {
    let (gt, preds) = load(&a.inputs)?;
    let options = EvalOptions {
        thresholds: vec![a.threshold],
        ks: vec![1],
        protocols: Vec::new(),
        threads: a.threads.max(1),
        ..EvalOptions::default()
    };
    let report = evaluate(&gt, &preds, &options).map_err(|e| input(e.into()))?;
    let points = &report.pr_curves[&threshold_key(a.threshold)];
    let mut csv = Vec::new();
    write_pr_csv(points, &mut csv).map_err(|e| input(e.into()))?;
    write_output(a.output.as_deref(), &csv)
}

fn cmd_validate(a: Inputs) -> CmdResult {
    let gt = with_file(&a.gt, scan_ground_truth(open(&a.gt)?))?;
    let pred = with_file(&a.pred, scan_predictions(open(&a.pred)?))?;
    let samples: Vec<PegSampleGT> = gt.records.iter().map(|(_, s)| s.clone()).collect();
    let cross = cross_file_violations(&samples, &pred.records);
    for e in &gt.errors {
        println!("{}: {e}", a.gt.display());
    }
    for e in &pred.errors {
        println!("{}: {e}", a.pred.display());
    }
    for e in &cross {
        println!("{}: {e}", a.pred.display());
    }
    let n_preds: usize = pred.records.iter().map(|(_, s)| s.predictions.len()).sum();
    let summary = format!("{} samples, {} predictions", gt.records.len(), n_preds);
    let code = if !gt.errors.is_empty() || !pred.errors.is_empty() {
        EXIT_INPUT
    } else if !cross.is_empty() {
        EXIT_CROSS_FILE
    } else {
        println!("OK: {summary}");
        return Ok(());
    };
    let n = gt.errors.len() + pred.errors.len() + cross.len();
    Err(Failure {
        code,
        error: anyhow::anyhow!("{n} violation(s) in {summary}"),
    })
}

fn cmd_selftest(a: SelftestArgs) -> CmdResult {
    let suites = if a.suite.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suite
    };
    let options = SelftestOptions {
        seed: a.seed,
        trials: a.trials,
        ..SelftestOptions::default()
    };
    let mut failed = Vec::new();
    for suite in suites {
        let r = run_suite(suite, &options);
        println!(
            "{}: {} trials, {}/{} checks passed{}",
            suite,
            r.trials,
            r.checks - r.failed,
            r.checks,
            if r.passed() { "" } else { " FAIL" }
        );
        for f in &r.failures {
            println!("  {} (trial {}): {}", f.check, f.trial, f.detail);
        }
        if !r.passed() {
            failed.push(suite.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_SELFTEST,
            error: anyhow::anyhow!("failing suites: {}", failed.join(", ")),
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(input)
}

fn flush(mut w: BufWriter<File>, path: &Path) -> CmdResult {
    w.flush()
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(input)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))
                .map_err(input)?;
            KernelConfig::from_text(&text)
                .with_context(|| p.display().to_string())
                .map_err(input)?
        }
        None => KernelConfig::default(),
    };
    let spec = SynthSpec {
        seed: a.seed,
        n_samples: a.samples,
        d_model: config.d_model,
        ..SynthSpec::default()
    };
    let data = generate_dataset(&spec).map_err(|e| input(e.into()))?;
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("cannot create {}", a.out_dir.display()))
        .map_err(input)?;

    let gt_path = a.out_dir.join("gt.jsonl");
    let mut w = create(&gt_path)?;
    write_ground_truth(&data.samples, &mut w).map_err(|e| input(e.into()))?;
    flush(w, &gt_path)?;
    let mem_path = a.out_dir.join("memory.bin");
    let mut w = create(&mem_path)?;
    write_memory_sidecar(&data.memories, &mut w).map_err(|e| input(e.into()))?;
    flush(w, &mem_path)?;
    println!("wrote {} and {}", gt_path.display(), mem_path.display());

    let pred_path = a.out_dir.join("pred.jsonl");
    if a.noisy_pred {
        let preds = noisy_predictions(&data.samples, a.seed);
        let mut w = create(&pred_path)?;
        write_predictions(&preds, &mut w).map_err(|e| input(e.into()))?;
        flush(w, &pred_path)?;
        println!("wrote {}", pred_path.display());
    }
    if a.train {
        let options = TrainOptions {
            max_steps: a.max_steps,
            threads: a.threads.max(1),
            ..TrainOptions::default()
        };
        let result = fd_train(&data.samples, &data.memories, &config, &options)
            .map_err(|e| input(e.into()))?;
        let mut w = create(&pred_path)?;
        write_predictions(&result.predictions, &mut w).map_err(|e| input(e.into()))?;
        flush(w, &pred_path)?;
        let trace_path = a.out_dir.join("loss.csv");
        let mut w = create(&trace_path)?;
        write_loss_trace(&result.loss_trace, &mut w).map_err(|e| input(e.into()))?;
        flush(w, &trace_path)?;
        println!(
            "trained {} steps, loss {:.6} -> {:.6}, solved: {}",
            result.steps,
            result.loss_trace[0],
            result.loss_trace[result.loss_trace.len() - 1],
            result.solved
        );
        println!("wrote {} and {}", pred_path.display(), trace_path.display());
    }
    Ok(())
}
