//! Command-line front end: `synth`, `train`, `eval`, `gradcheck`, `predict`.
//!
//! Exit codes: 0 success, 2 usage/config/format/I-O error, 3 numeric failure.
//!
//! Every subcommand accepts `--config FILE`, a flat `key = value` file whose
//! keys are the subcommand's long flag names with `_` in place of `-`.
//! Flags given on the command line override the file.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::data::{load_corpus, save_corpus, split, synth_generate, SynthConfig, SynthMode};
use crate::error::Error;
use crate::evaluate::{evaluate, predict_corpus};
use crate::exec::Execution;
use crate::fusion::{parse_order, AttentionPlacement, FusionConfig, FusionMode, ModelParams};
use crate::metrics::MetricsReport;
use crate::model_io;
use crate::training::{grad_check, train_with, GradCheckOptions, ProbePrecision, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Pass threshold for `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "seqfusion", version, about = "Sequential late-fusion MHA-LSTM sentiment classifier")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Split a corpus, train a model and write model + history files.
    Train(TrainArgs),
    /// Compute accuracy / macro precision / recall / F1 of a model on a corpus.
    Eval(EvalArgs),
    /// Compare backprop gradients with central differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write the predicted class of every utterance.
    Predict(PredictArgs),
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    /// easy | parity
    #[arg(long, default_value = "easy")]
    mode: SynthMode,
    #[arg(long, default_value_t = 200)]
    videos: usize,
    /// Utterances per video.
    #[arg(long, default_value_t = 5)]
    utterances: usize,
    /// Feature dimension of every modality.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Corpus file (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "model.json")]
    model_out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    history_out: PathBuf,
    /// Also write the held-out split here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Also write the training split here.
    #[arg(long)]
    train_out: Option<PathBuf>,
    /// Fraction of videos used for training.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Seeds the split, initialization and shuffling.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// scalar_gate | hadamard | concat
    #[arg(long, default_value_t = FusionMode::ScalarGate)]
    fusion_mode: FusionMode,
    /// Fusion order; the first two modalities are fused first.
    #[arg(long, default_value = "text,audio,visual")]
    order: String,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// Attention heads; must divide d_model.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// after_fused | none
    #[arg(long, default_value = "after_fused")]
    attention: AttentionPlacement,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    adam_beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    adam_beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_epsilon: f64,
    /// Reshuffle sequence order every epoch.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    shuffle: bool,
    /// Record wall-clock seconds in the history (otherwise written as 0).
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    timings: bool,
    /// `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "parallel")]
    execution: ExecArg,
    /// `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Prediction file (JSONL); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "parallel")]
    execution: ExecArg,
    /// `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct GradcheckArgs {
    /// Check only this fusion mode; all three when omitted.
    #[arg(long)]
    mode: Option<FusionMode>,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Arithmetic for the finite-difference loss evaluations.
    #[arg(long, default_value = "double-double")]
    precision: PrecisionArg,
    #[arg(long, default_value = "parallel")]
    execution: ExecArg,
    /// `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExecArg {
    Parallel,
    Sequential,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Parallel => Execution::Parallel,
            ExecArg::Sequential => Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    DoubleDouble,
    Double,
}

impl From<PrecisionArg> for ProbePrecision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::DoubleDouble => ProbePrecision::DoubleDouble,
            PrecisionArg::Double => ProbePrecision::Double,
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(&args) {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    let numeric = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NonFinite(_))));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

fn clap_exit(e: clap::Error) -> i32 {
    let _ = e.print();
    e.exit_code()
}

/// `--config` value given after the subcommand, if any.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut rest = args.iter().skip(2);
    while let Some(arg) = rest.next() {
        let arg = arg.to_str()?;
        if arg == "--" {
            return None;
        }
        if arg == "--config" {
            return rest.next().map(PathBuf::from);
        }
        if let Some(v) = arg.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn parse(args: &[OsString]) -> std::result::Result<Cli, i32> {
    let parse_from = |argv: Vec<OsString>| {
        Cli::command()
            .try_get_matches_from(argv)
            .and_then(|m| Cli::from_arg_matches(&m))
            .map_err(clap_exit)
    };
    let (Some(path), Some(sub)) = (config_path(args), args.get(1).and_then(|s| s.to_str())) else {
        return parse_from(args.to_vec());
    };
    if Cli::command().find_subcommand(sub).is_none() {
        return parse_from(args.to_vec());
    }
    let from_file = match config_args(sub, &path) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Err(EXIT_USAGE);
        }
    };
    // File entries first so that later command-line occurrences win.
    let mut merged = vec![args[0].clone(), OsString::from(sub)];
    merged.extend(from_file);
    merged.extend(args.iter().skip(2).cloned());
    parse_from(merged)
}

/// Reads a `key = value` file and turns it into `--key value` arguments,
/// rejecting keys the subcommand does not define.
fn config_args(sub: &str, path: &Path) -> anyhow::Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cmd = Cli::command();
    let sub_cmd = cmd.find_subcommand(sub).expect("parsed subcommand exists");
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), n + 1);
        };
        let key = key.trim();
        let value = value.trim();
        let known = key != "config" && sub_cmd.get_arguments().any(|a| a.get_id() == key);
        if !known {
            bail!("{}:{}: unknown config key `{key}` for `{sub}`", path.display(), n + 1);
        }
        out.push(OsString::from(format!("--{}", key.replace('_', "-"))));
        out.push(OsString::from(value));
    }
    Ok(out)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<i32> {
    let corpus = synth_generate(&SynthConfig {
        mode: a.mode,
        n_videos: a.videos,
        utterances_per_video: a.utterances,
        feature_dim: a.dim,
        noise_sigma: a.noise,
        seed: a.seed,
    })?;
    save_corpus(&corpus, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {}: {} sequences, {} utterances",
        a.out.display(),
        corpus.len(),
        corpus.utterance_count()
    );
    Ok(EXIT_OK)
}

fn print_metrics(tag: &str, r: &MetricsReport) {
    println!(
        "{tag}: accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1
    );
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<i32> {
    let corpus = load_corpus(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let fusion = FusionConfig {
        mode: a.fusion_mode,
        order: parse_order(&a.order)?,
        d_model: a.d_model,
        heads: a.heads,
        input_dim: corpus.feature_dim,
        attention: a.attention,
        ..FusionConfig::default()
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        adam_beta1: a.adam_beta1,
        adam_beta2: a.adam_beta2,
        adam_epsilon: a.adam_epsilon,
        seed: a.seed,
        shuffle_each_epoch: a.shuffle,
    };
    cfg.validate()?;
    let (train_set, test_set) = split(&corpus, a.split, a.seed)?;
    for (path, part) in [(&a.train_out, &train_set), (&a.test_out, &test_set)] {
        if let Some(p) = path {
            save_corpus(part, p).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    let init = ModelParams::init(fusion, a.seed)?;
    println!(
        "training {} parameters on {} sequences ({} held out)",
        init.num_parameters(),
        train_set.len(),
        test_set.len()
    );
    let (model, history) = train_with(&train_set, &init, &cfg, |e| {
        println!(
            "epoch {:>4}  loss {:.6}  train_acc {:.4}",
            e.epoch, e.mean_loss, e.train_accuracy
        );
    })?;
    model_io::save(&model, &a.model_out).with_context(|| format!("writing {}", a.model_out.display()))?;
    let mut w = create(&a.history_out)?;
    history
        .write(&mut w, a.timings)
        .with_context(|| format!("writing {}", a.history_out.display()))?;
    print_metrics("train", &evaluate(&model, &train_set, Execution::Parallel)?);
    if !test_set.is_empty() {
        print_metrics("held-out", &evaluate(&model, &test_set, Execution::Parallel)?);
    }
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<i32> {
    let model = model_io::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let corpus = load_corpus(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let report = evaluate(&model, &corpus, a.execution.into())?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(report.to_document().as_bytes())
                .and_then(|_| w.flush())
                .with_context(|| format!("writing {}", p.display()))?;
            print_metrics("eval", &report);
        }
        None => print!("{}", report.to_document()),
    }
    Ok(EXIT_OK)
}

#[derive(serde::Serialize)]
struct PredictionLine<'a> {
    video_id: &'a str,
    utterance_index: usize,
    class: usize,
    label: i64,
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<i32> {
    let model = model_io::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let corpus = load_corpus(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let preds = predict_corpus(&model, &corpus, a.execution.into())?;
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for (seq, classes) in corpus.sequences.iter().zip(&preds) {
        for (u, &class) in seq.utterances.iter().zip(classes) {
            let line = PredictionLine {
                video_id: &seq.video_id,
                utterance_index: u.utterance_index,
                class,
                label: class as i64 - 3,
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<i32> {
    let corpus = synth_generate(&SynthConfig {
        mode: SynthMode::Easy,
        n_videos: 1,
        utterances_per_video: a.steps,
        feature_dim: a.dim,
        noise_sigma: 0.5,
        seed: a.seed,
    })?;
    let sample = &corpus.sequences[0];
    let modes = match a.mode {
        Some(m) => vec![m],
        None => FusionMode::ALL.to_vec(),
    };
    let opts = GradCheckOptions {
        epsilon: a.epsilon,
        exec: a.execution.into(),
        precision: a.precision.into(),
        fault: None,
    };
    let mut all_pass = true;
    for mode in modes {
        let cfg = FusionConfig {
            mode,
            d_model: a.d_model,
            heads: a.heads,
            input_dim: a.dim,
            ..FusionConfig::default()
        };
        let model = ModelParams::init(cfg, a.seed)?;
        let r = grad_check(&model, sample, &opts)?;
        let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
        all_pass &= pass;
        println!(
            "{mode} H={} max_rel_error={:.3e} worst={}[{}] analytic={:e} numeric={:e} checked={} {}",
            a.heads,
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            r.analytic,
            r.numeric,
            r.checked,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_NUMERIC })
}
