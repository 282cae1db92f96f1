//! Command-line entry point.
//!
//! One subcommand per stage: `synth`, `pretrain`, `adapt`, `dann`, `eval`,
//! `sweep`, and `gradcheck`. Configurations are JSON files (unknown keys
//! rejected) with command-line flag overrides; every run writes its fully
//! resolved configuration beside its outputs. Output directories default to
//! `$DISCODA_OUT/<subcommand>` when `--out` is not given.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use crate::checkpoint;
use crate::data::{load_split, sample_labeled_subset, Corpus, Instance, SynthConfig};
use crate::dann::DannConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, AdaptStart};
use crate::sweep::SweepPlan;
use crate::train::TrainConfig;
use clap::{Args, Parser, Subcommand};
use discoda_ad::check::{format_table, primitive_suite, three_layer_network_check, CheckReport};
use discoda_ad::rng::derive_seed;
use std::path::{Path, PathBuf};

/// Adversarial domain adaptation for sequence-pair classification.
#[derive(Debug, Parser)]
#[command(name = "discoda", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-domain corpus.
    Synth(SynthArgs),
    /// Train the source encoder and classifier on labeled source data.
    Pretrain(PretrainArgs),
    /// Adversarially adapt a target encoder to a pretrained source model.
    Adapt(AdaptArgs),
    /// Train the joint gradient-reversal baseline.
    Dann(DannArgs),
    /// Evaluate a checkpoint's best model on one corpus split.
    Eval(EvalArgs),
    /// Compare supervised, pretraining, and full systems over labeled-subset sizes.
    Sweep(SweepArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by the training subcommands.
#[derive(Debug, Args)]
struct TrainOpts {
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration scale.
    #[arg(long, value_parser = ["reference", "desk"])]
    preset: Option<String>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch budget override for this command's stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience override (epochs without dev improvement).
    #[arg(long)]
    patience: Option<usize>,
    /// Batch size override.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Pretrain,
    Adapt,
}

impl TrainOpts {
    /// Resolves the training configuration: `--config` file or `--preset`
    /// (default `reference`), then flag overrides. `base` supplies the
    /// starting point when neither is given (used by `adapt` to inherit the
    /// pretrained checkpoint's configuration).
    fn resolve(&self, base: Option<TrainConfig>, stage: Stage) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, self.preset.as_deref()) {
            (Some(path), _) => read_json(path)?,
            (None, Some("desk")) => TrainConfig::desk(TrainConfig::default().seed),
            (None, Some(_)) => TrainConfig::default(),
            (None, None) => base.unwrap_or_default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            match stage {
                Stage::Pretrain => cfg.pretrain_epochs = epochs,
                Stage::Adapt => cfg.adapt_epochs = epochs,
            }
        }
        if let Some(p) = self.patience {
            cfg.patience = p;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON generator configuration; omitted fields take their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Generator seed override.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Corpus directory (the five split JSONL files).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
    /// Disable label smoothing of the classification targets.
    #[arg(long)]
    no_label_smoothing: bool,
    /// Continue a saved pretraining run.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "preset"])]
    resume: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Corpus directory (the five split JSONL files).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Pretraining checkpoint supplying the source encoder and classifier.
    #[arg(long, value_name = "CKPT", required_unless_present = "resume")]
    pretrained: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
    /// Disable spectral normalization of the discriminator.
    #[arg(long)]
    no_spectral_norm: bool,
    /// Record that the source model was pretrained without label smoothing.
    #[arg(long)]
    no_label_smoothing: bool,
    /// Disable the feature-reconstruction loss.
    #[arg(long)]
    no_reconstruction: bool,
    /// Labeled target subset for the supervised step: an instance count
    /// (sampled from target-train) or a JSONL file of labeled instances.
    #[arg(long, value_name = "PATH|SIZE", conflicts_with = "resume")]
    labeled_subset: Option<String>,
    /// Continue a saved adaptation run.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["pretrained", "config", "preset"])]
    resume: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DannArgs {
    /// Corpus directory (the five split JSONL files).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// JSON configuration (`base` plus reversal fields); unknown keys rejected.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration scale.
    #[arg(long, value_parser = ["reference", "desk"])]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Gradient-reversal strength override.
    #[arg(long)]
    lambda: Option<f64>,
    /// Continue a saved run.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "preset"])]
    resume: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint from any stage; its best model is evaluated.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Corpus directory (the five split JSONL files).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "target-test", value_parser = [
        "source-train", "source-dev", "target-train", "target-dev", "target-test",
    ])]
    split: String,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Corpus directory (the five split JSONL files).
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
    /// JSON sweep plan; omitted fields take their defaults.
    #[arg(long, value_name = "FILE")]
    plan: Option<PathBuf>,
    /// Fractions of the target training set to label: a comma list
    /// (`0.25,0.5,1.0`) or a range `a..b[:step]` (step defaults to `a`,
    /// so `0.1..1.0` is the ten-point grid).
    #[arg(long)]
    fractions: Option<String>,
    /// Repetitions with independent seeds.
    #[arg(long)]
    repeats: Option<usize>,
    /// Run repetitions one after another instead of on parallel threads.
    #[arg(long)]
    sequential: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seed for the randomized check inputs.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Parses the CLI and runs one subcommand; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Dann(a) => cmd_dann(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{} does not parse: {e}", path.display())))
}

fn require_corpus_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "corpus directory {} does not exist",
            dir.display()
        )));
    }
    Ok(())
}

fn resolve_out(out: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    match out {
        Some(p) => Ok(p),
        None => match std::env::var_os("DISCODA_OUT") {
            Some(root) => Ok(PathBuf::from(root).join(command)),
            None => Err(Error::Config(format!(
                "no output directory: pass --out or set DISCODA_OUT (used as $DISCODA_OUT/{command})"
            ))),
        },
    }
}

fn fmt_f1(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a (split unlabeled or empty)".into(), |v| format!("{v:.4}"))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = resolve_out(args.out, "synth")?;
    let corpus = pipeline::run_synth(&cfg, &out)?;
    let total: usize = corpus.splits().iter().map(|(_, s)| s.len()).sum();
    println!(
        "synth: {} instances over {} classes -> {}",
        total,
        corpus.labels.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let out = resolve_out(args.out, "pretrain")?;
    require_corpus_dir(&args.data)?;
    let corpus = Corpus::load(&args.data)?;
    let (resume, base) = match &args.resume {
        Some(path) => {
            let (state, cfg) = checkpoint::load_pretrain(path)?;
            (Some(state), Some(cfg))
        }
        None => (None, None),
    };
    let mut cfg = args.train.resolve(base, Stage::Pretrain)?;
    if args.no_label_smoothing {
        cfg.use_label_smoothing = false;
    }
    let o = pipeline::run_pretrain(&corpus, &cfg, resume, &out)?;
    println!(
        "pretrain: {} epochs; source-dev macro F1 {}; target-test macro F1 {} -> {}",
        o.state.epochs_done,
        fmt_f1(o.source_dev_f1),
        fmt_f1(o.target_test_f1),
        out.display()
    );
    Ok(())
}

fn resolve_subset(corpus: &Corpus, spec: &str, seed: u64) -> Result<Vec<Instance>> {
    if let Ok(n) = spec.parse::<usize>() {
        return sample_labeled_subset(
            &corpus.target_train,
            n,
            derive_seed(seed, &format!("subset.{n}")),
        );
    }
    let instances = load_split(Path::new(spec))?;
    if instances.is_empty() {
        return Err(Error::Data(format!("labeled subset file {spec} is empty")));
    }
    Ok(instances)
}

fn cmd_adapt(args: AdaptArgs) -> Result<()> {
    let out = resolve_out(args.out, "adapt")?;
    let (start, base, labels) = match (&args.resume, &args.pretrained) {
        (Some(path), _) => {
            let (state, cfg) = checkpoint::load_adapt(path)?;
            let labels = state.labels.clone();
            (AdaptStart::Resume(Box::new(state)), Some(cfg), labels)
        }
        (None, Some(path)) => {
            let (state, cfg) = checkpoint::load_pretrain(path)?;
            let labels = state.labels.clone();
            let (encoder, classifier) = state.best_model();
            (
                AdaptStart::Fresh {
                    encoder,
                    classifier,
                    subset: Vec::new(),
                },
                Some(cfg),
                labels,
            )
        }
        (None, None) => unreachable!("clap enforces --pretrained or --resume"),
    };
    require_corpus_dir(&args.data)?;
    let corpus = Corpus::load_with_labels(&args.data, &labels)?;
    let mut cfg = args.train.resolve(base, Stage::Adapt)?;
    if args.no_spectral_norm {
        cfg.use_spectral_norm = false;
    }
    if args.no_label_smoothing {
        cfg.use_label_smoothing = false;
    }
    if args.no_reconstruction {
        cfg.use_reconstruction = false;
    }
    let start = match (start, &args.labeled_subset) {
        (AdaptStart::Fresh {
            encoder,
            classifier,
            ..
        }, Some(spec)) => AdaptStart::Fresh {
            encoder,
            classifier,
            subset: resolve_subset(&corpus, spec, cfg.seed)?,
        },
        (start, _) => start,
    };
    let o = pipeline::run_adapt(&corpus, start, &cfg, &out)?;
    let disc = o
        .disc_dev_accuracy
        .map_or_else(|| "n/a".into(), |a| format!("{a:.3}"));
    println!(
        "adapt: {} epochs; target-test macro F1 {}; discriminator held-out accuracy {} -> {}",
        o.state.epochs_done,
        fmt_f1(o.target_test_f1),
        disc,
        out.display()
    );
    Ok(())
}

fn cmd_dann(args: DannArgs) -> Result<()> {
    let out = resolve_out(args.out, "dann")?;
    require_corpus_dir(&args.data)?;
    let corpus = Corpus::load(&args.data)?;
    let (resume, base) = match &args.resume {
        Some(path) => {
            let (state, cfg) = checkpoint::load_dann(path)?;
            (Some(state), Some(cfg))
        }
        None => (None, None),
    };
    let mut cfg: DannConfig = match (&args.config, args.preset.as_deref()) {
        (Some(path), _) => read_json(path)?,
        (None, Some("desk")) => DannConfig::desk(TrainConfig::default().seed),
        (None, Some(_)) => DannConfig::default(),
        (None, None) => base.unwrap_or_default(),
    };
    if let Some(seed) = args.seed {
        cfg.base.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lambda) = args.lambda {
        cfg.lambda = lambda;
    }
    let o = pipeline::run_dann(&corpus, &cfg, resume, &out)?;
    println!(
        "dann: {} epochs; target-test macro F1 {} -> {}",
        o.state.epochs_done,
        fmt_f1(o.target_test_f1),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let out = resolve_out(args.out, "eval")?;
    let stage = checkpoint::checkpoint_stage(&args.checkpoint)?;
    let (enc, cls, labels) = match stage.as_str() {
        "pretrain" => {
            let (state, _) = checkpoint::load_pretrain(&args.checkpoint)?;
            let (e, c) = state.best_model();
            (e, c, state.labels)
        }
        "adapt" => {
            let (state, _) = checkpoint::load_adapt(&args.checkpoint)?;
            let (e, c) = state.best_model();
            (e, c, state.labels)
        }
        "dann" => {
            let (state, _) = checkpoint::load_dann(&args.checkpoint)?;
            let (e, c) = state.best_model();
            (e, c, state.labels)
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown checkpoint stage '{other}'"
            )))
        }
    };
    require_corpus_dir(&args.data)?;
    let corpus = Corpus::load_with_labels(&args.data, &labels)?;
    let split = corpus
        .split(&args.split)
        .expect("clap restricts --split to known names");
    let f1 = pipeline::evaluate_split(&enc, &cls, split, &labels, Some(&out))?;
    println!(
        "eval: {} model on {}: macro F1 {} -> {}",
        stage,
        args.split,
        fmt_f1(f1),
        out.display()
    );
    Ok(())
}

fn parse_fractions(spec: &str) -> Result<Vec<f64>> {
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("'{s}' is not a number in --fractions")))
    };
    if let Some((a, rest)) = spec.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, step)) => (parse(b)?, parse(step)?),
            None => (parse(rest)?, parse(a)?),
        };
        let a = parse(a)?;
        if !(step > 0.0) {
            return Err(Error::Config("--fractions step must be positive".into()));
        }
        let mut out = Vec::new();
        let mut i = 0usize;
        loop {
            let x = a + step * i as f64;
            if x > b + 1e-9 {
                break;
            }
            out.push(x.min(b));
            i += 1;
        }
        Ok(out)
    } else {
        spec.split(',').map(parse).collect()
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let out = resolve_out(args.out, "sweep")?;
    require_corpus_dir(&args.data)?;
    let corpus = Corpus::load(&args.data)?;
    let cfg = args.train.resolve(None, Stage::Adapt)?;
    let mut plan: SweepPlan = match &args.plan {
        Some(path) => read_json(path)?,
        None => SweepPlan::default(),
    };
    if let Some(spec) = &args.fractions {
        plan.fractions = parse_fractions(spec)?;
    }
    if let Some(r) = args.repeats {
        plan.repeats = r;
    }
    if args.sequential {
        plan.parallel = false;
    }
    if let Some(seed) = args.train.seed {
        plan.seed = seed;
    }
    let res = pipeline::run_sweep_stage(&corpus, &cfg, &plan, &out)?;
    let sizes: Vec<f64> = res.grid.iter().map(|&(_, s)| s as f64).collect();
    let trend = if sizes.len() >= 2 {
        let curve = res.mean_curve(crate::sweep::SweepSystem::Full);
        match crate::eval::spearman(&sizes, &curve) {
            Ok(rho) => format!("; full-system Spearman vs size {rho:.3}"),
            Err(_) => String::new(),
        }
    } else {
        String::new()
    };
    println!(
        "sweep: {} measurements over {} subset sizes x {} repetitions{} -> {}",
        res.points.len(),
        res.grid.len(),
        plan.repeats,
        trend,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut reports: Vec<CheckReport> = primitive_suite::<f64>(args.seed, args.step)?;
    reports.push(three_layer_network_check::<f64>(args.seed, args.step)?);
    reports.extend(crate::losses::objective_check_suite(args.seed, args.step)?);
    print!("{}", format_table(&reports, args.tol));
    let failed = reports.iter().filter(|r| !r.passes(args.tol)).count();
    if failed > 0 {
        return Err(Error::Train(format!(
            "gradient check: {failed} of {} checks exceed tolerance {:.1e}",
            reports.len(),
            args.tol
        )));
    }
    println!(
        "all {} checks within tolerance {:.1e}",
        reports.len(),
        args.tol
    );
    Ok(())
}
