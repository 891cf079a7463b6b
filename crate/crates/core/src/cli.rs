//! Command-line surface: train, attack, bench, finetune, report.
//!
//! Every output file embeds the fully resolved invocation (as JSON) plus the
//! content hash of the model it was produced against, so results can always
//! be traced back to exact weights and settings. Outputs are byte-identical
//! across reruns and thread counts; wall-clock timing columns are zeroed
//! unless `--wall-times` asks for real (non-reproducible) measurements.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacks::{parse_norm_order, resolve_attack_epsilon, run_attack, AttackSpec};
use crate::data::{load_csv, load_idx, save_csv, synth_blobs, Dataset, Sample};
use crate::error::{Error, Result};
use crate::models::{
    load_model, model_hash, save_model, AnyClassifier, Classifier, MlpClassifier, ModelFile,
};
use crate::robustness::{
    compare_attacks, evaluate_robustness, read_report_csv_full, read_report_json,
    write_report_csv, write_report_json, EvalOptions, RobustnessReport,
};
use crate::training::{
    build_adversarial_set, finetune, train, write_trace_csv, ArchSpec, FinetuneConfig, TraceRow,
    TrainConfig,
};

/// Environment variable naming the directory `--data mnist` loads IDX files
/// from.
pub const DATA_DIR_ENV: &str = "DEEPFOOL_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "deepfool",
    version,
    about = "Minimal adversarial perturbations for layered classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a fully connected classifier.
    Train(TrainArgs),
    /// Perturb a single sample and report what flipped.
    Attack(AttackArgs),
    /// Evaluate an attack's perturbation norms over a dataset.
    Bench(BenchArgs),
    /// Fine-tune a model on its own adversarial examples.
    Finetune(FinetuneArgs),
    /// Summarize or compare existing report files.
    Report(ReportArgs),
}

const DATASET_HELP: &str =
    "mnist[:train|:test] | idx:IMAGES,LABELS | csv:PATH | blobs:DIMS,CLASSES,PER_CLASS,SPREAD,SEED";

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset.
    #[arg(long, help = DATASET_HELP)]
    data: String,
    /// Held-out dataset for the per-epoch test accuracy column.
    #[arg(long)]
    eval: Option<String>,
    /// Layer widths, output included: fc:500,150,10 (last = class count).
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// SGD learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed for weight init and shuffling; same seed, same weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplier on the fan-in-scaled uniform init range.
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Output training trace CSV (epoch, loss, accuracies).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated class names to store in the model file.
    #[arg(long)]
    class_names: Option<String>,
}

/// Attack knobs shared by the attack, bench, and finetune commands. Each
/// one overrides the corresponding field of the attack's configuration;
/// unset knobs keep the documented defaults.
#[derive(Debug, Clone, Args)]
struct AttackKnobs {
    /// Overshoot eta applied once to the summed perturbation.
    #[arg(long)]
    eta: Option<f64>,
    /// Norm order being minimized: a real >= 1, or "inf".
    #[arg(long)]
    p: Option<String>,
    /// Hard cap on linearization steps.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// LO,HI clamp applied to the final adversarial point only.
    #[arg(long)]
    clip: Option<String>,
    /// Misclassification rate the sign-attack epsilon search aims for.
    #[arg(long)]
    fgs_target_rate: Option<f64>,
    /// Epsilon search budget (default: the dataset's feature range span).
    #[arg(long)]
    fgs_epsilon_max: Option<f64>,
    /// Grid resolution of the sign-attack epsilon search.
    #[arg(long)]
    fgs_grid_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    /// Model file to attack.
    #[arg(long)]
    model: PathBuf,
    /// Dataset the sample comes from.
    #[arg(long, help = DATASET_HELP)]
    data: String,
    /// Position of the sample in the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// deepfool | fgs[:EPSILON] | oracle.
    #[arg(long, default_value = "deepfool")]
    attack: String,
    #[command(flatten)]
    knobs: AttackKnobs,
    /// Write the result record as JSON (also printed to stdout).
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the adversarial input as a one-row CSV dataset (label column
    /// carries the adversarial label).
    #[arg(long)]
    out_adversarial: Option<PathBuf>,
    /// Write the raw perturbation as a one-row CSV dataset (label column
    /// carries the original label; the format requires one).
    #[arg(long)]
    out_perturbation: Option<PathBuf>,
    /// Record real wall-clock times instead of zeros (not reproducible).
    #[arg(long)]
    wall_times: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Model file to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Dataset to evaluate over.
    #[arg(long, help = DATASET_HELP)]
    data: String,
    /// Attack to evaluate; repeat the flag to benchmark several side by side.
    #[arg(long = "attack", required = true)]
    attacks: Vec<String>,
    #[command(flatten)]
    knobs: AttackKnobs,
    /// Attack only the first N samples (test error still uses all).
    #[arg(long)]
    limit: Option<usize>,
    /// Worker threads; results are identical at any thread count.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Recorded in report metadata for provenance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep initially misclassified samples in the evaluation.
    #[arg(long)]
    include_misclassified: bool,
    /// Record real wall-clock times instead of zeros (not reproducible).
    #[arg(long)]
    wall_times: bool,
    /// Directory receiving NAME.csv and NAME.json per attack, plus
    /// comparison.json when exactly two attacks run.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Model file to fine-tune.
    #[arg(long)]
    model: PathBuf,
    /// Training data; it is perturbed once up front, then reused every epoch.
    #[arg(long, help = DATASET_HELP)]
    data: String,
    /// Held-out dataset for test accuracy and the robustness subset.
    #[arg(long)]
    eval: Option<String>,
    /// Source of the perturbed set: deepfool | fgs[:EPSILON] | none
    /// (none fine-tunes on the clean data as the control run).
    #[arg(long, default_value = "deepfool")]
    attack: String,
    /// Magnification of the applied perturbations (>= 1).
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 5)]
    extra_epochs: usize,
    /// Multiplier on the base learning rate during fine-tuning.
    #[arg(long, default_value_t = 0.5)]
    lr_factor: f64,
    /// Base learning rate the model was originally trained with.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Size of the fixed subset the per-epoch robustness estimate runs on,
    /// drawn from --eval (or --data when absent).
    #[arg(long, default_value_t = 500)]
    rho_samples: usize,
    /// Seed choosing that subset.
    #[arg(long, default_value_t = 17)]
    rho_seed: u64,
    #[command(flatten)]
    knobs: AttackKnobs,
    /// Output model file for the fine-tuned weights.
    #[arg(long)]
    out: PathBuf,
    /// Output trace CSV (one row per extra epoch; baseline in the comments).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(subcommand)]
    action: ReportAction,
}

#[derive(Debug, Subcommand)]
enum ReportAction {
    /// Print the metadata and aggregate statistics of a report file.
    Summarize {
        /// Report file (.json, or the CSV written by bench).
        #[arg(long)]
        input: PathBuf,
    },
    /// Join two reports on sample id and compare their perturbation norms.
    Compare {
        /// Report whose norms go in the ratio's numerator.
        #[arg(long)]
        a: PathBuf,
        /// Report whose norms go in the ratio's denominator.
        #[arg(long)]
        b: PathBuf,
        /// Also write the comparison as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Fully resolved invocation, embedded into every output file. Field order
/// is the serialization order, kept stable for diff-friendliness.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Train {
        data: String,
        eval: Option<String>,
        arch: String,
        train: TrainConfig,
        class_names: Option<Vec<String>>,
        out: String,
        trace: Option<String>,
    },
    Attack {
        model: String,
        data: String,
        index: usize,
        attack: AttackSpec,
        wall_times: bool,
        json: Option<String>,
        out_adversarial: Option<String>,
        out_perturbation: Option<String>,
    },
    Bench {
        model: String,
        data: String,
        attack: AttackSpec,
        attacks_requested: Vec<String>,
        limit: Option<usize>,
        threads: usize,
        seed: u64,
        include_misclassified: bool,
        wall_times: bool,
        out_dir: String,
    },
    Finetune {
        model: String,
        data: String,
        eval: Option<String>,
        attack: Option<AttackSpec>,
        alpha: f64,
        base: TrainConfig,
        extra_epochs: usize,
        lr_factor: f64,
        rho_samples: usize,
        rho_seed: u64,
        out: String,
        trace: Option<String>,
    },
}

/// Entry point used by the binary: parse, dispatch, map errors to exit codes.
pub fn run_cli() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Exit code classes: 2 for argument and configuration problems, 3 for data
/// and file problems, 4 for numerical failures inside an algorithm.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::IndexOutOfBounds(_) => 2,
        Error::NonFinite(_)
        | Error::Parse { .. }
        | Error::UnsupportedSchema { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 3,
        Error::DegenerateGradient(_) | Error::TrainingDiverged { .. } => 4,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Report(args) => cmd_report(args),
    }
}

/// Loads a dataset from its textual spec. See `DATASET_HELP` for the forms.
pub fn load_dataset(spec: &str) -> Result<Dataset> {
    let s = spec.trim();
    if let Some(rest) = s.strip_prefix("blobs:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::invalid_argument(format!(
                "blobs spec '{s}' needs 5 fields: DIMS,CLASSES,PER_CLASS,SPREAD,SEED"
            )));
        }
        let n = parse_field::<usize>(parts[0], "blobs DIMS")?;
        let c = parse_field::<usize>(parts[1], "blobs CLASSES")?;
        let per_class = parse_field::<usize>(parts[2], "blobs PER_CLASS")?;
        let spread = parse_field::<f64>(parts[3], "blobs SPREAD")?;
        let seed = parse_field::<u64>(parts[4], "blobs SEED")?;
        return synth_blobs(n, c, per_class, spread, seed);
    }
    if let Some(path) = s.strip_prefix("csv:") {
        return load_csv(Path::new(path.trim()));
    }
    if let Some(rest) = s.strip_prefix("idx:") {
        let (images, labels) = rest.split_once(',').ok_or_else(|| {
            Error::invalid_argument(format!("idx spec '{s}' needs IMAGES,LABELS paths"))
        })?;
        return load_idx(Path::new(images.trim()), Path::new(labels.trim()));
    }
    match s {
        "mnist" | "mnist:train" => mnist_from_env("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "mnist:test" => mnist_from_env("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        _ => Err(Error::invalid_argument(format!(
            "dataset spec '{s}' not understood (expected {DATASET_HELP})"
        ))),
    }
}

fn parse_field<T: std::str::FromStr>(text: &str, what: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::invalid_argument(format!("{what} '{text}' is not valid")))
}

fn mnist_from_env(images: &str, labels: &str) -> Result<Dataset> {
    let dir = std::env::var(DATA_DIR_ENV).map_err(|_| {
        Error::invalid_argument(format!(
            "set {DATA_DIR_ENV} to the directory holding the IDX files to use --data mnist"
        ))
    })?;
    let dir = PathBuf::from(dir);
    load_idx(&dir.join(images), &dir.join(labels))
}

fn path_string(path: &Path) -> String {
    path.display().to_string()
}

/// Builds the attack spec from its CLI name and applies the knob overrides.
fn resolve_attack_arg(name: &str, knobs: &AttackKnobs) -> Result<Option<AttackSpec>> {
    let mut spec = AttackSpec::parse(name)?;
    if let Some(spec) = spec.as_mut() {
        if let Some(cfg) = spec.config_mut() {
            if let Some(eta) = knobs.eta {
                cfg.overshoot = eta;
            }
            if let Some(p) = &knobs.p {
                cfg.p = parse_norm_order(p)?;
            }
            if let Some(mi) = knobs.max_iterations {
                cfg.max_iterations = mi;
            }
            if let Some(clip) = &knobs.clip {
                cfg.clip = Some(parse_clip(clip)?);
            }
            cfg.validate()?;
        }
        if let AttackSpec::FastGradientSign {
            target_rate,
            epsilon_max,
            grid_steps,
            ..
        } = spec
        {
            if let Some(tr) = knobs.fgs_target_rate {
                *target_rate = tr;
            }
            if let Some(em) = knobs.fgs_epsilon_max {
                *epsilon_max = Some(em);
            }
            if let Some(gs) = knobs.fgs_grid_steps {
                *grid_steps = gs;
            }
        }
    }
    Ok(spec)
}

fn parse_clip(text: &str) -> Result<(f64, f64)> {
    let (lo, hi) = text.split_once(',').ok_or_else(|| {
        Error::invalid_argument(format!("clip '{text}' is not of the form LO,HI"))
    })?;
    Ok((
        parse_field::<f64>(lo, "clip LO")?,
        parse_field::<f64>(hi, "clip HI")?,
    ))
}

fn load_model_with_hash(path: &Path) -> Result<(ModelFile, String)> {
    let file = load_model(path)?;
    let hash = model_hash(&file)?;
    Ok((file, hash))
}

/// Any stored model as an MLP value (an affine model is a single layer).
fn as_mlp(classifier: &AnyClassifier) -> Result<MlpClassifier> {
    MlpClassifier::new(classifier.layers().to_vec())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let eval = args.eval.as_deref().map(load_dataset).transpose()?;
    let arch = ArchSpec::parse(&args.arch)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        weight_init_scale: args.init_scale,
    };
    let class_names = args
        .class_names
        .as_deref()
        .map(|names| {
            let names: Vec<String> = names.split(',').map(|n| n.trim().to_string()).collect();
            if names.len() != data.num_classes() {
                return Err(Error::invalid_argument(format!(
                    "{} class names for {} classes",
                    names.len(),
                    data.num_classes()
                )));
            }
            Ok(names)
        })
        .transpose()?;

    println!(
        "training {} on {} samples ({} classes, dim {})",
        arch,
        data.len(),
        data.num_classes(),
        data.input_dim()
    );
    let (model, stats) = train(&arch, &data, eval.as_ref(), &cfg)?;
    for s in &stats {
        match s.test_accuracy {
            Some(t) => println!(
                "epoch {:>3}: loss {:.6}, train_acc {:.4}, test_acc {:.4}",
                s.epoch, s.loss, s.train_accuracy, t
            ),
            None => println!(
                "epoch {:>3}: loss {:.6}, train_acc {:.4}",
                s.epoch, s.loss, s.train_accuracy
            ),
        }
    }

    let file = ModelFile {
        classifier: model.into(),
        class_names: class_names.clone(),
    };
    save_model(&file, &args.out)?;
    let hash = model_hash(&file)?;

    let config = ExperimentConfig::Train {
        data: args.data.clone(),
        eval: args.eval.clone(),
        arch: arch.to_string(),
        train: cfg,
        class_names,
        out: path_string(&args.out),
        trace: args.trace.as_deref().map(path_string),
    };
    if let Some(trace_path) = &args.trace {
        let rows: Vec<TraceRow> = stats.iter().map(TraceRow::from).collect();
        write_trace_csv(
            trace_path,
            &[
                ("model_hash", hash.clone()),
                ("config", serde_json::to_string(&config)?),
            ],
            &rows,
        )?;
        println!("trace written to {}", trace_path.display());
    }
    println!("model written to {} (hash {hash})", args.out.display());
    Ok(())
}

/// JSON record emitted by the attack command.
#[derive(Debug, Serialize)]
struct AttackRecord {
    config: ExperimentConfig,
    model_hash: String,
    sample_id: usize,
    true_label: usize,
    original_label: usize,
    adversarial_label: usize,
    fooled: bool,
    iterations: usize,
    norm2_raw: f64,
    norm2_overshoot: f64,
    norm_inf_raw: f64,
    norm_inf_overshoot: f64,
    wall_ms: f64,
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let (file, hash) = load_model_with_hash(&args.model)?;
    let model = &file.classifier;
    let data = load_dataset(&args.data)?;
    if args.index >= data.len() {
        return Err(Error::IndexOutOfBounds(format!(
            "sample index {} in a dataset of {}",
            args.index,
            data.len()
        )));
    }
    let sample = &data.samples()[args.index];
    let spec = resolve_attack_arg(&args.attack, &args.knobs)?.ok_or_else(|| {
        Error::invalid_argument("the attack command needs an actual attack, not 'none'")
    })?;
    let spec = resolve_attack_epsilon(model, &data, &spec)?;

    let result = run_attack(model, &sample.x, sample.y, &spec)?;
    let record = AttackRecord {
        config: ExperimentConfig::Attack {
            model: path_string(&args.model),
            data: args.data.clone(),
            index: args.index,
            attack: spec.clone(),
            wall_times: args.wall_times,
            json: args.json.as_deref().map(path_string),
            out_adversarial: args.out_adversarial.as_deref().map(path_string),
            out_perturbation: args.out_perturbation.as_deref().map(path_string),
        },
        model_hash: hash,
        sample_id: sample.id,
        true_label: sample.y,
        original_label: result.original_label,
        adversarial_label: result.adversarial_label,
        fooled: result.fooled,
        iterations: result.iterations,
        norm2_raw: result.norm2_raw,
        norm2_overshoot: result.norm2_overshoot,
        norm_inf_raw: result.norm_inf_raw,
        norm_inf_overshoot: result.norm_inf_overshoot,
        wall_ms: if args.wall_times {
            result.wall_time_ms
        } else {
            0.0
        },
    };
    println!("{}", serde_json::to_string_pretty(&record)?);
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_string_pretty(&record)? + "\n")?;
    }

    // The emitted tensors are one-row CSV datasets so every loader in the
    // tool can read them back.
    let label_space = model.num_classes().max(2);
    if let Some(path) = &args.out_adversarial {
        let adv = match &spec {
            AttackSpec::FastGradientSign { .. } => {
                // The sign attack applies its perturbation as-is.
                let mut pt = sample.x.clone();
                pt.add_scaled(&result.perturbation, 1.0)?;
                pt
            }
            other => {
                let cfg = other
                    .config()
                    .expect("non-sign attacks always carry a config");
                result.adversarial_input(&sample.x, cfg)?
            }
        };
        let one = Dataset::new(
            vec![Sample {
                id: sample.id,
                x: adv,
                y: result.adversarial_label,
            }],
            data.input_dim(),
            label_space,
            None,
        )?;
        save_csv(&one, path)?;
    }
    if let Some(path) = &args.out_perturbation {
        let one = Dataset::new(
            vec![Sample {
                id: sample.id,
                x: result.perturbation.clone(),
                y: result.original_label,
            }],
            data.input_dim(),
            label_space,
            None,
        )?;
        save_csv(&one, path)?;
    }
    Ok(())
}

/// Derives a unique file stem for each requested attack. Repeats of the
/// same attack get an ordinal suffix.
fn report_stems(specs: &[AttackSpec]) -> Vec<String> {
    let mut seen: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    specs
        .iter()
        .map(|s| {
            let count = seen.entry(s.name()).or_insert(0);
            *count += 1;
            if *count == 1 {
                s.name().to_string()
            } else {
                format!("{}-{}", s.name(), count)
            }
        })
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let (file, hash) = load_model_with_hash(&args.model)?;
    let model = &file.classifier;
    let data = load_dataset(&args.data)?;
    let mut specs = Vec::with_capacity(args.attacks.len());
    for name in &args.attacks {
        let spec = resolve_attack_arg(name, &args.knobs)?.ok_or_else(|| {
            Error::invalid_argument("the bench command needs actual attacks, not 'none'")
        })?;
        specs.push(spec);
    }
    let opts = EvalOptions {
        exclude_misclassified: !args.include_misclassified,
        limit: args.limit,
        threads: args.threads,
        deterministic_timing: !args.wall_times,
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out_dir)?;

    let stems = report_stems(&specs);
    let mut reports: Vec<RobustnessReport> = Vec::with_capacity(specs.len());
    for (spec, stem) in specs.iter().zip(&stems) {
        let mut report = evaluate_robustness(model, &hash, &data, spec, &opts)?;
        report.metadata.experiment = Some(serde_json::to_value(ExperimentConfig::Bench {
            model: path_string(&args.model),
            data: args.data.clone(),
            attack: report.metadata.attack_spec.clone(),
            attacks_requested: args.attacks.clone(),
            limit: args.limit,
            threads: args.threads,
            seed: args.seed,
            include_misclassified: args.include_misclassified,
            wall_times: args.wall_times,
            out_dir: path_string(&args.out_dir),
        })?);
        let csv_path = args.out_dir.join(format!("{stem}.csv"));
        let json_path = args.out_dir.join(format!("{stem}.json"));
        write_report_csv(&report, &csv_path)?;
        write_report_json(&report, &json_path)?;
        println!(
            "{}: {} samples, fooling rate {:.4}, rho_l2 {:.6} -> {}",
            report.metadata.attack,
            report.aggregates.samples_evaluated,
            report.aggregates.fooling_rate,
            report.aggregates.rho_adv_l2,
            csv_path.display()
        );
        reports.push(report);
    }

    println!();
    print_summary_table(&reports);

    if reports.len() == 2 {
        let comparison = compare_attacks(&reports[0], &reports[1])?;
        let path = args.out_dir.join("comparison.json");
        std::fs::write(path.clone(), serde_json::to_string_pretty(&comparison)? + "\n")?;
        println!();
        print_comparison(&comparison);
        println!("comparison written to {}", path.display());
    }
    Ok(())
}

fn print_summary_table(reports: &[RobustnessReport]) {
    println!(
        "{:<18} {:>9} {:>9} {:>11} {:>12} {:>12}",
        "attack", "test_err", "fooling", "mean_iters", "rho_l2", "rho_linf"
    );
    for r in reports {
        let a = &r.aggregates;
        println!(
            "{:<18} {:>9.4} {:>9.4} {:>11.3} {:>12.6} {:>12.6}",
            r.metadata.attack,
            a.test_error,
            a.fooling_rate,
            a.mean_iterations,
            a.rho_adv_l2,
            a.rho_adv_linf
        );
    }
}

fn print_comparison(c: &crate::robustness::AttackComparison) {
    println!(
        "{} vs {}: {} paired samples, norm ratio mean {:.4} median {:.4}, wins {}/{} ties {}",
        c.attack_a,
        c.attack_b,
        c.paired_samples,
        c.mean_norm_ratio,
        c.median_norm_ratio,
        c.wins_a,
        c.wins_b,
        c.ties
    );
    if c.model_mismatch {
        println!("note: the reports were produced against different model weights");
    }
    if let Some(caveat) = &c.caveat {
        println!("note: {caveat}");
    }
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    if !(args.alpha.is_finite() && args.alpha >= 1.0) {
        return Err(Error::invalid_argument(format!(
            "alpha must be finite and at least 1, got {}",
            args.alpha
        )));
    }
    let (file, base_hash) = load_model_with_hash(&args.model)?;
    let model = as_mlp(&file.classifier)?;
    let data = load_dataset(&args.data)?;
    let eval = args.eval.as_deref().map(load_dataset).transpose()?;

    let base = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let cfg = FinetuneConfig {
        extra_epochs: args.extra_epochs,
        lr_factor: args.lr_factor,
        ..FinetuneConfig::default()
    };

    // Source attack; "none" is the clean control (fine-tune on the data
    // as-is).
    let spec = resolve_attack_arg(&args.attack, &args.knobs)?;
    let spec = spec
        .map(|s| resolve_attack_epsilon(&model, &data, &s))
        .transpose()?;
    let train_set = match &spec {
        Some(spec) => {
            let (set, stats) = build_adversarial_set(&model, &data, spec, args.alpha)?;
            println!(
                "perturbed set: {} perturbed, {} kept (not fooled), {} kept (failed), mean |alpha r|_2 {:.6}",
                stats.perturbed, stats.kept_not_fooled, stats.kept_failed, stats.mean_applied_norm2
            );
            set
        }
        None => {
            println!("clean control: fine-tuning on the original data");
            data.clone()
        }
    };

    let rho_source = eval.as_ref().unwrap_or(&data);
    let rho_eval = rho_source.subsample(args.rho_samples, args.rho_seed);
    println!(
        "robustness trace measured on {} held-out samples",
        rho_eval.len()
    );

    let (tuned, trace) = finetune(&model, &train_set, &rho_eval, eval.as_ref(), &base, &cfg)?;
    for p in &trace.points {
        let acc = p
            .test_accuracy
            .map(|a| format!(", test_acc {a:.4}"))
            .unwrap_or_default();
        println!("epoch {:>2}: rho_adv {:.6}{}", p.epoch, p.rho_adv, acc);
    }
    let baseline = trace.points[0].rho_adv;
    let last = trace.points.last().expect("trace always has points").rho_adv;
    println!(
        "rho_adv {:.6} -> {:.6} ({:+.1}%)",
        baseline,
        last,
        100.0 * (last - baseline) / baseline
    );

    let tuned_file = ModelFile {
        classifier: tuned.into(),
        class_names: file.class_names.clone(),
    };
    save_model(&tuned_file, &args.out)?;
    let tuned_hash = model_hash(&tuned_file)?;

    let config = ExperimentConfig::Finetune {
        model: path_string(&args.model),
        data: args.data.clone(),
        eval: args.eval.clone(),
        attack: spec,
        alpha: args.alpha,
        base,
        extra_epochs: args.extra_epochs,
        lr_factor: args.lr_factor,
        rho_samples: args.rho_samples,
        rho_seed: args.rho_seed,
        out: path_string(&args.out),
        trace: args.trace.as_deref().map(path_string),
    };
    if let Some(trace_path) = &args.trace {
        // One row per extra epoch; the pre-finetune baseline rides in the
        // comments so the row count equals the epoch count.
        let rows: Vec<TraceRow> = trace.points[1..].iter().map(TraceRow::from).collect();
        write_trace_csv(
            trace_path,
            &[
                ("model_hash", base_hash.clone()),
                ("tuned_model_hash", tuned_hash.clone()),
                ("baseline", serde_json::to_string(&trace.points[0])?),
                ("config", serde_json::to_string(&config)?),
            ],
            &rows,
        )?;
        println!("trace written to {}", trace_path.display());
    }
    println!(
        "fine-tuned model written to {} (hash {tuned_hash})",
        args.out.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    match args.action {
        ReportAction::Summarize { input } => {
            let report = load_report(&input)?;
            println!("attack:        {}", report.metadata.attack);
            println!("model hash:    {}", report.metadata.model_hash);
            println!(
                "attack spec:   {}",
                serde_json::to_string(&report.metadata.attack_spec)?
            );
            if let Some(experiment) = &report.metadata.experiment {
                println!("experiment:    {}", serde_json::to_string(experiment)?);
            }
            let a = &report.aggregates;
            println!("samples:       {} total, {} evaluated, {} excluded, {} failed",
                a.samples_total, a.samples_evaluated, a.excluded_misclassified, a.failed);
            println!("test error:    {:.6}", a.test_error);
            println!("fooling rate:  {:.6}", a.fooling_rate);
            println!("mean iters:    {:.6}", a.mean_iterations);
            println!("rho_adv (l2):  {:.6}", a.rho_adv_l2);
            println!("rho_adv (inf): {:.6}", a.rho_adv_linf);
            println!("mean |r|_2:    {:.6} raw, {:.6} overshoot",
                a.mean_norm2_raw, a.mean_norm2_overshoot);
            Ok(())
        }
        ReportAction::Compare { a, b, json } => {
            let ra = load_report(&a)?;
            let rb = load_report(&b)?;
            let comparison = compare_attacks(&ra, &rb)?;
            print_comparison(&comparison);
            println!(
                "rho_l2: {} {:.6} vs {} {:.6}",
                comparison.attack_a, comparison.rho_l2_a, comparison.attack_b, comparison.rho_l2_b
            );
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&comparison)? + "\n")?;
                println!("comparison written to {}", path.display());
            }
            Ok(())
        }
    }
}

/// Loads a report from either emitted format, picking the parser by
/// extension.
fn load_report(path: &Path) -> Result<RobustnessReport> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_report_json(path),
        _ => read_report_csv_full(path),
    }
}
