use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smfgin::graph::{generate_triangles_dataset, parse_dataset, write_dataset, SplitName, TrianglesConfig};
use smfgin::gradsuite::gradient_suite;
use smfgin::train::{evaluate, prepare_dataset, train_with, Checkpoint, RunConfig, TrainEvent};
use smfgin::{Error, Result};

#[derive(Parser)]
#[command(name = "smfgin", version, about = "Few-shot graph classification with structure-aware GIN embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic triangle-counting dataset as JSON lines.
    GenerateData(GenerateArgs),
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on sampled test tasks.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 6)]
    min_nodes: usize,
    #[arg(long, default_value_t = 20)]
    max_nodes: usize,
    #[arg(long, default_value_t = 0.25)]
    edge_prob: f64,
    /// Number of classes (highest labels) assigned to the test split.
    #[arg(long)]
    test_classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = ["base", "g", "l", "full", "ensemble"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["learned", "vanilla", "self", "mlp", "transformer"])]
    global_attn: Option<String>,
    #[arg(long, value_parser = ["learned", "vanilla", "self", "mlp", "transformer"])]
    local_attn: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["mean", "max", "first"])]
    pooling: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    validate_every: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Print only validation results.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Defaults to the checkpoint's eval_tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["train", "validation", "test"], default_value = "test")]
    split: String,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = smfgin::gradsuite::DEFAULT_POINTS)]
    points: usize,
    #[arg(long, default_value_t = smfgin::gradsuite::DEFAULT_STEP)]
    step: f64,
    /// List every case, not only failures.
    #[arg(long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => run_train(*a),
        Command::Eval(a) => run_eval(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Writes through a sibling temporary file so a failure never leaves a partial output.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let cfg = TrianglesConfig {
        num_classes: a.classes,
        graphs_per_class: a.per_class,
        min_nodes: a.min_nodes,
        max_nodes: a.max_nodes,
        edge_prob: a.edge_prob,
        seed: a.seed,
        test_classes: a.test_classes,
        ..Default::default()
    };
    let data = generate_triangles_dataset(&cfg)?;
    write_atomic(&a.out, &write_dataset(&data)?)?;
    eprintln!("wrote {} graphs to {}", data.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let overrides: [(&str, Option<String>); 15] = [
        ("dataset", a.dataset.map(|p| p.display().to_string())),
        ("variant", a.variant),
        ("global_attn", a.global_attn),
        ("local_attn", a.local_attn),
        ("n", a.n.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        ("q", a.q.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("pooling", a.pooling),
        ("heads", a.heads.map(|v| v.to_string())),
        ("iterations", a.iterations.map(|v| v.to_string())),
        ("learning_rate", a.learning_rate.map(|v| v.to_string())),
        ("validate_every", a.validate_every.map(|v| v.to_string())),
        ("hidden_dim", a.hidden_dim.map(|v| v.to_string())),
        ("num_layers", a.num_layers.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    let data = parse_dataset(&cfg.dataset, cfg.degree_cap)?;
    let quiet = a.quiet;
    let ck = train_with(&cfg, &data, |event| match event {
        TrainEvent::Step { branch, step, loss } if !quiet => {
            eprintln!("branch {branch} step {step:>4} loss {loss:.6}")
        }
        TrainEvent::Validation {
            branch,
            step,
            accuracy,
            improved,
        } => eprintln!(
            "branch {branch} step {step:>4} validation accuracy {accuracy:.4}{}",
            if improved { " (best)" } else { "" }
        ),
        _ => {}
    })?;
    write_atomic(&a.out, &ck.to_json()?)?;
    for (i, b) in ck.branches.iter().enumerate() {
        eprintln!(
            "branch {i} ({}): best validation accuracy {:.4} at step {}",
            b.config.variant, b.best_val_acc, b.best_step
        );
    }
    eprintln!("wrote checkpoint to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dataset = a.dataset.unwrap_or_else(|| ck.config.dataset.clone());
    let mut data = parse_dataset(&dataset, ck.config.degree_cap)?;
    prepare_dataset(&ck.config, &mut data)?;
    let split = match a.split.as_str() {
        "train" => SplitName::Train,
        "validation" => SplitName::Validation,
        _ => SplitName::Test,
    };
    let tasks = a.tasks.unwrap_or(ck.config.eval_tasks);
    let seed = a.seed.unwrap_or(ck.config.seed);
    let outcome = evaluate(&ck, data.graphs(split), tasks, seed)?;
    let report = serde_json::to_string_pretty(&outcome.report)?;
    match &a.out {
        Some(path) => {
            write_atomic(path, &report)?;
            let r = &outcome.report;
            eprintln!("accuracy {:.4} ± {:.4} over {} tasks (ci95 ± {:.4})", r.mean, r.std, r.tasks, r.ci95);
        }
        None => println!("{report}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    let cases = gradient_suite(a.seed, a.points, a.step)?;
    let mut worst = 0.0f64;
    for c in &cases {
        worst = worst.max(c.max_error);
        if a.verbose || !c.passed() {
            println!("{:<28} {:.3e} {}", c.name, c.max_error, if c.passed() { "ok" } else { "FAIL" });
        }
    }
    println!("max relative error: {worst:.3e} over {} cases", cases.len());
    Ok(if cases.iter().all(|c| c.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
