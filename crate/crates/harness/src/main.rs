use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attacks::AttackSpec;
use autograd::StreamKey;
use clap::{Args, Parser, Subcommand};
use enresnet::integrate_separate;
use harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use harness::data::{load_dataset, DatasetSpec};
use harness::eval::{accuracy, evaluate, evaluate_against};
use harness::experiment::{load_experiment, run_experiment, FkCompareConfig, ModelConfig};
use harness::train::{train, validation_key};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use transport::{
    compare_with_pde, grad_sup_norm, sample_random_terminal, sample_random_velocity,
    solve_convection_diffusion, ConvectionScheme, DiffusionConfig, Grid2D, SdeConfig,
};

#[derive(Parser)]
#[command(
    name = "enresnet",
    version,
    about = "Transport-equation ResNet laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the convection-diffusion equation backward from a random terminal field.
    PdeSolve(PdeSolveArgs),
    /// Compare Feynman-Kac Monte Carlo estimates against the PDE solution.
    FkCompare(FkCompareArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Run a single attack against a checkpoint.
    Attack(AttackArgs),
    /// Natural and white-box robust accuracy of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Score a target on adversarial examples crafted on an oracle.
    Blind(BlindArgs),
    /// Merge separately trained checkpoints into one ensemble.
    Integrate(IntegrateArgs),
    /// Run a named experiment pipeline into an output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct PdeSolveArgs {
    /// JSON config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cutoff: Option<usize>,
    /// auto, semi-lagrangian or spectral
    #[arg(long)]
    scheme: Option<String>,
    /// Field CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PdeSolveConfig {
    n: usize,
    sigma: f64,
    dt: f64,
    seed: u64,
    cutoff: usize,
    scheme: ConvectionScheme,
}

impl Default for PdeSolveConfig {
    fn default() -> Self {
        Self {
            n: 128,
            sigma: 0.1,
            dt: 1e-3,
            seed: 0,
            cutoff: 16,
            scheme: ConvectionScheme::Auto,
        }
    }
}

#[derive(Args)]
struct FkCompareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    /// Number of probe points.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset spec JSON; replaces the config's `data` key.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON with `data` and `model` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Noise coefficient `a`.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// PGD adversarial training.
    #[arg(long)]
    adversarial: bool,
    #[arg(long)]
    learn_weights: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training history JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCmdConfig {
    data: DatasetSpec,
    model: ModelConfig,
}

#[derive(Args)]
struct AttackFlags {
    /// fgsm, ifgsm or cw
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Gradient samples per step against noisy models.
    #[arg(long)]
    eot: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    /// JSON with `data`, `attack` and `eval_seed` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AttackCmdConfig {
    data: DatasetSpec,
    attack: AttackSpec,
    eval_seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON with `data`, `attacks` and `eval_seed` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalCmdConfig {
    data: DatasetSpec,
    attacks: Vec<AttackSpec>,
    eval_seed: u64,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        Self {
            data: DatasetSpec::default(),
            attacks: vec![AttackSpec::fgsm(8.0 / 255.0), AttackSpec::default()],
            eval_seed: 0,
        }
    }
}

#[derive(Args)]
struct BlindArgs {
    /// JSON with `data`, `attacks` and `eval_seed` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    oracle: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IntegrateArgs {
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    /// Comma-separated; uniform when absent.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Dataset spec JSON used to record the merged validation accuracy.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment JSON with a `pipeline` key.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read_json(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn base(config: Option<&Path>) -> Result<Value> {
    match config {
        Some(p) => read_json(p),
        None => Ok(Value::Object(Map::new())),
    }
}

/// Sets `path` inside `root`, creating intermediate objects.
fn set(root: &mut Value, path: &[&str], v: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut cur = root;
    for key in parents {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("config key {key} is not an object"))?;
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .context("config is not a JSON object")?
        .insert(last.to_string(), v);
    Ok(())
}

fn opt<T: Serialize>(root: &mut Value, path: &[&str], v: Option<T>) -> Result<()> {
    match v {
        Some(v) => set(root, path, serde_json::to_value(v)?),
        None => Ok(()),
    }
}

fn finish<T: DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).with_context(|| format!("{what} config"))
}

fn apply_data(root: &mut Value, args: &DataArgs) -> Result<()> {
    if let Some(p) = &args.data {
        set(root, &["data"], read_json(p)?)?;
    }
    opt(root, &["data", "seed"], args.data_seed)
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pde_solve(args: PdeSolveArgs) -> Result<()> {
    let mut v = base(args.config.as_deref())?;
    opt(&mut v, &["n"], args.n)?;
    opt(&mut v, &["sigma"], args.sigma)?;
    opt(&mut v, &["dt"], args.dt)?;
    opt(&mut v, &["seed"], args.seed)?;
    opt(&mut v, &["cutoff"], args.cutoff)?;
    opt(&mut v, &["scheme"], args.scheme)?;
    let cfg: PdeSolveConfig = finish(v, "pde-solve")?;
    let grid = Grid2D::new(cfg.n)?;
    let terminal = sample_random_terminal(grid, cfg.seed, cfg.cutoff)?;
    let velocity = sample_random_velocity(grid, cfg.seed);
    let solve = DiffusionConfig {
        sigma: cfg.sigma,
        dt: cfg.dt,
        scheme: cfg.scheme,
        ..DiffusionConfig::default()
    };
    let u0 = solve_convection_diffusion(&terminal, &velocity, &solve)?;
    let csv = u0.to_csv(cfg.sigma);
    match &args.out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    eprintln!("grad_sup_norm {}", grad_sup_norm(&u0));
    Ok(())
}

fn fk_compare(args: FkCompareArgs) -> Result<()> {
    let mut v = base(args.config.as_deref())?;
    opt(&mut v, &["n"], args.n)?;
    opt(&mut v, &["sigma"], args.sigma)?;
    opt(&mut v, &["paths"], args.paths)?;
    opt(&mut v, &["probes"], args.points)?;
    opt(&mut v, &["seed"], args.seed)?;
    opt(&mut v, &["cutoff"], args.cutoff)?;
    opt(&mut v, &["dt"], args.dt)?;
    let cfg: FkCompareConfig = finish(v, "fk-compare")?;
    let grid = Grid2D::new(cfg.n)?;
    let terminal = sample_random_terminal(grid, cfg.seed, cfg.cutoff)?;
    let velocity = sample_random_velocity(grid, cfg.seed);
    let points = transport::feynman_kac::probe_points(grid, cfg.probes);
    let mc = SdeConfig {
        sigma: cfg.sigma,
        dt: cfg.dt,
        n_paths: cfg.paths,
        seed: cfg.seed,
    };
    let pde = DiffusionConfig {
        dt: cfg.dt,
        ..DiffusionConfig::default()
    };
    let report = compare_with_pde(&points, &terminal, &velocity, cfg.sigma, &mc, &pde)?;
    emit(&report, args.out.as_deref())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut v = base(args.config.as_deref())?;
    apply_data(&mut v, &args.data)?;
    opt(&mut v, &["model", "members"], args.members)?;
    opt(&mut v, &["model", "channels"], args.channels)?;
    opt(&mut v, &["model", "blocks"], args.blocks)?;
    opt(&mut v, &["model", "noise", "a"], args.a)?;
    opt(&mut v, &["model", "train", "epochs"], args.epochs)?;
    opt(&mut v, &["model", "train", "lr0"], args.lr)?;
    opt(&mut v, &["model", "train", "batch_size"], args.batch_size)?;
    opt(&mut v, &["model", "train", "seed"], args.seed)?;
    if args.adversarial {
        set(&mut v, &["model", "train", "adversarial"], json!(true))?;
    }
    if args.learn_weights {
        set(&mut v, &["model", "train", "learn_weights"], json!(true))?;
    }
    let cfg: TrainCmdConfig = finish(v, "train")?;
    let data = load_dataset(&cfg.data)?;
    let model = cfg.model.build(&data)?;
    let outcome = train(model, &data, &cfg.model.train)?;
    let ckpt = Checkpoint {
        model: outcome.model,
        best_val_acc: outcome.best_val_acc,
        epoch: outcome.best_epoch,
    };
    save_checkpoint(&ckpt, &args.out)?;
    eprintln!(
        "best validation accuracy {} at epoch {}",
        outcome.best_val_acc, outcome.best_epoch
    );
    if let Some(p) = &args.report {
        let summary = json!({
            "best_val_acc": outcome.best_val_acc,
            "best_epoch": outcome.best_epoch,
            "weights": ckpt.model.weights(),
            "history": outcome.history,
        });
        emit(&summary, Some(p))?;
    }
    Ok(())
}

fn attack_cmd(args: AttackArgs) -> Result<()> {
    let mut v = base(args.config.as_deref())?;
    apply_data(&mut v, &args.data)?;
    let a = &args.attack;
    opt(&mut v, &["attack", "kind"], a.kind.clone())?;
    opt(&mut v, &["attack", "epsilon"], a.eps)?;
    opt(&mut v, &["attack", "alpha"], a.alpha)?;
    opt(&mut v, &["attack", "iters"], a.iters)?;
    opt(&mut v, &["attack", "eot_runs"], a.eot)?;
    opt(&mut v, &["eval_seed"], args.seed)?;
    let cfg: AttackCmdConfig = finish(v, "attack")?;
    cfg.attack.validate()?;
    let model = load_checkpoint(&args.model)?.model;
    let data = load_dataset(&cfg.data)?;
    let report = evaluate(&model, &data.test, &[cfg.attack], StreamKey(cfg.eval_seed))?;
    let label = cfg.attack.label();
    let out = json!({
        "attack": cfg.attack,
        "label": label,
        "a_nat": report.a_nat,
        "a_rob": report.a_rob[&label],
        "runtime": report.runtime,
    });
    emit(&out, args.out.as_deref())
}

fn eval_config(config: Option<&Path>, data: &DataArgs, seed: Option<u64>) -> Result<EvalCmdConfig> {
    let mut v = base(config)?;
    apply_data(&mut v, data)?;
    opt(&mut v, &["eval_seed"], seed)?;
    let cfg: EvalCmdConfig = finish(v, "evaluate")?;
    for s in &cfg.attacks {
        s.validate()?;
    }
    Ok(cfg)
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let cfg = eval_config(args.config.as_deref(), &args.data, args.seed)?;
    let model = load_checkpoint(&args.model)?.model;
    let data = load_dataset(&cfg.data)?;
    let report = evaluate(&model, &data.test, &cfg.attacks, StreamKey(cfg.eval_seed))?;
    emit(&report, args.out.as_deref())
}

fn blind_cmd(args: BlindArgs) -> Result<()> {
    let cfg = eval_config(args.config.as_deref(), &args.data, args.seed)?;
    let target = load_checkpoint(&args.target)?.model;
    let oracle = load_checkpoint(&args.oracle)?.model;
    let data = load_dataset(&cfg.data)?;
    let report = evaluate_against(
        &target,
        &oracle,
        &data.test,
        &cfg.attacks,
        StreamKey(cfg.eval_seed),
    )?;
    emit(&report, args.out.as_deref())
}

fn integrate_cmd(args: IntegrateArgs) -> Result<()> {
    let ckpts = args
        .models
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<harness::Result<Vec<_>>>()?;
    let weights = args
        .weights
        .unwrap_or_else(|| vec![1.0 / ckpts.len() as f64; ckpts.len()]);
    if weights.len() != ckpts.len() {
        bail!("{} weights for {} models", weights.len(), ckpts.len());
    }
    let models: Vec<_> = ckpts.iter().map(|c| c.model.clone()).collect();
    let merged = integrate_separate(&models, &weights)?;
    // Without data the merged model has not been validated.
    let best_val_acc = match &args.data {
        Some(p) => {
            let spec: DatasetSpec = finish(read_json(p)?, "data")?;
            let data = load_dataset(&spec)?;
            accuracy(&merged, &data.val, validation_key(0))?
        }
        None => 0.0,
    };
    let epoch = ckpts.iter().map(|c| c.epoch).max().unwrap_or(0);
    save_checkpoint(
        &Checkpoint {
            model: merged,
            best_val_acc,
            epoch,
        },
        &args.out,
    )?;
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let cfg = load_experiment(&args.config)?;
    let (_, files) = run_experiment(&cfg, &args.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ENRESNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("ENRESNET_THREADS={raw} is not a worker count"))?;
    if n == 0 {
        bail!("ENRESNET_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

/// Peak resident set size in KiB, where the platform exposes it.
fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    let result = match cli.command {
        Command::PdeSolve(a) => pde_solve(a),
        Command::FkCompare(a) => fk_compare(a),
        Command::Train(a) => train_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Blind(a) => blind_cmd(a),
        Command::Integrate(a) => integrate_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    if let Some(kib) = peak_rss_kib() {
        eprintln!("peak memory {:.1} MiB", kib as f64 / 1024.0);
    }
    result
}
