use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use confound_guard::experiment::{evaluate, train_model, DcorOn};
use confound_guard::metrics::MetricsReport;
use confound_guard::nn::checkpoint;
use confound_guard::nn::gradcheck::{default_suite, GradCheckConfig};
use confound_guard::nn::optim::OptimizerKind;
use confound_guard::sweep::{run_sweep, SweepSpec};
use confound_guard::synth::{
    generate_dataset, load_dataset, parse_key_values, save_dataset, split_with, Dataset, DatasetSplit,
    DEFAULT_EVAL_FRACTION, DEFAULT_N_PER_GROUP,
};
use confound_guard::trainer::TrainConfig;
use confound_guard::{Network, NormMode};

const MODEL_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train_log.csv";
const METRICS_FILE: &str = "metrics.csv";
const RUN_FILE: &str = "run.txt";

#[derive(Parser)]
#[command(name = "confound-guard", version, about = "Metadata normalization experiments on the synthetic quadrant benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its train/eval split
    Synthgen(SynthgenArgs),
    /// Train one model and evaluate it
    Train(TrainArgs),
    /// Evaluate a trained model directory
    Eval(EvalArgs),
    /// Run a method x batch-size sweep
    Sweep(SweepArgs),
    /// Finite-difference gradient check of every layer type
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthgenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per group
    #[arg(long, default_value_t = DEFAULT_N_PER_GROUP)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_FRACTION)]
    eval_fraction: f64,
    /// Seed of the split shuffle; defaults to --seed
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory written by `synthgen`; generated in memory if absent
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed of the in-memory dataset and split when --data is absent
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = DEFAULT_N_PER_GROUP)]
    n_per_group: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_FRACTION)]
    eval_fraction: f64,
    /// Leave the intercept column out of the metadata matrix
    #[arg(long)]
    no_intercept: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "pmdn")]
    method: NormMode,
    #[arg(long, default_value_t = 200)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().eta1)]
    eta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().eta2)]
    eta2: f64,
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "eval")]
    dcor_on: DcorOn,
    #[arg(long)]
    skip_redundant_forward: bool,
    /// Record wall-clock time in run.txt
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Evaluate on this dataset instead of the one recorded at training time
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    dcor_on: Option<DcorOn>,
    /// Also write the CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// `key: value` config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated methods
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated batch sizes
    #[arg(long)]
    batch_sizes: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    n_per_group: Option<usize>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    #[arg(long)]
    no_intercept: bool,
    #[arg(long)]
    dcor_on: Option<DcorOn>,
    #[arg(long)]
    skip_redundant_forward: bool,
    #[arg(long)]
    timing: bool,
    /// Print each row as it finishes
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = GradCheckConfig::default().tolerance)]
    tolerance: f64,
}

fn load_or_generate(args: &DataArgs) -> Result<(Dataset, DatasetSplit)> {
    let intercept = !args.no_intercept;
    match &args.data {
        Some(dir) => load_dataset(dir, intercept).with_context(|| format!("loading dataset from {}", dir.display())),
        None => {
            let ds = generate_dataset(args.data_seed, args.n_per_group)?;
            let split = split_with(&ds, args.eval_fraction, args.data_seed, intercept)?;
            Ok((ds, split))
        }
    }
}

fn write_metrics(path: &Path, report: &MetricsReport) -> Result<String> {
    let text = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
    fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    Ok(text)
}

fn synthgen(args: SynthgenArgs) -> Result<()> {
    let ds = generate_dataset(args.seed, args.n)?;
    let split = split_with(&ds, args.eval_fraction, args.split_seed.unwrap_or(args.seed), true)?;
    save_dataset(&args.out, &ds, &split)?;
    println!(
        "wrote {} samples ({} train, {} eval) to {}",
        ds.len(),
        split.train.len(),
        split.eval.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let (dataset, split) = load_or_generate(&args.data)?;
    let cfg = TrainConfig {
        batch_size: args.batch_size,
        epochs: args.epochs,
        eta1: args.eta1,
        eta2: args.eta2,
        optimizer: args.optimizer,
        seed: args.seed,
        norm_mode: args.method,
        shuffle: true,
        skip_redundant_forward: args.skip_redundant_forward,
    };
    fs::create_dir_all(&args.out)?;
    let start = Instant::now();
    let (net, log) = train_model(&dataset, &split, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();

    let model_path = args.out.join(MODEL_FILE);
    checkpoint::save(&net, &model_path)?;
    log.write_csv(fs::File::create(args.out.join(LOG_FILE))?)?;

    let mut run = vec![
        ("method", args.method.name().to_string()),
        ("batch_size", args.batch_size.to_string()),
        ("epochs", args.epochs.to_string()),
        ("eta1", args.eta1.to_string()),
        ("eta2", args.eta2.to_string()),
        ("optimizer", args.optimizer.name().to_string()),
        ("seed", args.seed.to_string()),
        ("intercept", (!args.data.no_intercept).to_string()),
        ("dcor_on", args.dcor_on.name().to_string()),
        ("skip_redundant_forward", args.skip_redundant_forward.to_string()),
    ];
    match &args.data.data {
        Some(dir) => run.push(("data", dir.display().to_string())),
        None => {
            run.push(("data_seed", args.data.data_seed.to_string()));
            run.push(("n_per_group", args.data.n_per_group.to_string()));
            run.push(("eval_fraction", args.data.eval_fraction.to_string()));
        }
    }
    if args.timing {
        run.push(("wall_seconds", format!("{elapsed:.3}")));
    }
    let run_text: String = run.iter().map(|(k, v)| format!("{k}: {v}\n")).collect();
    fs::write(args.out.join(RUN_FILE), run_text)?;

    // metrics come from the saved model so `eval` reproduces them exactly
    let reloaded: Network<f32> = checkpoint::load(&model_path)?;
    let report = evaluate(&reloaded, &dataset, &split, args.dcor_on, args.batch_size)?;
    print!("{}", write_metrics(&args.out.join(METRICS_FILE), &report)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let run_path = args.model.join(RUN_FILE);
    let run_text = fs::read_to_string(&run_path).with_context(|| format!("reading {}", run_path.display()))?;
    let run = parse_key_values(&run_text, &run_path.display().to_string())?;
    let get = |key: &str| run.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let need = |key: &str| get(key).with_context(|| format!("{} has no `{key}`", run_path.display()));

    let intercept: bool = need("intercept")?.parse()?;
    let data = DataArgs {
        data: args.data.or_else(|| get("data").map(PathBuf::from)),
        data_seed: get("data_seed").map(str::parse).transpose()?.unwrap_or(0),
        n_per_group: get("n_per_group").map(str::parse).transpose()?.unwrap_or(DEFAULT_N_PER_GROUP),
        eval_fraction: get("eval_fraction").map(str::parse).transpose()?.unwrap_or(DEFAULT_EVAL_FRACTION),
        no_intercept: !intercept,
    };
    let (dataset, split) = load_or_generate(&data)?;
    let dcor_on = match args.dcor_on {
        Some(d) => d,
        None => need("dcor_on")?.parse()?,
    };
    let batch_size: usize = need("batch_size")?.parse()?;
    let net: Network<f32> = checkpoint::load(args.model.join(MODEL_FILE))?;
    let report = evaluate(&net, &dataset, &split, dcor_on, batch_size)?;
    let text = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
    if let Some(out) = &args.out {
        write_metrics(out, &report)?;
    }
    print!("{text}");
    Ok(())
}

fn sweep_spec(args: &SweepArgs) -> Result<SweepSpec> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SweepSpec::from_config(&text, &path.display().to_string())?
        }
        None => SweepSpec::default(),
    };
    let overrides = [
        ("methods", args.methods.clone()),
        ("batch_sizes", args.batch_sizes.clone()),
        ("repeats", args.repeats.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("out_dir", args.out.as_ref().map(|p| p.display().to_string())),
        ("data_dir", args.data.as_ref().map(|p| p.display().to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("eta1", args.eta1.map(|v| v.to_string())),
        ("eta2", args.eta2.map(|v| v.to_string())),
        ("optimizer", args.optimizer.map(|v| v.name().to_string())),
        ("n_per_group", args.n_per_group.map(|v| v.to_string())),
        ("eval_fraction", args.eval_fraction.map(|v| v.to_string())),
        ("dcor_on", args.dcor_on.map(|v| v.name().to_string())),
        ("intercept", args.no_intercept.then(|| "false".to_string())),
        ("skip_redundant_forward", args.skip_redundant_forward.then(|| "true".to_string())),
        ("timing", args.timing.then(|| "true".to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            spec.set(key, &v)?;
        }
    }
    Ok(spec)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let spec = sweep_spec(&args)?;
    let progress = args.progress;
    let rows = run_sweep(&spec, &move |row| {
        if progress {
            eprintln!("{}", row.csv_row());
        }
    })?;
    println!(
        "wrote {} rows to {}",
        rows.len(),
        spec.out_dir.join(confound_guard::sweep::RESULTS_FILE).display()
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let cfg = GradCheckConfig {
        tolerance: args.tolerance,
        seed: args.seed,
        ..Default::default()
    };
    let mut ok = true;
    for mut case in default_suite(args.seed)? {
        let report = case.run(&cfg)?;
        for e in &report.entries {
            println!(
                "{:<20} layer {:>2} {:<10} {:<8} checked {:>5}  max rel err {:.3e}",
                case.name, e.layer, e.kind, e.name, e.checked, e.max_rel_error
            );
        }
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {}: max rel err {:.3e} (tolerance {:.1e}), pmdn beta grad {:.1e}",
            case.name, report.max_rel_error, report.tolerance, report.pmdn_beta_grad_max
        );
        ok &= report.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synthgen(a) => synthgen(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Sweep(a) => sweep(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

