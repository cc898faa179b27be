use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dmps::blocks::BlockKind;
use dmps::harness::{self, checkpoint, export, verify, RunConfig};
use dmps::rng::domain;
use dmps::tasks::{GaussianSampler, Task};
use dmps::tensor::Tensor;
use dmps::DmpsError;

#[derive(Parser)]
#[command(name = "dmps", version, about = "Deep message passing on sets: training, sweeps and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.jsonl and checkpoint.bin.
    Train(RunArgs),
    /// Score a checkpoint on freshly drawn held-out sets.
    Evaluate(ArtifactArgs),
    /// Gaussian task: one run per (rho, seed); writes results.csv.
    SweepRho(SweepArgs),
    /// Counting task with fixed-gamma denoising blocks; writes results.csv.
    SweepGamma(SweepArgs),
    /// Write kernel and weight matrices of a checkpoint as CSV.
    ExportKernel(ArtifactArgs),
    /// Run the invariant suite and write report.json.
    Verify(VerifyArgs),
    /// Print the default configuration as annotated TOML.
    PrintDefaults {
        #[arg(long, value_enum, default_value = "gaussian")]
        task: TaskArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Gaussian,
    Counting,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Gaussian => Task::Gaussian,
            TaskArg::Counting => Task::Counting,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BlocksArg {
    Mp,
    Denoise,
    Residual,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    rho: Option<f64>,
    /// A fixed value in (0, 1) or `learnable`.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long, value_enum)]
    blocks: Option<BlocksArg>,
    #[arg(long)]
    depth: Option<usize>,
    /// Override the number of training batches.
    #[arg(long)]
    batches: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated grid, replacing the configured one.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Comma-separated seeds, replacing the configured ones.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct ArtifactArgs {
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sets to draw; defaults to the configured evaluation size.
    #[arg(long)]
    sets: Option<usize>,
    /// Sets whose individual K and W are written (export-kernel only).
    #[arg(long, default_value_t = 10)]
    per_set: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Run with a deliberate defect to check that the suite catches it.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    UnnormalizedWeights,
}

fn exit_code(err: &DmpsError) -> u8 {
    match err {
        DmpsError::NonFinite { .. } => 3,
        DmpsError::Config(_) | DmpsError::Checkpoint(_) | DmpsError::Dimension { .. } => 2,
        DmpsError::Io(_) | DmpsError::Json(_) => 2,
        DmpsError::Contract(_) | DmpsError::EmptySet => 1,
    }
}

fn build_config(args: &RunArgs) -> Result<RunConfig, DmpsError> {
    let mut config = match &args.config {
        Some(path) => {
            let config = RunConfig::from_toml(&fs::read_to_string(path)?)?;
            if let Some(task) = args.task {
                if Task::from(task) != config.task {
                    return Err(DmpsError::Config(format!(
                        "--task {} conflicts with task {} in {}",
                        Task::from(task),
                        config.task,
                        path.display()
                    )));
                }
            }
            config
        }
        None => RunConfig::defaults(args.task.map_or(Task::Gaussian, Task::from)),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(rho) = args.rho {
        config.gaussian.rho = rho;
    }
    if let Some(kind) = args.blocks {
        config.model.blocks.kind = match kind {
            BlocksArg::Mp => BlockKind::Vanilla,
            BlocksArg::Denoise => BlockKind::Denoising,
            BlocksArg::Residual => BlockKind::Residual,
        };
    }
    if let Some(gamma) = &args.gamma {
        let g = &mut config.model.blocks.gamma;
        if gamma == "learnable" {
            g.learnable = true;
        } else {
            g.value = gamma
                .parse()
                .map_err(|_| DmpsError::Config(format!("--gamma expects a number or `learnable`, got {gamma}")))?;
            g.learnable = false;
        }
    }
    if let Some(depth) = args.depth {
        config.model.blocks.count = depth;
    }
    if let Some(batches) = args.batches {
        config.training.batches = batches;
    }
    config.validate()?;
    Ok(config)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), DmpsError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn train(args: &RunArgs) -> Result<(), DmpsError> {
    let config = build_config(args)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml()?)?;
    let total = config.training.batches;
    let outcome = harness::train(&config, &mut |m| {
        eprintln!(
            "step {:>6}/{total}  loss {:.4}  monitor acc {:.3}  lr {:.2e}",
            m.step, m.train_loss, m.monitor_accuracy, m.learning_rate
        );
    })?;
    harness::write_metrics(&out.join("metrics.jsonl"), &outcome.metrics)?;
    checkpoint::save(&out.join("checkpoint.bin"), &config, &outcome.params)?;
    write_json(
        &out.join("evaluation.json"),
        &json!({
            "task": config.task.to_string(),
            "seed": config.seed,
            "sets": outcome.evaluation.predictions.len(),
            "accuracy": outcome.evaluation.accuracy,
            "mean_loss": outcome.evaluation.mean_loss,
        }),
    )?;
    write_json(&out.join("timing.json"), &json!({ "elapsed_secs": outcome.elapsed_secs }))?;
    println!("accuracy {:.4} on {} held-out sets", outcome.evaluation.accuracy, outcome.evaluation.predictions.len());
    Ok(())
}

fn load_artifact(args: &ArtifactArgs) -> Result<(checkpoint::Checkpoint, PathBuf), DmpsError> {
    let path = match (&args.checkpoint, &args.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => out.join("checkpoint.bin"),
        (None, None) => PathBuf::from("checkpoint.bin"),
    };
    let mut ckpt = checkpoint::load(&path)?;
    if let Some(seed) = args.seed {
        ckpt.config.seed = seed;
    }
    if let Some(sets) = args.sets {
        ckpt.config.training.eval_sets = sets;
    }
    ckpt.config.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    fs::create_dir_all(&out)?;
    Ok((ckpt, out))
}

fn evaluate(args: &ArtifactArgs) -> Result<(), DmpsError> {
    let (ckpt, out) = load_artifact(args)?;
    let model = ckpt.model()?;
    let sets = harness::sample_sets(&ckpt.config, ckpt.config.training.eval_sets, ckpt.config.seed, domain::EVAL, 1)?;
    let eval = harness::evaluate(&model, &ckpt.params, ckpt.config.task, &sets)?;
    let mut csv = BufWriter::new(fs::File::create(out.join("predictions.csv"))?);
    writeln!(csv, "set,label,output,decision")?;
    for (i, p) in eval.predictions.iter().enumerate() {
        writeln!(csv, "{i},{},{:.17e},{}", p.label, p.output, p.decision)?;
    }
    csv.flush()?;
    println!("accuracy {:.4} on {} sets", eval.accuracy, sets.len());
    Ok(())
}

fn sweep(args: &SweepArgs, gamma: bool) -> Result<(), DmpsError> {
    let mut run = args.run.clone();
    if run.task.is_none() && run.config.is_none() {
        run.task = Some(if gamma { TaskArg::Counting } else { TaskArg::Gaussian });
    }
    let config = build_config(&run)?;
    let grid = args.grid.clone().unwrap_or_else(|| {
        if gamma {
            config.sweep.gamma_grid.clone()
        } else {
            config.sweep.rho_grid.clone()
        }
    });
    let seeds = args.seeds.clone().unwrap_or_else(|| config.sweep.seeds.clone());
    let out = config.output_dir.clone();
    fs::create_dir_all(&out)?;
    let report = &mut |value: f64, seed: u64, o: &harness::TrainOutcome| {
        eprintln!("{value} seed {seed}: accuracy {:.4} ({:.0}s)", o.evaluation.accuracy, o.elapsed_secs);
    };
    let table = if gamma {
        harness::sweep_gamma(&config, &grid, &seeds, Some(&out), report)?
    } else {
        harness::sweep_rho(&config, &grid, &seeds, Some(&out), report)?
    };
    table.write_csv(std::io::stdout().lock())?;
    if let Some(best) = table.argmax() {
        println!("argmax {} = {best}", table.parameter);
    }
    Ok(())
}

fn export_kernel(args: &ArtifactArgs) -> Result<(), DmpsError> {
    let (ckpt, out) = load_artifact(args)?;
    let model = ckpt.model()?;
    let config = &ckpt.config;
    let count = config.training.eval_sets;
    let groups: Vec<(&str, Vec<Tensor>)> = match config.task {
        Task::Gaussian => {
            let sampler = GaussianSampler::new(config.gaussian.rho)?;
            let mut rng = dmps::rng::stream_rng(config.seed, domain::EXPORT, 0);
            let correlated = (0..count).map(|_| sampler.sample(1, &mut rng).elements).collect();
            let independent = (0..count).map(|_| sampler.sample(0, &mut rng).elements).collect();
            vec![("correlated", correlated), ("independent", independent)]
        }
        Task::Counting => {
            let sets = harness::sample_sets(config, count, config.seed, domain::EXPORT, 0)?;
            vec![("counting", sets.into_iter().map(|e| e.elements).collect())]
        }
    };
    let mut summaries = serde_json::Map::new();
    for (name, sets) in &groups {
        let exported = export::export_kernel(&model, &ckpt.params, sets, &out, name, args.per_set)?;
        if let Some(s) = &exported.summary {
            println!(
                "{name}: mean K top off-diagonal {:?} = {:.6}, flat: {}",
                s.top_pair, s.top_value, s.flat
            );
        }
        summaries.insert(name.to_string(), serde_json::to_value(&exported)?);
    }
    write_json(&out.join("kernel_summary.json"), &serde_json::Value::Object(summaries))?;
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<bool, DmpsError> {
    fs::create_dir_all(&args.out)?;
    let fault = match args.inject_fault {
        Some(FaultArg::UnnormalizedWeights) => verify::Fault::UnnormalizedWeights,
        None => verify::Fault::None,
    };
    let report = harness::run_invariant_suite(fault, &args.out.join("verify-scratch"));
    for c in &report.checks {
        println!("{:4}  {}/{}  {}", if c.passed { "ok" } else { "FAIL" }, c.module, c.name, c.detail);
    }
    report.write_json(&args.out.join("report.json"))?;
    println!("{} of {} checks passed", report.total - report.failed, report.total);
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SweepRho(a) => sweep(a, false),
        Command::SweepGamma(a) => sweep(a, true),
        Command::ExportKernel(a) => export_kernel(a),
        Command::Verify(a) => match run_verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::PrintDefaults { task } => harness::annotated_defaults((*task).into()).map(|text| print!("{text}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
