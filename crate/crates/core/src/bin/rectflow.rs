use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rectflow::config::ExperimentConfig;
use rectflow::pipeline::{Run, StepStatus};
use rectflow::reflow::PairDataset;
use rectflow::{Error, Result};

#[derive(Parser)]
#[command(name = "rectflow", version, about = "Rectified flow, reflow and one-step distillation on toy targets")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulation and metrics.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Stage id inside the run directory, e.g. v2 or v2-distill.
    #[arg(long)]
    stage: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Euler steps (ignored by distilled stages).
    #[arg(long, default_value_t = 25)]
    steps: usize,
    /// Guidance scale; defaults to the stage's own.
    #[arg(long)]
    alpha: Option<f64>,
    /// Restrict to one condition label.
    #[arg(long)]
    condition: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base flow v1.
    TrainBase,
    /// Generate coupling pairs from a flow stage.
    GenPairs {
        #[arg(long, default_value = "v1")]
        stage: String,
    },
    /// Train v_{k+1} on the pairs of v_k.
    Reflow {
        #[arg(long, default_value_t = 1)]
        from: u32,
    },
    /// Distill a flow stage into a one-step model.
    Distill {
        #[arg(long)]
        teacher: String,
    },
    /// Evaluate every stage and write the comparison tables.
    Eval,
    /// Draw samples from a stage.
    Sample(SampleArgs),
    /// Export full Euler trajectories as CSV and SVG.
    ExportTraj(SampleArgs),
    /// Run every stage, skipping completed ones.
    Pipeline,
    /// Configuration helpers.
    #[command(subcommand)]
    Config(ConfigCommand),
    /// Pair file helpers.
    #[command(subcommand)]
    Pairs(PairsCommand),
    /// Target distribution helpers.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Print the default config as TOML.
    PrintDefault,
}

#[derive(Subcommand)]
enum PairsCommand {
    /// Print the metadata of a pair file.
    Info { path: PathBuf },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write n target samples per condition to data-preview.csv.
    Preview {
        #[arg(long, default_value_t = 500)]
        n: usize,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(step: &str, status: StepStatus) {
    match status {
        StepStatus::Ran => println!("{step}: done"),
        StepStatus::Skipped => println!("{step}: up to date"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Config(ConfigCommand::PrintDefault) => {
            print!("{}", ExperimentConfig::default().to_toml());
            return Ok(());
        }
        Command::Pairs(PairsCommand::Info { path }) => {
            let pairs = PairDataset::load(path)?;
            println!("{}", serde_json::to_string_pretty(&pairs.meta)?);
            return Ok(());
        }
        _ => {}
    }
    if cli.global.threads == 0 {
        return Err(Error::usage("--threads must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| Error::usage(e.to_string()))?;
    let run = Run::new(load_config(&cli.global)?)?;
    match cli.command {
        Command::TrainBase => report("train-base", run.train_base()?),
        Command::GenPairs { stage } => report("gen-pairs", run.gen_pairs(&stage)?),
        Command::Reflow { from } => report("reflow", run.reflow(from)?),
        Command::Distill { teacher } => report("distill", run.distill(&teacher)?),
        Command::Eval => report("eval", run.eval()?),
        Command::Sample(a) => report("sample", run.sample(&a.stage, a.n, a.steps, a.alpha, a.condition)?),
        Command::ExportTraj(a) => report("export-traj", run.export_traj(&a.stage, a.n, a.steps, a.alpha, a.condition)?),
        Command::Pipeline => {
            for (step, status) in run.pipeline()? {
                report(&step, status);
            }
        }
        Command::Data(DataCommand::Preview { n }) => report("data-preview", run.data_preview(n)?),
        Command::Config(_) | Command::Pairs(_) => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECTFLOW_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
