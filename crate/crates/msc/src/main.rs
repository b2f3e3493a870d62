use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use msc::commands::{cmd_align, cmd_list, cmd_pretrain, cmd_probe, cmd_saliency, cmd_synth};
use msc::config::DimSelection;
use msc::report::write_report;
use msc::{Error, ExperimentConfig, Result};
use msc_core::eval::Task;

#[derive(Parser)]
#[command(name = "msc", version, about = "Multi-scale coordinated representation learning for paired volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    #[value(name = "2way")]
    TwoWay,
    #[value(name = "3way")]
    ThreeWay,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::TwoWay => Task::TwoWay,
            TaskArg::ThreeWay => Task::ThreeWay,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DimsArg {
    All,
    TopBeta,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest, atlas, volumes).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the configured objective; OUT becomes the experiment directory.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe every stored checkpoint and select one.
    Probe {
        experiment: PathBuf,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Cross-modal CKA of the selected checkpoint.
    Align { experiment: PathBuf },
    /// Integrated-gradient saliency, clusters, atlas overlap and link graph.
    Saliency {
        experiment: PathBuf,
        #[arg(long, value_enum)]
        dims: Option<DimsArg>,
    },
    /// Median and IQR across experiment directories, plus a plot.
    Report {
        #[arg(required = true)]
        experiments: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every model name: 15 taxonomy nodes and 5 baselines.
    List,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn task_of(experiment: &Path, task: Option<TaskArg>) -> Result<Task> {
    if let Some(t) = task {
        return Ok(t.into());
    }
    let path = experiment.join(msc::commands::CONFIG_FILE);
    if !path.exists() {
        return Err(Error::Missing { what: "experiment config", path, producer: "pretrain" });
    }
    let record: msc::commands::ExperimentRecord = msc::dataset::read_json(&path)?;
    Ok(record.config.eval.task)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            let path = cmd_synth(&load_config(config.as_deref(), seed)?, &out)?;
            println!("{}", path.display());
        }
        Command::Pretrain { config, fold, seed, out } => {
            let dir = cmd_pretrain(&load_config(config.as_deref(), seed)?, fold, &out)?;
            println!("{}", dir.display());
        }
        Command::Probe { experiment, task } => {
            let task = task_of(&experiment, task)?;
            let id = cmd_probe(&experiment, task)?;
            println!("selected checkpoint {id}");
        }
        Command::Align { experiment } => {
            println!("cka {}", cmd_align(&experiment)?);
        }
        Command::Saliency { experiment, dims } => {
            let dims = dims.map(|d| match d {
                DimsArg::All => DimSelection::All,
                DimsArg::TopBeta => DimSelection::TopBeta,
            });
            let s = cmd_saliency(&experiment, dims)?;
            println!("{} dimensions, {} clusters, {} edges", s.dims.len(), s.clusters, s.links.edges.len());
        }
        Command::Report { experiments, out } => {
            let rows = write_report(&experiments, &out)?;
            println!("{} rows written to {}", rows.len(), out.join("report.csv").display());
        }
        Command::List => {
            for (kind, name) in cmd_list() {
                println!("{kind}\t{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
