use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qpots::acquisition::Policy;
use qpots::harness;
use qpots::pareto::{hypervolume_value, nondominated_filter};
use qpots::{Error, Result};

#[derive(Parser)]
#[command(name = "qpots", version, about = "Batch Pareto optimal Thompson sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every repetition of an experiment (or create ask/tell state files
    /// when the benchmark is `external`).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the configured policy.
        #[arg(long)]
        policy: Option<String>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Propose the next batch as JSON lines.
    Ask {
        #[arg(long)]
        state: PathBuf,
        /// Write proposals here instead of stdout.
        #[arg(long)]
        proposals: Option<PathBuf>,
    },
    /// Report observations for the pending batch.
    Tell {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        obs: PathBuf,
    },
    /// Hypervolume of the y columns of an archive CSV.
    Hv {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long = "ref", value_delimiter = ',', allow_hyphen_values = true, required = true)]
        reference: Vec<f64>,
    },
    /// Continue a checkpointed repetition.
    Resume {
        #[arg(long)]
        state: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            workers,
            policy,
            out,
        } => {
            let mut cfg = harness::load_config(&config)?;
            if let Some(p) = policy {
                cfg.policy = p.parse::<Policy>()?;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            if cfg.is_external() {
                for p in harness::init_external(&cfg)? {
                    println!("{}", p.display());
                }
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = harness::run_experiment(&cfg, workers)?;
            for (rep, state) in outcome.completed() {
                let hv = state.history.records.last().map_or(f64::NAN, |r| r.hv);
                println!("rep {rep}: {} evaluations, hv {hv}", state.evaluations);
            }
            let mut code = ExitCode::SUCCESS;
            for (rep, e) in outcome.failures() {
                eprintln!("rep {rep} failed: {e}");
                if code == ExitCode::SUCCESS {
                    code = ExitCode::from(e.exit_code() as u8);
                }
            }
            println!("outputs in {}", outcome.dir.display());
            Ok(code)
        }
        Command::Ask { state, proposals } => {
            let text = harness::format_proposals(&harness::ask(&state)?)?;
            match proposals {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Tell { state, obs } => {
            let text = std::fs::read_to_string(&obs)?;
            harness::tell(&state, &harness::parse_observations(&text)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Hv { archive, reference } => {
            let y = harness::read_objectives(&archive)?;
            if y.first().is_some_and(|r| r.len() != reference.len()) {
                return Err(Error::InvalidArgument(format!(
                    "reference has {} entries, archive has {} objectives",
                    reference.len(),
                    y[0].len()
                )));
            }
            let front: Vec<Vec<f64>> = nondominated_filter(&y).into_iter().map(|i| y[i].clone()).collect();
            println!("{}", hypervolume_value(&front, &reference)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Resume { state } => {
            let s = harness::resume(&state)?;
            let hv = s.history.records.last().map_or(f64::NAN, |r| r.hv);
            println!("{} evaluations, hv {hv}", s.evaluations);
            Ok(ExitCode::SUCCESS)
        }
    }
}
