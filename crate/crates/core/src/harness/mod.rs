//! Experiment orchestration: seeded repetitions run on a worker pool, with
//! per-repetition checkpoints, CSV histories and an ask/tell protocol for
//! oracles that live outside the process.
//!
//! Output layout under `<output_dir>/<policy>/`:
//!
//! ```text
//! experiment.toml          resolved configuration
//! history.csv events.jsonl summary.csv
//! rep<r>/state.json        checkpoint, rewritten after every batch
//! rep<r>/history.csv rep<r>/events.jsonl rep<r>/archive.csv rep<r>/observations.csv
//! ```

mod checkpoint;
mod config;
mod output;
mod protocol;

use std::path::{Path, PathBuf};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, OracleSpec,
    CHECKPOINT_VERSION,
};
pub use config::{load_config, parse_config, ExperimentConfig, EXTERNAL, OUTPUT_DIR_ENV};
pub use output::{mean_std, point_header, read_objectives, write_points, RepFiles, HISTORY_HEADER, SUMMARY_HEADER};
pub use protocol::{ask, format_proposals, parse_observations, tell, AskRow, TellRow};

use crate::acquisition::BoState;
use crate::error::{Error, Result};
use crate::oracle::Oracle;
use crate::par;

/// Result of one repetition.
#[derive(Debug)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub result: Result<BoState>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub reps: Vec<RepOutcome>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> impl Iterator<Item = (usize, &Error)> {
        self.reps.iter().filter_map(|r| r.result.as_ref().err().map(|e| (r.rep, e)))
    }

    pub fn completed(&self) -> impl Iterator<Item = (usize, &BoState)> {
        self.reps.iter().filter_map(|r| r.result.as_ref().ok().map(|s| (r.rep, s)))
    }
}

/// Directory holding the outputs of `cfg`.
pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(cfg.policy.name())
}

fn rep_files(dir: &Path, rep: usize) -> RepFiles {
    RepFiles::new(dir.join(format!("rep{rep}")), rep)
}

/// Runs every repetition of a benchmark experiment on up to `workers`
/// threads (`None` = all cores). A failing repetition does not stop the
/// others; it is reported in the outcome and left out of the merged files.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let benchmark = cfg
        .benchmark()?
        .ok_or_else(|| Error::config("benchmark", "external problems are driven with ask/tell"))?;
    let dir = experiment_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("experiment.toml"), cfg.to_toml()?)?;
    let source = OracleSpec::Benchmark {
        benchmark,
        noise_var: cfg.noise_var,
    };
    let reps = par::with_workers(workers, || {
        par::map_range(cfg.repetitions, |rep| {
            let result = cfg.loop_config(rep).and_then(BoState::new).and_then(|state| {
                let cp = Checkpoint {
                    rep,
                    oracle: source.clone(),
                    state,
                };
                continue_run(cp, &rep_files(&dir, rep))
            });
            if let Err(e) = &result {
                log::error!("repetition {rep} failed: {e}");
            }
            RepOutcome {
                rep,
                seed: cfg.rep_seed(rep),
                result,
            }
        })
    });
    let outcome = ExperimentOutcome { dir, reps };
    let done: Vec<(usize, &BoState)> = outcome.completed().collect();
    output::write_merged(&outcome.dir, &done)?;
    Ok(outcome)
}

/// Steps a checkpointed run to the end of its budget, checkpointing after
/// every batch so an abort leaves the last good state on disk.
fn continue_run(mut cp: Checkpoint, files: &RepFiles) -> Result<BoState> {
    let mut oracle = cp
        .oracle
        .oracle(&cp.state)
        .ok_or_else(|| Error::Protocol("run has an external oracle; use ask/tell".into()))?;
    files.reset(&cp.state)?;
    save_checkpoint(&files.state(), &cp)?;
    step_all(&mut cp, files, &mut oracle)?;
    files.finish(&cp.state)?;
    Ok(cp.state)
}

fn step_all(cp: &mut Checkpoint, files: &RepFiles, oracle: &mut dyn Oracle) -> Result<()> {
    if cp.state.pending.is_some() {
        return Err(Error::Protocol("a batch is pending; finish it with tell".into()));
    }
    while !cp.state.is_done() {
        cp.state.step(oracle)?;
        files.append(cp.state.history.records.last().expect("step adds a record"))?;
        save_checkpoint(&files.state(), cp)?;
    }
    Ok(())
}

/// Continues the repetition checkpointed at `state_path` to completion. When
/// the file sits in an experiment directory, the merged outputs are rebuilt
/// from every finished repetition.
pub fn resume(state_path: &Path) -> Result<BoState> {
    let cp = load_checkpoint(state_path)?;
    let rep_dir = state_path.parent().unwrap_or(Path::new("."));
    let state = continue_run(cp.clone(), &RepFiles::new(rep_dir, cp.rep))?;
    if let Some(dir) = rep_dir.parent() {
        let config = dir.join("experiment.toml");
        if config.exists() {
            remerge(dir, &load_config(&config)?)?;
        }
    }
    Ok(state)
}

/// Rebuilds the merged outputs from the finished repetitions on disk.
fn remerge(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut done = Vec::new();
    for rep in 0..cfg.repetitions {
        let path = rep_files(dir, rep).state();
        match load_checkpoint(&path) {
            Ok(cp) if cp.state.is_done() => done.push((rep, cp.state)),
            Ok(_) => log::warn!("repetition {rep} is unfinished"),
            Err(e) => log::warn!("repetition {rep}: {e}"),
        }
    }
    let refs: Vec<(usize, &BoState)> = done.iter().map(|(r, s)| (*r, s)).collect();
    output::write_merged(dir, &refs)
}

/// Creates one fresh state file per repetition of an external-oracle
/// experiment and returns their paths. Drive each with [`ask`] and [`tell`].
pub fn init_external(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = experiment_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("experiment.toml"), cfg.to_toml()?)?;
    let mut paths = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let state = BoState::new(cfg.loop_config(rep)?)?;
        let files = rep_files(&dir, rep);
        files.reset(&state)?;
        let cp = Checkpoint {
            rep,
            oracle: OracleSpec::External,
            state,
        };
        save_checkpoint(&files.state(), &cp)?;
        paths.push(files.state());
    }
    Ok(paths)
}
