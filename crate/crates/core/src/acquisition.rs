//! The qPOTS policy and the optimization loop state it shares with the
//! baselines.
//!
//! One iteration draws a posterior sample path per objective, solves the
//! multiobjective problem on the paths with NSGA-II and takes a batch from
//! the predicted Pareto set by greedy maximin distance to the observed
//! designs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::gp::{fit_gp, Dataset, DesignSpace, FitOptions, GpHyperparams, GpModel};
use crate::nsga2::{nsga2_run, BatchObjective, EAConfig};
use crate::oracle::Oracle;
use crate::par;
use crate::pareto::{auto_reference, nondominated_filter, ParetoArchive};
use crate::paths::{make_paths, PathConfig, PathRoute, PathState};
use crate::rng::{child_seed, stream, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Qpots,
    Sobol,
    ScalarizedTs,
}

impl Policy {
    pub const NAMES: [&'static str; 3] = ["qpots", "sobol", "scalarized-ts"];

    pub fn name(self) -> &'static str {
        match self {
            Self::Qpots => "qpots",
            Self::Sobol => "sobol",
            Self::ScalarizedTs => "scalarized-ts",
        }
    }

    pub fn needs_models(self) -> bool {
        !matches!(self, Self::Sobol)
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qpots" => Ok(Self::Qpots),
            "sobol" => Ok(Self::Sobol),
            "scalarized-ts" => Ok(Self::ScalarizedTs),
            _ => Err(Error::config(
                "policy",
                format!("unknown policy `{s}` (expected one of {})", Self::NAMES.join(", ")),
            )),
        }
    }
}

/// Coordinates in which maximin distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaximinSpace {
    Unit,
    Raw,
}

/// Where a batch point came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Row of the candidate set the point was taken from.
    pub index: usize,
    /// Its minimum distance to the observed and already selected points;
    /// `None` when there is nothing to measure against or the policy does
    /// not use distances.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionBatch {
    pub points: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy maximin batch from `candidates`.
///
/// Point `j` maximizes the minimum Euclidean distance to `observed` and the
/// `j - 1` points already chosen; ties go to the lowest candidate index. A
/// `q` larger than the candidate count is clamped.
pub fn maximin_select(
    candidates: &[Vec<f64>],
    observed: &[Vec<f64>],
    q: usize,
    space: &DesignSpace,
    metric: MaximinSpace,
) -> Result<AcquisitionBatch> {
    if candidates.is_empty() {
        return Err(Error::invalid("maximin selection from an empty candidate set"));
    }
    if q == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let q = if q > candidates.len() {
        log::warn!("maximin: q = {q} exceeds {} candidates; clamping", candidates.len());
        candidates.len()
    } else {
        q
    };
    let map = |x: &Vec<f64>| match metric {
        MaximinSpace::Unit => space.to_unit(x),
        MaximinSpace::Raw => x.clone(),
    };
    let cand: Vec<Vec<f64>> = candidates.iter().map(map).collect();
    let obs: Vec<Vec<f64>> = observed.iter().map(map).collect();
    let mut min_d: Vec<f64> = par::map(&cand, |c| {
        obs.iter().map(|o| sq_dist(c, o)).fold(f64::INFINITY, f64::min)
    });
    let mut taken = vec![false; cand.len()];
    let mut batch = AcquisitionBatch {
        points: Vec::with_capacity(q),
        provenance: Vec::with_capacity(q),
    };
    for _ in 0..q {
        let mut best: Option<usize> = None;
        for i in 0..cand.len() {
            if !taken[i] && best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("q is clamped to the candidate count");
        taken[b] = true;
        batch.points.push(candidates[b].clone());
        batch.provenance.push(Provenance {
            index: b,
            distance: Some(min_d[b].sqrt()).filter(|v| v.is_finite()),
        });
        let chosen = cand[b].clone();
        for (i, c) in cand.iter().enumerate() {
            if !taken[i] {
                min_d[i] = min_d[i].min(sq_dist(c, &chosen));
            }
        }
    }
    Ok(batch)
}

/// The K sample paths as one vector-valued objective.
pub struct PathObjective<'m> {
    pub paths: Vec<PathState<'m>>,
}

impl BatchObjective for PathObjective<'_> {
    fn n_objectives(&self) -> usize {
        self.paths.len()
    }

    fn eval_batch(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let cols = par::map_mut(&mut self.paths, |p| p.values(xs));
        let cols: Vec<Vec<f64>> = cols.into_iter().collect::<Result<_>>()?;
        Ok((0..xs.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
    }
}

/// Pareto set and path values of one inner solve.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub archive: ParetoArchive,
    pub route: PathRoute,
    pub evaluations: usize,
}

/// Nondominated observed designs, used to warm-start the inner solver.
pub fn incumbents(data: &Dataset) -> Vec<Vec<f64>> {
    nondominated_filter(&data.y).into_iter().map(|i| data.x[i].clone()).collect()
}

/// Solves the multiobjective problem on one fresh path per model.
pub fn solve_inner_moo(
    models: &[GpModel],
    data: &Dataset,
    space: &DesignSpace,
    ea: &EAConfig,
    paths: &PathConfig,
    rng: &mut Rng,
) -> Result<InnerSolution> {
    let seeds: Vec<u64> = models.iter().map(|_| child_seed(rng)).collect();
    let ea_seed = child_seed(rng);
    solve_inner_with_seeds(models, data, space, ea, paths, &seeds, ea_seed)
}

/// As [`solve_inner_moo`] with explicit path and solver seeds.
pub fn solve_inner_with_seeds(
    models: &[GpModel],
    data: &Dataset,
    space: &DesignSpace,
    ea: &EAConfig,
    paths: &PathConfig,
    path_seeds: &[u64],
    ea_seed: u64,
) -> Result<InnerSolution> {
    let d = space.dim();
    let queries = ea.pop_size_for(d) * (ea.generations + 1);
    let states = make_paths(models, data, paths, queries, path_seeds)?;
    let route = states.first().map_or(PathRoute::Exact, |p| p.route());
    let mut obj = PathObjective { paths: states };
    let mut ea_rng = stream(ea_seed, tag::EA, 0);
    let res = nsga2_run(&mut obj, space, ea, &incumbents(data), &mut ea_rng, None)?;
    if res.archive.is_empty() {
        return Err(Error::invalid("inner solve returned an empty Pareto set"));
    }
    Ok(InnerSolution {
        archive: res.archive,
        route,
        evaluations: res.evaluations,
    })
}

/// Either a fixed HV reference point or one derived from the seed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RefPoint {
    Fixed(Vec<f64>),
    Auto(String),
}

impl RefPoint {
    pub fn auto() -> Self {
        Self::Auto("auto".into())
    }
}

/// Everything one repetition's loop needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub policy: Policy,
    pub space: DesignSpace,
    pub k: usize,
    pub n_seed: usize,
    pub budget: usize,
    pub q: usize,
    pub noise_var: f64,
    pub objective_noise: Option<Vec<f64>>,
    pub ea: EAConfig,
    pub paths: PathConfig,
    pub maximin_space: MaximinSpace,
    pub refit_every: usize,
    pub fit: FitOptions,
    /// Restarts for refits after the first, which also start from the
    /// previous optimum.
    pub refit_restarts: usize,
    pub reference: RefPoint,
    pub seed: u64,
    pub max_failure_fraction: f64,
    pub sobol_shift: bool,
    /// Fixed scalarization weights for the scalarized baseline.
    pub weights_override: Option<Vec<f64>>,
}

impl LoopConfig {
    pub fn new(policy: Policy, space: DesignSpace, k: usize, n_seed: usize, budget: usize, seed: u64) -> Self {
        Self {
            policy,
            space,
            k,
            n_seed,
            budget,
            q: 1,
            noise_var: 1e-3,
            objective_noise: None,
            ea: EAConfig::default(),
            paths: PathConfig::default(),
            maximin_space: MaximinSpace::Unit,
            refit_every: 1,
            fit: FitOptions::default(),
            refit_restarts: 1,
            reference: RefPoint::auto(),
            seed,
            max_failure_fraction: 0.1,
            sobol_shift: false,
            weights_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K", "must be at least 1"));
        }
        if self.n_seed == 0 {
            return Err(Error::config("n_seed", "must be at least 1"));
        }
        if self.budget < self.n_seed {
            return Err(Error::config("budget", "must be at least n_seed"));
        }
        if self.q == 0 {
            return Err(Error::config("q", "must be at least 1"));
        }
        if self.refit_every == 0 {
            return Err(Error::config("refit_every", "must be at least 1"));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::config("noise_var", "must be >= 0"));
        }
        if let Some(n) = &self.objective_noise {
            if n.len() != self.k || n.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::config("objective_noise", "needs K nonnegative entries"));
            }
        }
        if let RefPoint::Fixed(r) = &self.reference {
            if r.len() != self.k {
                return Err(Error::config("ref_point", format!("needs {} entries", self.k)));
            }
        }
        if let RefPoint::Auto(s) = &self.reference {
            if s != "auto" {
                return Err(Error::config("ref_point", "expected a list of numbers or \"auto\""));
            }
        }
        self.ea.validate()
    }

    fn seed_design(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, tag::SEED_DESIGN, 0);
        (0..self.n_seed).map(|_| self.space.sample(&mut rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalKind {
    Seed,
    Step,
}

/// Points waiting for observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub kind: ProposalKind,
    /// Evaluation index of the first point; ids are consecutive.
    pub first_id: usize,
    pub points: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    pub route: Option<PathRoute>,
}

impl Proposal {
    pub fn ids(&self) -> std::ops::Range<usize> {
        self.first_id..self.first_id + self.points.len()
    }
}

/// One row of a run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0 for the seed design, then one per acquisition step.
    pub iteration: usize,
    /// Cumulative evaluations, failed ones included.
    pub evaluations: usize,
    pub hv: f64,
    pub points: Vec<Vec<f64>>,
    /// `None` marks a failed evaluation.
    pub observations: Vec<Option<Vec<f64>>>,
    pub provenance: Vec<Provenance>,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<IterationRecord>,
    pub archive: ParetoArchive,
}

/// Loop state of one repetition. Models are not serialized; they are
/// rebuilt from the stored hyperparameters on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoState {
    pub config: LoopConfig,
    pub data: Dataset,
    /// Designs whose evaluation failed; excluded from training.
    pub failed: Vec<Vec<f64>>,
    pub hypers: Vec<GpHyperparams>,
    /// Completed acquisition steps.
    pub iteration: usize,
    pub evaluations: usize,
    pub reference: Option<Vec<f64>>,
    pub history: RunHistory,
    pub pending: Option<Proposal>,
    #[serde(skip)]
    models: Vec<GpModel>,
}

impl PartialEq for BoState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.data == other.data
            && self.failed == other.failed
            && self.hypers == other.hypers
            && self.iteration == other.iteration
            && self.evaluations == other.evaluations
            && self.reference == other.reference
            && self.history == other.history
            && self.pending == other.pending
    }
}

impl BoState {
    pub fn new(config: LoopConfig) -> Result<Self> {
        config.validate()?;
        let mut data = Dataset::empty(config.noise_var);
        data.objective_noise = config.objective_noise.clone();
        Ok(Self {
            config,
            data,
            failed: Vec::new(),
            hypers: Vec::new(),
            iteration: 0,
            evaluations: 0,
            reference: None,
            history: RunHistory::default(),
            pending: None,
            models: Vec::new(),
        })
    }

    pub fn models(&self) -> &[GpModel] {
        &self.models
    }

    pub fn is_done(&self) -> bool {
        self.evaluations >= self.config.budget
    }

    pub fn archive(&self) -> ParetoArchive {
        ParetoArchive::from_points(&self.data.x, &self.data.y)
    }

    /// Rebuilds the models from `hypers` after deserialization.
    pub fn restore_models(&mut self) -> Result<()> {
        self.models = if self.hypers.is_empty() {
            Vec::new()
        } else {
            (0..self.config.k)
                .map(|k| GpModel::from_hyperparams(&self.data, &self.config.space, k, self.hypers[k].clone()))
                .collect::<Result<_>>()?
        };
        Ok(())
    }

    /// Proposes the next batch: the seed design first, then policy steps.
    pub fn propose(&mut self) -> Result<Proposal> {
        if self.pending.is_some() {
            return Err(Error::Protocol("a batch is already pending".into()));
        }
        if self.is_done() {
            return Err(Error::Protocol("evaluation budget exhausted".into()));
        }
        let proposal = if self.evaluations == 0 {
            Proposal {
                kind: ProposalKind::Seed,
                first_id: 0,
                points: self.config.seed_design(),
                provenance: Vec::new(),
                route: None,
            }
        } else {
            let q = self.config.q.min(self.config.budget - self.evaluations);
            let mut rng = stream(self.config.seed, tag::ITERATION, self.iteration as u64);
            let (batch, route) = match self.config.policy {
                Policy::Qpots => {
                    let (b, r) = self.qpots_batch(q, &mut rng)?;
                    (b, Some(r))
                }
                Policy::Sobol => (baselines::sobol_batch(self, q)?, None),
                Policy::ScalarizedTs => (baselines::scalarized_batch(self, q, &mut rng)?, None),
            };
            Proposal {
                kind: ProposalKind::Step,
                first_id: self.evaluations,
                points: batch.points,
                provenance: batch.provenance,
                route,
            }
        };
        self.pending = Some(proposal.clone());
        Ok(proposal)
    }

    fn qpots_batch(&self, q: usize, rng: &mut Rng) -> Result<(AcquisitionBatch, PathRoute)> {
        let cfg = &self.config;
        let t = Instant::now();
        let inner = solve_inner_moo(&self.models, &self.data, &cfg.space, &cfg.ea, &cfg.paths, rng)?;
        log::debug!(
            "iteration {}: inner solve {:.3}s, {} candidates, route {:?}",
            self.iteration,
            t.elapsed().as_secs_f64(),
            inner.archive.len(),
            inner.route
        );
        let mut sites = self.data.x.clone();
        sites.extend(self.failed.iter().cloned());
        let batch = maximin_select(&inner.archive.x, &sites, q, &cfg.space, cfg.maximin_space)?;
        Ok((batch, inner.route))
    }

    /// Adds observations for the pending batch and refits the models.
    pub fn incorporate(&mut self, observations: Vec<Option<Vec<f64>>>, wallclock_s: f64) -> Result<()> {
        let proposal = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("no pending batch to incorporate".into()))?;
        if observations.len() != proposal.points.len() {
            let n = proposal.points.len();
            self.pending = Some(proposal);
            return Err(Error::Protocol(format!("expected {n} observations, got {}", observations.len())));
        }
        for y in observations.iter().flatten() {
            if y.len() != self.config.k {
                self.pending = Some(proposal);
                return Err(Error::Protocol(format!("observation with {} objectives, expected {}", y.len(), self.config.k)));
            }
        }
        let mut observations = observations;
        for (x, y) in proposal.points.iter().zip(observations.iter_mut()) {
            match y {
                Some(v) if v.iter().all(|e| e.is_finite()) => self.data.push(x.clone(), v.clone()),
                _ => {
                    *y = None;
                    self.failed.push(x.clone());
                }
            }
        }
        self.evaluations += proposal.points.len();
        if proposal.kind == ProposalKind::Step {
            self.iteration += 1;
        }
        if self.data.is_empty() {
            return Err(Error::Oracle("every seed evaluation failed".into()));
        }
        if self.reference.is_none() {
            self.reference = Some(match &self.config.reference {
                RefPoint::Fixed(r) => r.clone(),
                RefPoint::Auto(_) => auto_reference(&self.data.y),
            });
        }
        let limit = self.config.max_failure_fraction * self.config.budget as f64;
        if self.failed.len() as f64 > limit {
            return Err(Error::Oracle(format!(
                "{} failed evaluations exceed {:.0}% of the budget of {}",
                self.failed.len(),
                100.0 * self.config.max_failure_fraction,
                self.config.budget
            )));
        }
        if self.config.policy.needs_models() {
            let t = Instant::now();
            self.update_models()?;
            log::debug!("iteration {}: model update {:.3}s", self.iteration, t.elapsed().as_secs_f64());
        }
        let archive = self.archive();
        let reference = self.reference.as_ref().expect("set above");
        let hv = archive.hypervolume(reference)?;
        self.history.records.push(IterationRecord {
            iteration: if proposal.kind == ProposalKind::Seed { 0 } else { self.iteration },
            evaluations: self.evaluations,
            hv,
            points: proposal.points,
            observations,
            provenance: proposal.provenance,
            wallclock_s,
        });
        self.history.archive = archive;
        Ok(())
    }

    fn update_models(&mut self) -> Result<()> {
        let it = self.iteration;
        let full = self.models.is_empty() || it % self.config.refit_every == 0;
        let mut models = Vec::with_capacity(self.config.k);
        for k in 0..self.config.k {
            let m = if full {
                let mut opts = self.config.fit.clone();
                if let Some(prev) = self.hypers.get(k) {
                    opts.restarts = self.config.refit_restarts;
                    opts.warm_start = Some(prev.clone());
                }
                let mut rng = stream(self.config.seed, tag::GP_FIT, (it * self.config.k + k) as u64);
                fit_gp(&self.data, &self.config.space, k, &opts, &mut rng)?
            } else {
                self.models[k].refit_data(&self.data, k)?
            };
            models.push(m);
        }
        self.hypers = models.iter().map(|m| m.hyperparams().clone()).collect();
        self.models = models;
        Ok(())
    }

    /// Proposes, evaluates with `oracle` and incorporates one batch.
    pub fn step(&mut self, oracle: &mut dyn Oracle) -> Result<()> {
        let t = Instant::now();
        let proposal = self.propose()?;
        let mut obs = Vec::with_capacity(proposal.points.len());
        for (id, x) in proposal.ids().zip(&proposal.points) {
            obs.push(oracle.evaluate(id, x)?);
        }
        self.incorporate(obs, t.elapsed().as_secs_f64())
    }
}

/// Runs the seed design and then steps until the budget is spent.
pub fn run_loop(config: LoopConfig, oracle: &mut dyn Oracle) -> Result<BoState> {
    let mut state = BoState::new(config)?;
    while !state.is_done() {
        state.step(oracle)?;
    }
    Ok(state)
}

/// [`run_loop`] with the qPOTS policy.
pub fn run_qpots(mut config: LoopConfig, oracle: &mut dyn Oracle) -> Result<RunHistory> {
    config.policy = Policy::Qpots;
    Ok(run_loop(config, oracle)?.history)
}
