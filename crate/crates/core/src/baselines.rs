//! Comparison policies: Sobol quasi-random search and a random augmented
//! Chebyshev scalarization with Thompson sampling.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use sobol::params::JoeKuoD6;
use sobol::Sobol;

use crate::acquisition::{run_loop, AcquisitionBatch, BoState, LoopConfig, Policy, Provenance, RunHistory};
use crate::error::{Error, Result};
use crate::gp::DesignSpace;
use crate::nsga2::{nsga2_run, BatchObjective};
use crate::oracle::Oracle;
use crate::paths::{make_paths, PathState};
use crate::rng::{child_seed, stream, tag, Rng};

/// Largest dimension of the bundled direction-number table.
pub const SOBOL_MAX_DIM: usize = 1000;
const MINIMAL_TABLE_DIM: usize = 100;

/// Unscrambled Sobol sequence on `[0, 1)^d` that skips the origin, with an
/// optional random digital shift.
#[derive(Clone)]
pub struct SobolStream {
    dim: usize,
    index: u64,
    inner: Sobol<f64>,
    shift: Option<Vec<u64>>,
}

impl std::fmt::Debug for SobolStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SobolStream")
            .field("dim", &self.dim)
            .field("index", &self.index)
            .field("shift", &self.shift)
            .finish()
    }
}

const BITS: u32 = 53;

impl SobolStream {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > SOBOL_MAX_DIM {
            return Err(Error::invalid(format!("Sobol dimension {dim} outside 1..={SOBOL_MAX_DIM}")));
        }
        let params = if dim <= MINIMAL_TABLE_DIM {
            JoeKuoD6::minimal()
        } else {
            JoeKuoD6::standard()
        };
        let mut inner = Sobol::<f64>::new(dim, &params);
        // the first element is the origin
        inner.next();
        Ok(Self {
            dim,
            index: 0,
            inner,
            shift: None,
        })
    }

    /// A stream with a digital shift drawn from `rng`.
    pub fn shifted(dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut s = Self::new(dim)?;
        s.shift = Some((0..dim).map(|_| rng.random::<u64>() >> (64 - BITS)).collect());
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of points emitted so far.
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Advances past `n` points.
    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.next_unit();
        }
    }

    /// Next point in `[0, 1)^d`.
    pub fn next_unit(&mut self) -> Vec<f64> {
        let p = self.inner.next().expect("Sobol sequence exhausted");
        self.index += 1;
        match &self.shift {
            None => p,
            Some(s) => {
                let scale = (1u64 << BITS) as f64;
                p.iter()
                    .zip(s)
                    .map(|(v, m)| (((v * scale) as u64) ^ m) as f64 / scale)
                    .collect()
            }
        }
    }

    /// Next point mapped into `space`.
    pub fn next_in(&mut self, space: &DesignSpace) -> Vec<f64> {
        space.from_unit(&self.next_unit())
    }
}

/// Stream used by the Sobol policy of one repetition.
fn policy_stream(cfg: &LoopConfig) -> Result<SobolStream> {
    if cfg.sobol_shift {
        SobolStream::shifted(cfg.space.dim(), &mut stream(cfg.seed, tag::SEED_DESIGN, 1))
    } else {
        SobolStream::new(cfg.space.dim())
    }
}

/// Next `q` Sobol points. The stream position is the number of post-seed
/// evaluations, so no generator state needs to be stored.
pub(crate) fn sobol_batch(state: &BoState, q: usize) -> Result<AcquisitionBatch> {
    let cfg = &state.config;
    let mut s = policy_stream(cfg)?;
    s.skip((state.evaluations - cfg.n_seed.min(state.evaluations)) as u64);
    let points: Vec<Vec<f64>> = (0..q).map(|_| s.next_in(&cfg.space)).collect();
    let provenance = (0..q)
        .map(|i| Provenance {
            index: s.index() as usize - q + i,
            distance: None,
        })
        .collect();
    Ok(AcquisitionBatch { points, provenance })
}

/// Uniform draw from the probability simplex.
pub fn simplex_weights(k: usize, rng: &mut Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `max_k w_k f_k + 0.05 sum_k w_k f_k`.
pub fn augmented_chebyshev(w: &[f64], f: &[f64]) -> f64 {
    let weighted = w.iter().zip(f).map(|(a, b)| a * b);
    let max = weighted.clone().fold(f64::NEG_INFINITY, f64::max);
    max + 0.05 * weighted.sum::<f64>()
}

struct ScalarizedPaths<'m> {
    paths: Vec<PathState<'m>>,
    scaling: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl BatchObjective for ScalarizedPaths<'_> {
    fn n_objectives(&self) -> usize {
        1
    }

    fn eval_batch(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let cols = crate::par::map_mut(&mut self.paths, |p| p.values(xs));
        let cols: Vec<Vec<f64>> = cols.into_iter().collect::<Result<_>>()?;
        Ok((0..xs.len())
            .map(|i| {
                let f: Vec<f64> = cols
                    .iter()
                    .zip(&self.scaling)
                    .map(|(c, (m, s))| (c[i] - m) / s)
                    .collect();
                vec![augmented_chebyshev(&self.weights, &f)]
            })
            .collect())
    }
}

/// `q` minimizers of independently weighted scalarizations of fresh
/// posterior paths.
pub(crate) fn scalarized_batch(state: &BoState, q: usize, rng: &mut Rng) -> Result<AcquisitionBatch> {
    let cfg = &state.config;
    let models = state.models();
    let d = cfg.space.dim();
    let queries = cfg.ea.pop_size_for(d) * (cfg.ea.generations + 1);
    let incumbents = crate::acquisition::incumbents(&state.data);
    let mut batch = AcquisitionBatch {
        points: Vec::with_capacity(q),
        provenance: Vec::with_capacity(q),
    };
    for _ in 0..q {
        let mut wrng = stream(child_seed(rng), tag::WEIGHTS, 0);
        let weights = match &cfg.weights_override {
            Some(w) if w.len() == cfg.k => w.clone(),
            Some(_) => return Err(Error::config("weights_override", "needs K entries")),
            None => simplex_weights(cfg.k, &mut wrng),
        };
        let seeds: Vec<u64> = models.iter().map(|_| child_seed(rng)).collect();
        let paths = make_paths(models, &state.data, &cfg.paths, queries, &seeds)?;
        let mut obj = ScalarizedPaths {
            paths,
            scaling: models.iter().map(|m| m.output_scaling()).collect(),
            weights,
        };
        let mut ea_rng = stream(child_seed(rng), tag::EA, 0);
        let res = nsga2_run(&mut obj, &cfg.space, &cfg.ea, &incumbents, &mut ea_rng, None)?;
        let x = res
            .archive
            .x
            .first()
            .cloned()
            .ok_or_else(|| Error::invalid("scalarized solve returned no point"))?;
        let u = cfg.space.to_unit(&x);
        let dist = state
            .data
            .x
            .iter()
            .chain(&state.failed)
            .chain(&batch.points)
            .map(|o| {
                let v = cfg.space.to_unit(o);
                u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        batch.provenance.push(Provenance {
            index: batch.points.len(),
            distance: Some(dist).filter(|v| v.is_finite()),
        });
        batch.points.push(x);
    }
    Ok(batch)
}

pub fn run_sobol(mut config: LoopConfig, oracle: &mut dyn Oracle) -> Result<RunHistory> {
    config.policy = Policy::Sobol;
    Ok(run_loop(config, oracle)?.history)
}

pub fn run_scalarized_ts(mut config: LoopConfig, oracle: &mut dyn Oracle) -> Result<RunHistory> {
    config.policy = Policy::ScalarizedTs;
    Ok(run_loop(config, oracle)?.history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::Benchmark;
    use crate::nsga2::EAConfig;
    use crate::oracle::BenchmarkOracle;

    #[test]
    fn first_points_in_two_dimensions() {
        let mut s = SobolStream::new(2).unwrap();
        let pts: Vec<Vec<f64>> = (0..4).map(|_| s.next_unit()).collect();
        assert_eq!(
            pts,
            vec![vec![0.5, 0.5], vec![0.75, 0.25], vec![0.25, 0.75], vec![0.375, 0.375]]
        );
    }

    #[test]
    fn dyadic_net_in_one_dimension() {
        // the origin counts toward the first 2^k points of the full sequence
        for k in 1..=10u32 {
            let n = 1usize << k;
            let mut s = SobolStream::new(1).unwrap();
            let mut pts = vec![0.0];
            pts.extend((1..n).map(|_| s.next_unit()[0]));
            let mut counts = vec![0usize; n];
            for p in pts {
                counts[(p * n as f64).floor() as usize] += 1;
            }
            assert!(counts.iter().all(|&c| c == 1), "k = {k}");
        }
    }

    #[test]
    fn streams_are_deterministic_and_bounded() {
        let mut a = SobolStream::new(7).unwrap();
        let mut b = SobolStream::new(7).unwrap();
        for _ in 0..200 {
            let p = a.next_unit();
            assert_eq!(p, b.next_unit());
            assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
        }
        assert!(SobolStream::new(0).is_err());
        assert!(SobolStream::new(SOBOL_MAX_DIM + 1).is_err());
        assert!(SobolStream::new(64).is_ok());
    }

    #[test]
    fn skipping_matches_stepping() {
        let mut a = SobolStream::new(3).unwrap();
        let mut b = SobolStream::new(3).unwrap();
        for _ in 0..17 {
            a.next_unit();
        }
        b.skip(17);
        assert_eq!(a.next_unit(), b.next_unit());
    }

    #[test]
    fn digital_shift_stays_in_cube() {
        let mut s = SobolStream::shifted(3, &mut stream(1, tag::TEST, 0)).unwrap();
        for _ in 0..100 {
            assert!(s.next_unit().iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    #[test]
    fn simplex_weights_sum_to_one() {
        let mut rng = stream(2, tag::TEST, 0);
        for k in 1..5 {
            let w = simplex_weights(k, &mut rng);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|v| *v >= 0.0));
        }
        assert_eq!(simplex_weights(1, &mut rng), vec![1.0]);
    }

    #[test]
    fn chebyshev_values() {
        assert_eq!(augmented_chebyshev(&[1.0, 0.0], &[2.0, 5.0]), 2.0 + 0.05 * 2.0);
        assert_eq!(augmented_chebyshev(&[0.5, 0.5], &[2.0, 4.0]), 2.0 + 0.05 * 3.0);
    }

    fn config(policy: Policy) -> LoopConfig {
        let mut c = LoopConfig::new(policy, DesignSpace::unit(2), 2, 6, 12, 3);
        c.ea = EAConfig {
            pop_size: Some(30),
            generations: 10,
            ..EAConfig::default()
        };
        c.fit.restarts = 2;
        c
    }

    fn oracle() -> BenchmarkOracle {
        BenchmarkOracle {
            benchmark: Benchmark::by_name("branin-currin", None).unwrap(),
            noise_var: 0.0,
            seed: 3,
            n_seed: 6,
        }
    }

    #[test]
    fn sobol_run_is_monotone_and_repeatable() {
        let a = run_sobol(config(Policy::Sobol), &mut oracle()).unwrap();
        let b = run_sobol(config(Policy::Sobol), &mut oracle()).unwrap();
        for w in a.records.windows(2) {
            assert!(w[1].hv >= w[0].hv);
        }
        let strip = |h: &RunHistory| h.records.iter().map(|r| (r.hv, r.points.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        let mut s = SobolStream::new(2).unwrap();
        assert_eq!(a.records[1].points[0], s.next_unit());
    }

    #[test]
    fn forced_weights_track_first_objective() {
        // dense noise-free seed data pins the posterior, so the path minimum
        // of objective 1 sits at its true minimizer 0.2
        let mut c = LoopConfig::new(Policy::ScalarizedTs, DesignSpace::unit(1), 2, 15, 16, 5);
        c.noise_var = 0.0;
        c.ea = EAConfig {
            pop_size: Some(20),
            generations: 30,
            ..EAConfig::default()
        };
        c.weights_override = Some(vec![1.0, 0.0]);
        let mut o = crate::oracle::FnOracle {
            k: 2,
            f: |_: usize, x: &[f64]| Some(vec![(x[0] - 0.2).powi(2), (x[0] - 0.8).powi(2)]),
        };
        let st = run_loop(c, &mut o).unwrap();
        let x = st.history.records.last().unwrap().points[0][0];
        assert!((x - 0.2).abs() < 0.05, "acquired {x}");
    }

    #[test]
    fn scalarized_single_objective_runs() {
        let mut c = LoopConfig::new(Policy::ScalarizedTs, DesignSpace::unit(1), 1, 4, 6, 1);
        c.ea = EAConfig {
            pop_size: Some(20),
            generations: 10,
            ..EAConfig::default()
        };
        let mut o = crate::oracle::FnOracle {
            k: 1,
            f: |_: usize, x: &[f64]| Some(vec![(x[0] - 0.3).powi(2)]),
        };
        let st = run_loop(c, &mut o).unwrap();
        assert_eq!(st.evaluations, 6);
    }
}
