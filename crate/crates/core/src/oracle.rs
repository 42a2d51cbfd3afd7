//! Expensive black-box interface consumed by the optimization loop.

use crate::benchmarks::Benchmark;
use crate::error::Result;
use crate::rng::{stream, tag};

/// An expensive vector-valued function.
///
/// `index` is the zero-based position of the evaluation in the run; noisy
/// oracles derive their noise from it so results do not depend on call order.
/// `Ok(None)` reports a failed evaluation.
pub trait Oracle {
    fn n_objectives(&self) -> usize;
    fn evaluate(&mut self, index: usize, x: &[f64]) -> Result<Option<Vec<f64>>>;
}

/// A synthetic benchmark observed with Gaussian noise.
///
/// Seed-design evaluations (`index < n_seed`) draw noise from a stream that
/// depends only on the repetition seed; later evaluations use a separate
/// stream, so every policy sees the same seed data.
#[derive(Debug, Clone)]
pub struct BenchmarkOracle {
    pub benchmark: Benchmark,
    pub noise_var: f64,
    pub seed: u64,
    pub n_seed: usize,
}

impl Oracle for BenchmarkOracle {
    fn n_objectives(&self) -> usize {
        self.benchmark.k
    }

    fn evaluate(&mut self, index: usize, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let mut rng = if index < self.n_seed {
            stream(self.seed, tag::SEED_NOISE, index as u64)
        } else {
            stream(self.seed, tag::ORACLE_NOISE, index as u64)
        };
        self.benchmark.observe(x, self.noise_var, &mut rng).map(Some)
    }
}

/// Replays recorded values; used to check that externally supplied
/// observations reproduce an in-process run.
#[derive(Debug, Clone)]
pub struct ReplayOracle {
    pub k: usize,
    pub values: Vec<Option<Vec<f64>>>,
}

impl Oracle for ReplayOracle {
    fn n_objectives(&self) -> usize {
        self.k
    }

    fn evaluate(&mut self, index: usize, _x: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(self.values.get(index).cloned().flatten())
    }
}

/// Wraps a closure `f(index, x)`.
pub struct FnOracle<F> {
    pub k: usize,
    pub f: F,
}

impl<F> Oracle for FnOracle<F>
where
    F: FnMut(usize, &[f64]) -> Option<Vec<f64>>,
{
    fn n_objectives(&self) -> usize {
        self.k
    }

    fn evaluate(&mut self, index: usize, x: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok((self.f)(index, x))
    }
}
