//! Gaussian process regression, one independent model per objective.
//!
//! Models work internally on inputs mapped to the unit cube and outputs
//! standardized to zero mean and unit variance; every public method that takes
//! or returns design points or objective values uses original units.

use std::cell::RefCell;
use std::f64::consts::PI;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, solve_lower_mut};
use crate::rng::Rng;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Box-shaped design domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DesignSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid("bounds must be non-empty and of equal length"));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!("bound {i}: need finite lower < upper")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(d: usize) -> Self {
        Self {
            lower: vec![0.0; d],
            upper: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (v - l) / (u - l))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, h))| l + v * (h - l))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Uniform random point.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + rng.random::<f64>() * (u - l))
            .collect()
    }
}

/// Observed designs and noisy objective values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// Observation noise variance shared by all objectives.
    pub noise_var: f64,
    /// Optional per-objective override of `noise_var`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_noise: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, noise_var: f64) -> Result<Self> {
        let data = Self {
            x,
            y,
            noise_var,
            objective_noise: None,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn empty(noise_var: f64) -> Self {
        Self {
            x: Vec::new(),
            y: Vec::new(),
            noise_var,
            objective_noise: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(Error::invalid("X and Y row counts differ"));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::invalid("noise variance must be finite and >= 0"));
        }
        if let Some(first) = self.x.first() {
            if self.x.iter().any(|r| r.len() != first.len()) {
                return Err(Error::invalid("ragged X"));
            }
        }
        if let Some(first) = self.y.first() {
            if self.y.iter().any(|r| r.len() != first.len()) {
                return Err(Error::invalid("ragged Y"));
            }
        }
        let finite = |rows: &[Vec<f64>]| rows.iter().flatten().all(|v| v.is_finite());
        if !finite(&self.x) || !finite(&self.y) {
            return Err(Error::invalid("dataset entries must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn n_objectives(&self) -> usize {
        self.y.first().map_or(0, |r| r.len())
    }

    pub fn noise_for(&self, objective: usize) -> f64 {
        self.objective_noise
            .as_ref()
            .and_then(|v| v.get(objective).copied())
            .unwrap_or(self.noise_var)
    }

    pub fn column(&self, objective: usize) -> Vec<f64> {
        self.y.iter().map(|r| r[objective]).collect()
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) {
        self.x.push(x);
        self.y.push(y);
    }
}

/// Matérn-5/2 kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.lengthscales.is_empty()
            && self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite())
            && self.signal_var > 0.0
            && self.signal_var.is_finite()
            && self.noise_var >= 0.0
            && self.noise_var.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("hyperparameters need lengthscales > 0, signal_var > 0, noise_var >= 0"))
        }
    }

    fn inv_lengthscales(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / l).collect()
    }
}

#[inline]
fn matern_from_r2(r2: f64, signal_var: f64) -> f64 {
    let r = r2.sqrt();
    signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

#[inline]
pub(crate) fn scaled_sqdist(a: &[f64], b: &[f64], inv_ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let t = (a[i] - b[i]) * inv_ls[i];
        s += t * t;
    }
    s
}

/// Anisotropic Matérn-5/2 covariance between two points.
pub fn matern52(x: &[f64], x2: &[f64], hyper: &GpHyperparams) -> Result<f64> {
    hyper.validate()?;
    if x.len() != x2.len() || x.len() != hyper.lengthscales.len() {
        return Err(Error::invalid("dimension mismatch in kernel evaluation"));
    }
    if x.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite kernel input"));
    }
    let r2 = scaled_sqdist(x, x2, &hyper.inv_lengthscales());
    Ok(matern_from_r2(r2, hyper.signal_var))
}

/// Kernel evaluator with precomputed inverse lengthscales.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    inv_ls: Vec<f64>,
    signal_var: f64,
}

impl Kernel {
    fn new(hyper: &GpHyperparams) -> Self {
        Self {
            inv_ls: hyper.inv_lengthscales(),
            signal_var: hyper.signal_var,
        }
    }

    #[inline]
    pub(crate) fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        matern_from_r2(scaled_sqdist(a, b, &self.inv_ls), self.signal_var)
    }

    /// `k(A, B)` as an `|A| x |B|` matrix.
    pub(crate) fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j]))
    }

    /// Symmetric Gram matrix `k(A, A)`.
    pub(crate) fn gram(&self, a: &[Vec<f64>]) -> DMatrix<f64> {
        let n = a.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = self.signal_var;
            for i in (j + 1)..n {
                let v = self.eval(&a[i], &a[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `[ln l_1, ..., ln l_d, ln signal_var, ln noise_var]`.
struct Evidence {
    n: usize,
    /// Per-dimension squared differences, each `n x n`.
    sq: Vec<DMatrix<f64>>,
    y: DVector<f64>,
}

struct EvidenceValue {
    value: f64,
    grad: Vec<f64>,
}

impl Evidence {
    fn new(x: &[Vec<f64>], y: &[f64]) -> Self {
        let n = x.len();
        let d = x.first().map_or(0, |r| r.len());
        let sq = (0..d)
            .map(|i| DMatrix::from_fn(n, n, |a, b| (x[a][i] - x[b][i]).powi(2)))
            .collect();
        Self {
            n,
            sq,
            y: DVector::from_column_slice(y),
        }
    }

    fn eval(&self, hyper: &GpHyperparams, with_grad: bool) -> Result<EvidenceValue> {
        let n = self.n;
        let d = self.sq.len();
        let inv_l2: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let sf2 = hyper.signal_var;
        let mut k = DMatrix::zeros(n, n);
        // dK/dr factor: sf2 * 5/3 * (1 + sqrt5 r) exp(-sqrt5 r)
        let mut g = if with_grad { DMatrix::zeros(n, n) } else { DMatrix::zeros(0, 0) };
        for b in 0..n {
            for a in b..n {
                let mut r2 = 0.0;
                for i in 0..d {
                    r2 += self.sq[i][(a, b)] * inv_l2[i];
                }
                let r = r2.sqrt();
                let e = (-SQRT5 * r).exp();
                let kv = sf2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * e;
                k[(a, b)] = kv;
                k[(b, a)] = kv;
                if with_grad {
                    let gv = sf2 * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e;
                    g[(a, b)] = gv;
                    g[(b, a)] = gv;
                }
            }
        }
        let mut ky = k.clone();
        for i in 0..n {
            ky[(i, i)] += hyper.noise_var;
        }
        let (l, _jitter) = cholesky_jittered(&ky)?;
        let mut alpha = DMatrix::from_column_slice(n, 1, self.y.as_slice());
        solve_lower_mut(&l, &mut alpha);
        let data_fit = alpha.norm_squared();
        let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        let value = -0.5 * data_fit - log_det - 0.5 * n as f64 * (2.0 * PI).ln();
        if !with_grad {
            return Ok(EvidenceValue {
                value,
                grad: Vec::new(),
            });
        }
        let mut alpha = alpha.column(0).into_owned();
        let _ = l.tr_solve_lower_triangular_mut(&mut alpha);
        // K^{-1} = L^{-T} L^{-1}
        let mut linv = DMatrix::identity(n, n);
        solve_lower_mut(&l, &mut linv);
        let kinv = linv.transpose() * &linv;
        let w = &alpha * alpha.transpose() - kinv;
        let mut grad = Vec::with_capacity(d + 2);
        for i in 0..d {
            let mut s = 0.0;
            for b in 0..n {
                for a in 0..n {
                    s += w[(a, b)] * g[(a, b)] * self.sq[i][(a, b)];
                }
            }
            grad.push(0.5 * s * inv_l2[i]);
        }
        grad.push(0.5 * w.component_mul(&k).sum());
        grad.push(0.5 * hyper.noise_var * w.trace());
        Ok(EvidenceValue { value, grad })
    }
}

fn check_objective(data: &Dataset, objective: usize) -> Result<()> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if objective >= data.n_objectives() {
        return Err(Error::invalid(format!("objective index {objective} out of range")));
    }
    Ok(())
}

/// Log marginal likelihood of objective `objective` under `hyper`, evaluated
/// on the raw (untransformed) dataset with a zero prior mean.
pub fn log_marginal_likelihood(hyper: &GpHyperparams, data: &Dataset, objective: usize) -> Result<f64> {
    Ok(log_marginal_likelihood_with_grad(hyper, data, objective)?.0)
}

/// Same as [`log_marginal_likelihood`] plus the gradient with respect to the
/// log-parameters `[ln l_1, ..., ln l_d, ln signal_var, ln noise_var]`.
pub fn log_marginal_likelihood_with_grad(
    hyper: &GpHyperparams,
    data: &Dataset,
    objective: usize,
) -> Result<(f64, Vec<f64>)> {
    check_objective(data, objective)?;
    hyper.validate()?;
    if hyper.lengthscales.len() != data.x[0].len() {
        return Err(Error::invalid("lengthscale count differs from input dimension"));
    }
    let ev = Evidence::new(&data.x, &data.column(objective)).eval(hyper, true)?;
    Ok((ev.value, ev.grad))
}

/// Options for [`fit_gp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: u64,
    pub learn_noise: bool,
    pub grad_tol: f64,
    /// Extra start tried first, typically the previous iteration's optimum.
    pub warm_start: Option<GpHyperparams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 200,
            learn_noise: false,
            grad_tol: 1e-5,
            warm_start: None,
        }
    }
}

// Search box in log space (unit-cube inputs, standardized outputs).
const LN_LS: (f64, f64) = (-6.907_755_278_982_137, 4.605_170_185_988_092); // [1e-3, 1e2]
const LN_SF2: (f64, f64) = (-9.210_340_371_976_182, 4.605_170_185_988_092); // [1e-4, 1e2]
const LN_NOISE: (f64, f64) = (-18.420_680_743_952_367, 0.0); // [1e-8, 1]
const PENALTY: f64 = 100.0;

struct FitProblem<'a> {
    evidence: &'a Evidence,
    d: usize,
    fixed_noise: Option<f64>,
    memo: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
}

impl FitProblem<'_> {
    fn hyper(&self, p: &[f64]) -> GpHyperparams {
        GpHyperparams {
            lengthscales: p[..self.d].iter().map(|v| v.exp()).collect(),
            signal_var: p[self.d].exp(),
            noise_var: self.fixed_noise.unwrap_or_else(|| p[self.d + 1].exp()),
        }
    }

    fn bounds(&self, i: usize) -> (f64, f64) {
        if i < self.d {
            LN_LS
        } else if i == self.d {
            LN_SF2
        } else {
            LN_NOISE
        }
    }

    /// Negative log evidence plus a quadratic penalty outside the search box.
    fn eval(&self, p: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        if let Some((q, c, g)) = self.memo.borrow().as_ref() {
            if q.as_slice() == p {
                return Ok((*c, g.clone()));
            }
        }
        let hyper = self.hyper(p);
        let ev = self
            .evidence
            .eval(&hyper, true)
            .map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        let mut cost = -ev.value;
        let mut grad: Vec<f64> = ev.grad[..p.len()].iter().map(|g| -g).collect();
        for (i, v) in p.iter().enumerate() {
            let (lo, hi) = self.bounds(i);
            let excess = if *v < lo {
                v - lo
            } else if *v > hi {
                v - hi
            } else {
                0.0
            };
            cost += PENALTY * excess * excess;
            grad[i] += 2.0 * PENALTY * excess;
        }
        if !cost.is_finite() {
            return Err(argmin::core::Error::msg("non-finite evidence"));
        }
        *self.memo.borrow_mut() = Some((p.to_vec(), cost, grad.clone()));
        Ok((cost, grad))
    }
}

impl CostFunction for FitProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p)?.0)
    }
}

impl Gradient for FitProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p)?.1)
    }
}

fn run_lbfgs(problem: FitProblem<'_>, init: Vec<f64>, opts: &FitOptions) -> Option<(Vec<f64>, f64)> {
    let start_cost = problem.eval(&init).ok()?.0;
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
        .with_tolerance_grad(opts.grad_tol)
        .ok()?
        .with_tolerance_cost(1e-7)
        .ok()?;
    let result = Executor::new(problem, solver)
        .configure(|state| state.param(init.clone()).max_iters(opts.max_iters))
        .run();
    match result {
        Ok(res) => {
            let state = res.state();
            match state.get_best_param() {
                Some(p) if state.get_best_cost().is_finite() => Some((p.clone(), state.get_best_cost())),
                _ => Some((init, start_cost)),
            }
        }
        Err(_) => Some((init, start_cost)),
    }
}

/// A fitted GP posterior for one objective.
#[derive(Debug, Clone)]
pub struct GpModel {
    hyper: GpHyperparams,
    space: DesignSpace,
    /// Training inputs in unit-cube coordinates.
    train_u: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    /// `[K + tau^2 I]^{-1} y` in standardized units.
    alpha: DVector<f64>,
    /// Lower Cholesky factor of `K + (tau^2 + jitter) I`.
    chol: DMatrix<f64>,
    jitter: f64,
    kernel: Kernel,
}

/// Output standardization constants `(mean, std)`.
fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 * (1.0 + mean.abs()) {
        (mean, std)
    } else {
        (mean, 1.0)
    }
}

/// Fits the hyperparameters of one objective's GP by maximizing the log
/// marginal likelihood from several starting points.
pub fn fit_gp(
    data: &Dataset,
    space: &DesignSpace,
    objective: usize,
    opts: &FitOptions,
    rng: &mut Rng,
) -> Result<GpModel> {
    check_objective(data, objective)?;
    if data.x[0].len() != space.dim() {
        return Err(Error::invalid("dataset dimension differs from design space"));
    }
    let d = space.dim();
    let train_u: Vec<Vec<f64>> = data.x.iter().map(|x| space.to_unit(x)).collect();
    let y = data.column(objective);
    let (y_mean, y_std) = standardize(&y);
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
    let noise_std = data.noise_for(objective) / (y_std * y_std);
    if noise_std == 0.0 && !opts.learn_noise && has_duplicate_rows(&train_u) {
        return Err(Error::IllConditioned(
            "duplicate design rows with zero observation noise".into(),
        ));
    }
    let evidence = Evidence::new(&train_u, &ys);
    let fixed_noise = if opts.learn_noise { None } else { Some(noise_std) };
    let n_params = d + 1 + usize::from(opts.learn_noise);

    let sample_var = ys.iter().map(|v| v * v).sum::<f64>() / ys.len() as f64;
    let mut starts = Vec::with_capacity(opts.restarts.max(1) + 1);
    if let Some(w) = &opts.warm_start {
        if w.lengthscales.len() == d {
            let mut p: Vec<f64> = w.lengthscales.iter().map(|l| l.ln()).collect();
            p.push(w.signal_var.ln());
            if opts.learn_noise {
                p.push(w.noise_var.ln());
            }
            if p.iter().all(|v| v.is_finite()) {
                starts.push(p);
            }
        }
    }
    let mut heuristic = vec![0.5_f64.ln(); d];
    heuristic.push(sample_var.max(1e-4).ln());
    if opts.learn_noise {
        heuristic.push(noise_std.clamp(1e-6, 1e-1).ln());
    }
    starts.push(heuristic);
    for _ in 1..opts.restarts.max(1) {
        let mut p: Vec<f64> = (0..d)
            .map(|_| rng.random_range(0.05_f64.ln()..5.0_f64.ln()))
            .collect();
        p.push(rng.random_range(0.1_f64.ln()..10.0_f64.ln()));
        if opts.learn_noise {
            p.push(rng.random_range(1e-6_f64.ln()..1e-1_f64.ln()));
        }
        starts.push(p);
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for init in starts {
        debug_assert_eq!(init.len(), n_params);
        let problem = FitProblem {
            evidence: &evidence,
            d,
            fixed_noise,
            memo: RefCell::new(None),
        };
        if let Some((p, c)) = run_lbfgs(problem, init, opts) {
            if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
                best = Some((p, c));
            }
        }
    }
    let (p, _) = best.ok_or_else(|| {
        Error::IllConditioned("marginal likelihood could not be evaluated at any start".into())
    })?;
    let problem = FitProblem {
        evidence: &evidence,
        d,
        fixed_noise,
        memo: RefCell::new(None),
    };
    let hyper = problem.hyper(&p);
    GpModel::assemble(hyper, space.clone(), train_u, &ys, y_mean, y_std)
}

fn has_duplicate_rows(rows: &[Vec<f64>]) -> bool {
    let mut keys: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort();
    keys.windows(2).any(|w| w[0] == w[1])
}

impl GpModel {
    /// Builds a model from known hyperparameters, expressed in the model's
    /// internal units (unit-cube inputs, standardized outputs).
    pub fn from_hyperparams(
        data: &Dataset,
        space: &DesignSpace,
        objective: usize,
        hyper: GpHyperparams,
    ) -> Result<Self> {
        check_objective(data, objective)?;
        hyper.validate()?;
        if hyper.lengthscales.len() != space.dim() || data.x[0].len() != space.dim() {
            return Err(Error::invalid("dimension mismatch between data, space and hyperparameters"));
        }
        let train_u: Vec<Vec<f64>> = data.x.iter().map(|x| space.to_unit(x)).collect();
        let y = data.column(objective);
        let (y_mean, y_std) = standardize(&y);
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        Self::assemble(hyper, space.clone(), train_u, &ys, y_mean, y_std)
    }

    /// Rebuilds the factorization for new data while keeping hyperparameters.
    pub fn refit_data(&self, data: &Dataset, objective: usize) -> Result<Self> {
        let mut hyper = self.hyper.clone();
        let (_, y_std) = standardize(&data.column(objective));
        // keep the physical noise level fixed across the change of output scale
        let physical = self.hyper.noise_var * self.y_std * self.y_std;
        hyper.noise_var = physical / (y_std * y_std);
        Self::from_hyperparams(data, &self.space, objective, hyper)
    }

    fn assemble(
        hyper: GpHyperparams,
        space: DesignSpace,
        train_u: Vec<Vec<f64>>,
        ys: &[f64],
        y_mean: f64,
        y_std: f64,
    ) -> Result<Self> {
        let kernel = Kernel::new(&hyper);
        let mut k = kernel.gram(&train_u);
        for i in 0..train_u.len() {
            k[(i, i)] += hyper.noise_var;
        }
        let (chol, jitter) = cholesky_jittered(&k)?;
        let mut alpha = DVector::from_column_slice(ys);
        let _ = chol.solve_lower_triangular_mut(&mut alpha);
        let _ = chol.tr_solve_lower_triangular_mut(&mut alpha);
        Ok(Self {
            hyper,
            space,
            train_u,
            y_mean,
            y_std,
            alpha,
            chol,
            jitter,
            kernel,
        })
    }

    /// Hyperparameters in internal units (unit-cube inputs, standardized outputs).
    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn n_train(&self) -> usize {
        self.train_u.len()
    }

    /// `(mean, std)` used to standardize outputs.
    pub fn output_scaling(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn train_unit(&self) -> &[Vec<f64>] {
        &self.train_u
    }

    pub(crate) fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub(crate) fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    fn check_query(&self, xq: &[Vec<f64>]) -> Result<()> {
        let d = self.space.dim();
        for x in xq {
            if x.len() != d {
                return Err(Error::invalid(format!("query has dimension {}, expected {d}", x.len())));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite query"));
            }
        }
        Ok(())
    }

    /// Standardized posterior mean at unit-cube points.
    pub(crate) fn mean_std_unit(&self, u: &[f64]) -> f64 {
        self.train_u
            .iter()
            .zip(self.alpha.iter())
            .map(|(t, a)| self.kernel.eval(u, t) * a)
            .sum()
    }

    /// `L^{-1} k(X_n, U)`, the whitened cross-covariance (`n x N`).
    pub(crate) fn whitened_cross(&self, u: &[Vec<f64>]) -> DMatrix<f64> {
        let mut v = self.kernel.cross(&self.train_u, u);
        solve_lower_mut(&self.chol, &mut v);
        v
    }

    /// Standardized posterior mean and covariance at unit-cube points.
    pub(crate) fn posterior_std_unit(&self, u: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let mean = DVector::from_iterator(u.len(), u.iter().map(|p| self.mean_std_unit(p)));
        let v = self.whitened_cross(u);
        let mut cov = self.kernel.gram(u) - v.transpose() * &v;
        let n = u.len();
        for j in 0..n {
            for i in (j + 1)..n {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
            if cov[(j, j)] < 0.0 {
                cov[(j, j)] = 0.0;
            }
        }
        (mean, cov)
    }

    /// Standardized posterior cross-covariance `Sigma(U, V)` (no clamping).
    pub(crate) fn posterior_cross_std_unit(&self, u: &[Vec<f64>], v: &[Vec<f64>]) -> DMatrix<f64> {
        let wu = self.whitened_cross(u);
        let wv = self.whitened_cross(v);
        self.kernel.cross(u, v) - wu.transpose() * wv
    }

    pub(crate) fn destandardize(&self, v: f64) -> f64 {
        self.y_mean + self.y_std * v
    }

    /// Posterior mean and covariance at the query points, in original units.
    /// Negative variances from round-off are clamped to zero.
    pub fn posterior(&self, xq: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_query(xq)?;
        let u: Vec<Vec<f64>> = xq.iter().map(|x| self.space.to_unit(x)).collect();
        let (mean, cov) = self.posterior_std_unit(&u);
        let s2 = self.y_std * self.y_std;
        Ok((mean.map(|m| self.destandardize(m)), cov * s2))
    }

    /// Posterior mean at a single point, in original units.
    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        self.check_query(std::slice::from_ref(&x.to_vec()))?;
        Ok(self.destandardize(self.mean_std_unit(&self.space.to_unit(x))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    fn hyper(ls: &[f64], sf2: f64, noise: f64) -> GpHyperparams {
        GpHyperparams {
            lengthscales: ls.to_vec(),
            signal_var: sf2,
            noise_var: noise,
        }
    }

    #[test]
    fn matern_zero_distance_is_signal_var() {
        let h = hyper(&[0.3, 2.0], 1.7, 0.0);
        assert_eq!(matern52(&[0.1, 0.2], &[0.1, 0.2], &h).unwrap(), 1.7);
    }

    #[test]
    fn matern_at_one_lengthscale() {
        // (1 + sqrt5 + 5/3) exp(-sqrt5), evaluated independently in f64.
        let expected = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        let h = hyper(&[0.4], 1.0, 0.0);
        let v = matern52(&[0.1], &[0.5], &h).unwrap();
        assert!((v - expected).abs() < 1e-14);
        // the quoted 5-decimal figure is a rounding of 0.5239941
        assert!((v - 0.524_00).abs() < 1e-5);
    }

    #[test]
    fn matern_decays_and_rejects_nan() {
        let h = hyper(&[1.0], 1.0, 0.0);
        assert!(matern52(&[0.0], &[50.0], &h).unwrap() < 1e-20);
        assert!(matern52(&[f64::NAN], &[0.0], &h).is_err());
        assert!(matern52(&[0.0, 1.0], &[0.0], &h).is_err());
    }

    #[test]
    fn matern_is_symmetric() {
        let h = hyper(&[0.3, 0.9, 2.0], 2.0, 0.0);
        let a = [0.1, 0.7, -0.3];
        let b = [0.4, 0.2, 0.9];
        assert_eq!(matern52(&a, &b, &h).unwrap(), matern52(&b, &a, &h).unwrap());
    }

    #[test]
    fn single_point_evidence() {
        let data = Dataset::new(vec![vec![0.3]], vec![vec![0.0]], 0.0).unwrap();
        let v = log_marginal_likelihood(&hyper(&[1.0], 1.0, 0.0), &data, 0).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_targets_leave_only_log_det() {
        let x = vec![vec![0.0], vec![0.3], vec![0.9]];
        let data = Dataset::new(x.clone(), vec![vec![0.0]; 3], 0.1).unwrap();
        let h = hyper(&[0.5], 1.3, 0.1);
        let v = log_marginal_likelihood(&h, &data, 0).unwrap();
        let mut k = DMatrix::from_fn(3, 3, |i, j| matern52(&x[i], &x[j], &h).unwrap());
        for i in 0..3 {
            k[(i, i)] += 0.1;
        }
        let det = (k * (2.0 * PI)).determinant();
        assert!((v + 0.5 * det.ln()).abs() < 1e-12);
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let mut rng = stream(3, tag::TEST, 0);
        let x: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random(), rng.random()]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|p| vec![(3.0 * p[0]).sin() + p[1]]).collect();
        let data = Dataset::new(x, y, 0.05).unwrap();
        let h = hyper(&[0.4, 0.8], 1.2, 0.05);
        let (_, grad) = log_marginal_likelihood_with_grad(&h, &data, 0).unwrap();
        let ln = |p: &[f64]| {
            let h = hyper(&[p[0].exp(), p[1].exp()], p[2].exp(), p[3].exp());
            log_marginal_likelihood(&h, &data, 0).unwrap()
        };
        let p0 = [0.4f64.ln(), 0.8f64.ln(), 1.2f64.ln(), 0.05f64.ln()];
        for i in 0..4 {
            let step = 1e-5;
            let mut hi = p0;
            let mut lo = p0;
            hi[i] += step;
            lo[i] -= step;
            let fd = (ln(&hi) - ln(&lo)) / (2.0 * step);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn flat_data_gives_small_signal() {
        let data = Dataset::new(vec![vec![0.2], vec![0.8]], vec![vec![3.0], vec![3.0]], 1e-3).unwrap();
        let space = DesignSpace::unit(1);
        let m = fit_gp(&data, &space, 0, &FitOptions::default(), &mut stream(1, tag::TEST, 0)).unwrap();
        assert!(m.hyperparams().signal_var < 1e-2);
        let (mean, _) = m.posterior(&[vec![0.0], vec![0.5], vec![1.0]]).unwrap();
        for v in mean.iter() {
            assert!((v - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_rows_without_noise_are_rejected() {
        let data = Dataset::new(vec![vec![0.2], vec![0.2]], vec![vec![1.0], vec![2.0]], 0.0).unwrap();
        let r = fit_gp(&data, &DesignSpace::unit(1), 0, &FitOptions::default(), &mut stream(1, tag::TEST, 0));
        assert!(matches!(r, Err(Error::IllConditioned(_))));
    }

    #[test]
    fn posterior_rejects_wrong_dimension() {
        let data = Dataset::new(vec![vec![0.2], vec![0.7]], vec![vec![1.0], vec![2.0]], 1e-3).unwrap();
        let m = GpModel::from_hyperparams(&data, &DesignSpace::unit(1), 0, hyper(&[0.3], 1.0, 1e-3)).unwrap();
        assert!(m.posterior(&[vec![0.1, 0.2]]).is_err());
    }

    #[test]
    fn design_space_round_trip() {
        let s = DesignSpace::new(vec![-5.0, 0.0], vec![10.0, 15.0]).unwrap();
        let x = vec![2.5, 7.5];
        let u = s.to_unit(&x);
        assert_eq!(u, vec![0.5, 0.5]);
        assert_eq!(s.from_unit(&u), x);
        assert!(DesignSpace::new(vec![1.0], vec![1.0]).is_err());
    }
}
