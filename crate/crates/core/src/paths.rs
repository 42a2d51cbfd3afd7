//! Posterior sample paths `Y(., omega) = mu(.) + Sigma^{1/2}(.) Z(omega)`.
//!
//! A [`PathState`] is one realization of a fitted GP posterior. Three routes
//! are available:
//!
//! * exact: every new batch is drawn from the posterior conditioned on the
//!   training data *and* every value this path already produced, so the
//!   path is a single coherent function. Cost grows with the cache.
//! * low-rank: the Nyström square root over a fixed inducing set with one
//!   latent draw `z`, giving a finite-rank path that is consistent for free.
//! * per-generation: every call is an independent joint draw.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{Dataset, GpModel};
use crate::linalg::{asymmetry, cholesky_jittered, cholesky_jittered_floor, psd_inverse_sqrt, solve_lower_mut};
use crate::par;
use crate::pareto::nondominated_filter;
use crate::rng::Rng;

/// Default batch size above which per-batch draws switch to Nyström.
pub const DEFAULT_NYSTROM_THRESHOLD: usize = 256;
/// Default bound on the number of points one exact path may cache.
pub const DEFAULT_CACHE_CAP: usize = 50_000;
const MIN_PATH_NUGGET: f64 = 1e-12;
const MAX_PATH_NUGGET: f64 = 1e-4;
/// Floor on the jitter scale of conditional covariances (standardized units).
/// Conditional variances of a densely cached path sit at roundoff level, so
/// the jitter ladder must reach well above it (up to `1e-4 * floor`).
const COND_JITTER_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqrtMethod {
    ExactCholesky,
    Nystrom,
}

/// A matrix `F` with `F F^T` approximating a covariance matrix.
#[derive(Debug, Clone)]
pub struct SqrtFactor {
    pub factor: DMatrix<f64>,
    pub method: SqrtMethod,
    pub inducing_count: usize,
    /// Set when the inducing block was singular and pseudo-inverted.
    pub pseudo_inverse: bool,
}

impl SqrtFactor {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }
}

/// Cholesky square root with the jitter policy.
pub fn exact_sqrt(cov: &DMatrix<f64>) -> Result<SqrtFactor> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::invalid("covariance must be square"));
    }
    if asymmetry(cov) > 1e-8 {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let (factor, _) = cholesky_jittered(cov)?;
    let n = factor.ncols();
    Ok(SqrtFactor {
        factor,
        method: SqrtMethod::ExactCholesky,
        inducing_count: n,
        pseudo_inverse: false,
    })
}

/// Nyström square root `F = Sigma_Nm Sigma_mm^{-1/2}` (`N x m`).
///
/// `cov_mn` holds the rows of the full covariance at the inducing points and
/// `cov_mm` its principal inducing block. Costs `O(m^3 + N m^2)`.
pub fn nystrom_sqrt(cov_mn: &DMatrix<f64>, cov_mm: &DMatrix<f64>) -> Result<SqrtFactor> {
    let m = cov_mm.nrows();
    if cov_mm.ncols() != m || cov_mn.nrows() != m {
        return Err(Error::invalid("inducing block shapes disagree"));
    }
    match cholesky_jittered(cov_mm) {
        Ok((l, _)) => {
            // F^T = L^{-1} Sigma_mN
            let mut ft = cov_mn.clone();
            solve_lower_mut(&l, &mut ft);
            Ok(SqrtFactor {
                factor: ft.transpose(),
                method: SqrtMethod::Nystrom,
                inducing_count: m,
                pseudo_inverse: false,
            })
        }
        Err(Error::IllConditioned(_)) => {
            log::warn!("nystrom: singular inducing block, using pseudo-inverse square root");
            let s = psd_inverse_sqrt(cov_mm, 1e-12);
            Ok(SqrtFactor {
                factor: cov_mn.transpose() * s,
                method: SqrtMethod::Nystrom,
                inducing_count: m,
                pseudo_inverse: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Indices of the nondominated observations, used as Nyström inducing points.
pub fn select_inducing(data: &Dataset) -> Vec<usize> {
    nondominated_filter(&data.y)
}

/// Inducing points in original units, falling back to every observation when
/// fewer than two are nondominated.
pub fn inducing_points(data: &Dataset) -> Vec<Vec<f64>> {
    let idx = select_inducing(data);
    if idx.len() < 2 {
        data.x.clone()
    } else {
        idx.iter().map(|&i| data.x[i].clone()).collect()
    }
}

fn standard_normal(rng: &mut Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

fn key(u: &[f64]) -> Vec<u64> {
    u.iter().map(|v| v.to_bits()).collect()
}

/// Cache of an exact consistent path (standardized units, unit-cube inputs).
#[derive(Debug, Clone)]
struct ExactCache {
    index: HashMap<Vec<u64>, usize>,
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    /// Lower Cholesky factor of the posterior covariance at the cached points.
    chol: DMatrix<f64>,
    /// Whitened residuals `chol^{-1} (values - mean)`.
    resid: DVector<f64>,
    /// `L_n^{-1} k(X_n, cached)`.
    whitened: DMatrix<f64>,
    cap: usize,
    /// Variance added to every cached value once plain conditioning breaks
    /// down numerically; starts at zero.
    nugget: f64,
    stale: bool,
}

impl ExactCache {
    fn new(n_train: usize, cap: usize) -> Self {
        Self {
            index: HashMap::new(),
            points: Vec::new(),
            values: Vec::new(),
            chol: DMatrix::zeros(0, 0),
            resid: DVector::zeros(0),
            whitened: DMatrix::zeros(n_train, 0),
            cap,
            nugget: 0.0,
            stale: false,
        }
    }

    fn extend(&mut self, model: &GpModel, batch: Vec<Vec<f64>>, rng: &mut Rng) -> Result<()> {
        let b = batch.len();
        let m = self.points.len();
        if m + b > self.cap {
            return Err(Error::CacheLimit(format!(
                "path would cache {} points (cap {}); use the Nyström route or a smaller inner budget",
                m + b,
                self.cap
            )));
        }
        let z = standard_normal(rng, b);
        loop {
            let attempt = if self.stale {
                self.rebuild(model)
            } else {
                match self.try_extend(model, &batch, &z) {
                    Ok(()) => break,
                    Err(e) => Err(e),
                }
            };
            match attempt {
                Ok(()) => {}
                Err(Error::IllConditioned(msg)) => {
                    if self.nugget >= MAX_PATH_NUGGET {
                        return Err(Error::IllConditioned(msg));
                    }
                    self.nugget = (self.nugget * 100.0).max(MIN_PATH_NUGGET);
                    log::debug!("exact path: raising nugget to {:e} at {m} cached points", self.nugget);
                    self.stale = true;
                }
                Err(e) => return Err(e),
            }
        }
        for (i, u) in batch.into_iter().enumerate() {
            self.index.insert(key(&u), m + i);
            self.points.push(u);
        }
        Ok(())
    }

    /// Refactors the cache covariance with the current nugget.
    fn rebuild(&mut self, model: &GpModel) -> Result<()> {
        let m = self.points.len();
        let mut cov = model.kernel().gram(&self.points) - self.whitened.transpose() * &self.whitened;
        for i in 0..m {
            cov[(i, i)] += self.nugget;
        }
        let (chol, _) = cholesky_jittered_floor(&crate::linalg::symmetrize(&cov), COND_JITTER_FLOOR)?;
        let mut resid = DVector::from_iterator(
            m,
            self.points.iter().zip(&self.values).map(|(u, v)| v - model.mean_std_unit(u)),
        );
        let _ = chol.solve_lower_triangular_mut(&mut resid);
        self.chol = chol;
        self.resid = resid;
        self.stale = false;
        Ok(())
    }

    /// Draws values for `batch` conditioned on the cache and appends them to
    /// the factor; leaves `self` untouched on failure.
    fn try_extend(&mut self, model: &GpModel, batch: &[Vec<f64>], z: &DVector<f64>) -> Result<()> {
        let b = batch.len();
        let m = self.points.len();
        let kern = model.kernel();
        let wb = model.whitened_cross(batch);
        let mean_b = DVector::from_iterator(b, batch.iter().map(|u| model.mean_std_unit(u)));
        let mut cov_bb = kern.gram(batch) - wb.transpose() * &wb;
        for i in 0..b {
            cov_bb[(i, i)] += self.nugget;
        }
        let (cond_mean, a) = if m > 0 {
            let cov_cb = kern.cross(&self.points, batch) - self.whitened.transpose() * &wb;
            let mut a = cov_cb;
            solve_lower_mut(&self.chol, &mut a);
            cov_bb -= a.transpose() * &a;
            (mean_b + a.transpose() * &self.resid, a)
        } else {
            (mean_b, DMatrix::zeros(0, b))
        };
        let cov_bb = crate::linalg::symmetrize(&cov_bb);
        let (lb, _) = cholesky_jittered_floor(&cov_bb, COND_JITTER_FLOOR)?;
        let vals = cond_mean + &lb * z;

        let mut chol = DMatrix::zeros(m + b, m + b);
        chol.view_mut((0, 0), (m, m)).copy_from(&self.chol);
        chol.view_mut((m, 0), (b, m)).copy_from(&a.transpose());
        chol.view_mut((m, m), (b, b)).copy_from(&lb);
        self.chol = chol;
        let mut resid = DVector::zeros(m + b);
        resid.rows_mut(0, m).copy_from(&self.resid);
        resid.rows_mut(m, b).copy_from(z);
        self.resid = resid;
        let n = self.whitened.nrows();
        let mut w = DMatrix::zeros(n, m + b);
        w.view_mut((0, 0), (n, m)).copy_from(&self.whitened);
        w.view_mut((0, m), (n, b)).copy_from(&wb);
        self.whitened = w;
        self.values.extend(vals.iter());
        Ok(())
    }
}

/// Finite-rank consistent path `mu(x) + Sigma(x, X_m) w` with
/// `w = Sigma_mm^{-1/2} z`, evaluated as a kernel expansion
/// `sum_j k(x, s_j) c_j` over training and inducing sites.
#[derive(Debug, Clone)]
struct LowRankPath {
    sites: Vec<Vec<f64>>,
    coef: Vec<f64>,
}

impl LowRankPath {
    fn new(model: &GpModel, inducing: Vec<Vec<f64>>, rng: &mut Rng) -> Result<Self> {
        let m = inducing.len();
        if m == 0 {
            return Err(Error::invalid("empty inducing set"));
        }
        let (_, cov_mm) = model.posterior_std_unit(&inducing);
        let z = standard_normal(rng, m);
        let w = match cholesky_jittered_floor(&cov_mm, COND_JITTER_FLOOR) {
            Ok((l, _)) => {
                let mut w = z;
                let _ = l.tr_solve_lower_triangular_mut(&mut w);
                w
            }
            Err(Error::IllConditioned(_)) => {
                log::warn!("low-rank path: singular inducing block, using pseudo-inverse");
                psd_inverse_sqrt(&cov_mm, 1e-12) * z
            }
            Err(e) => return Err(e),
        };
        // Sigma(x, X_m) w = k(x, X_m) w - k(x, X_n) K_n^{-1} k(X_n, X_m) w
        let mut kw = model.kernel().cross(model.train_unit(), &inducing) * &w;
        let l = model.chol();
        let _ = l.solve_lower_triangular_mut(&mut kw);
        let _ = l.tr_solve_lower_triangular_mut(&mut kw);
        let beta = model.alpha() - kw;

        let mut sites: Vec<Vec<f64>> = model.train_unit().to_vec();
        let mut coef: Vec<f64> = beta.iter().copied().collect();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        for (i, s) in sites.iter().enumerate() {
            index.entry(key(s)).or_insert(i);
        }
        for (u, wj) in inducing.into_iter().zip(w.iter()) {
            match index.get(&key(&u)) {
                Some(&i) => coef[i] += wj,
                None => {
                    index.insert(key(&u), sites.len());
                    sites.push(u);
                    coef.push(*wj);
                }
            }
        }
        Ok(Self { sites, coef })
    }

    fn value(&self, model: &GpModel, u: &[f64]) -> f64 {
        let kern = model.kernel();
        self.sites
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| kern.eval(u, s) * c)
            .sum()
    }
}

#[derive(Debug, Clone)]
enum Route {
    Exact(ExactCache),
    LowRank(LowRankPath),
    PerGeneration {
        inducing: Vec<Vec<f64>>,
        threshold: usize,
    },
}

/// Which construction a [`PathState`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathRoute {
    Exact,
    LowRank,
    PerGeneration,
}

/// One posterior sample path of one objective.
#[derive(Debug, Clone)]
pub struct PathState<'m> {
    model: &'m GpModel,
    route: Route,
    rng: Rng,
}

impl<'m> PathState<'m> {
    /// Exact consistent path caching at most `cache_cap` points.
    pub fn exact(model: &'m GpModel, rng: Rng, cache_cap: usize) -> Self {
        Self {
            model,
            route: Route::Exact(ExactCache::new(model.n_train(), cache_cap)),
            rng,
        }
    }

    /// Nyström low-rank path over `inducing` (original units).
    pub fn low_rank(model: &'m GpModel, inducing: &[Vec<f64>], mut rng: Rng) -> Result<Self> {
        let space = model.space();
        let u: Vec<Vec<f64>> = inducing.iter().map(|x| space.to_unit(x)).collect();
        let path = LowRankPath::new(model, u, &mut rng)?;
        Ok(Self {
            model,
            route: Route::LowRank(path),
            rng,
        })
    }

    /// Independent joint draw on every call; batches larger than `threshold`
    /// use the Nyström factor over `inducing` plus the batch.
    pub fn per_generation(model: &'m GpModel, inducing: &[Vec<f64>], threshold: usize, rng: Rng) -> Self {
        let space = model.space();
        Self {
            model,
            route: Route::PerGeneration {
                inducing: inducing.iter().map(|x| space.to_unit(x)).collect(),
                threshold,
            },
            rng,
        }
    }

    pub fn route(&self) -> PathRoute {
        match self.route {
            Route::Exact(_) => PathRoute::Exact,
            Route::LowRank(_) => PathRoute::LowRank,
            Route::PerGeneration { .. } => PathRoute::PerGeneration,
        }
    }

    /// Number of cached realizations (exact route only).
    pub fn cached(&self) -> usize {
        match &self.route {
            Route::Exact(c) => c.points.len(),
            _ => 0,
        }
    }

    /// Path values at the query points, in original units.
    pub fn values(&mut self, xq: &[Vec<f64>]) -> Result<Vec<f64>> {
        let model = self.model;
        let space = model.space();
        let d = space.dim();
        if let Some(bad) = xq.iter().find(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("query of dimension {} (expected {d}) or non-finite", bad.len())));
        }
        let u: Vec<Vec<f64>> = xq.iter().map(|x| space.to_unit(x)).collect();
        let std_vals = match &mut self.route {
            Route::Exact(cache) => {
                let mut fresh = Vec::new();
                let mut seen = HashMap::new();
                for p in &u {
                    let k = key(p);
                    if !cache.index.contains_key(&k) && !seen.contains_key(&k) {
                        seen.insert(k, ());
                        fresh.push(p.clone());
                    }
                }
                if !fresh.is_empty() {
                    cache.extend(model, fresh, &mut self.rng)?;
                }
                u.iter().map(|p| cache.values[cache.index[&key(p)]]).collect::<Vec<_>>()
            }
            Route::LowRank(path) => {
                let path = &*path;
                par::map(&u, |p| path.value(model, p))
            }
            Route::PerGeneration { inducing, threshold } => {
                joint_draw(model, &u, inducing, *threshold, &mut self.rng)?
            }
        };
        Ok(std_vals.into_iter().map(|v| model.destandardize(v)).collect())
    }
}

fn joint_draw(
    model: &GpModel,
    u: &[Vec<f64>],
    inducing: &[Vec<f64>],
    threshold: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = u.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mean = DVector::from_iterator(n, u.iter().map(|p| model.mean_std_unit(p)));
    let factor = if n <= threshold || inducing.is_empty() {
        let (_, cov) = model.posterior_std_unit(u);
        let (l, _) = cholesky_jittered_floor(&cov, COND_JITTER_FLOOR)?;
        l
    } else {
        let cov_mn = model.posterior_cross_std_unit(inducing, u);
        let (_, cov_mm) = model.posterior_std_unit(inducing);
        let mut cov_mm = cov_mm;
        let floor = COND_JITTER_FLOOR;
        if cov_mm.diagonal().iter().all(|v| *v < floor) {
            for i in 0..cov_mm.nrows() {
                cov_mm[(i, i)] += floor;
            }
        }
        nystrom_sqrt(&cov_mn, &cov_mm)?.factor
    };
    let z = standard_normal(rng, factor.ncols());
    Ok((mean + factor * z).iter().copied().collect())
}

/// How one realization is maintained across the inner solver's queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathMode {
    Consistent,
    PerGeneration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NystromMode {
    Auto,
    On,
    Off,
}

impl std::str::FromStr for NystromMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            _ => Err(Error::config("nystrom", format!("expected auto, on or off, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub mode: PathMode,
    pub nystrom: NystromMode,
    /// Per-generation batches larger than this use the Nyström factor.
    pub n_thresh: usize,
    pub cache_cap: usize,
    /// In `auto` mode, the exact cache is used when a path will see at most
    /// this many queries; larger budgets use the low-rank path.
    pub exact_path_limit: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            mode: PathMode::Consistent,
            nystrom: NystromMode::Auto,
            n_thresh: DEFAULT_NYSTROM_THRESHOLD,
            cache_cap: DEFAULT_CACHE_CAP,
            exact_path_limit: 2048,
        }
    }
}

/// Builds one path per model. `queries` is the number of points each path
/// is expected to be evaluated at; `seeds` gives each path's stream.
pub fn make_paths<'m>(
    models: &'m [GpModel],
    data: &Dataset,
    cfg: &PathConfig,
    queries: usize,
    seeds: &[u64],
) -> Result<Vec<PathState<'m>>> {
    if seeds.len() != models.len() {
        return Err(Error::invalid("one path seed per model is required"));
    }
    let inducing = inducing_points(data);
    models
        .iter()
        .zip(seeds)
        .map(|(m, &seed)| {
            let rng = crate::rng::stream(seed, crate::rng::tag::PATH, 0);
            match (cfg.mode, cfg.nystrom) {
                (PathMode::PerGeneration, NystromMode::Off) => {
                    Ok(PathState::per_generation(m, &[], usize::MAX, rng))
                }
                (PathMode::PerGeneration, _) => Ok(PathState::per_generation(m, &inducing, cfg.n_thresh, rng)),
                (PathMode::Consistent, NystromMode::On) => PathState::low_rank(m, &inducing, rng),
                (PathMode::Consistent, NystromMode::Off) => Ok(PathState::exact(m, rng, cfg.cache_cap)),
                (PathMode::Consistent, NystromMode::Auto) => {
                    if queries <= cfg.exact_path_limit {
                        Ok(PathState::exact(m, rng, cfg.cache_cap))
                    } else {
                        PathState::low_rank(m, &inducing, rng)
                    }
                }
            }
        })
        .collect()
}
