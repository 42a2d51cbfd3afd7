//! NSGA-II with simulated binary crossover and polynomial mutation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::DesignSpace;
use crate::par;
use crate::pareto::{
    crowding_distance, dominates_unchecked, fast_nondominated_sort, hypervolume_value, nondominated_filter, ParetoArchive,
};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub rank: usize,
    pub crowding: f64,
}

impl Individual {
    fn is_finite(&self) -> bool {
        self.y.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EAConfig {
    /// `None` means `100 * d`.
    pub pop_size: Option<usize>,
    pub generations: usize,
    pub crossover_prob: f64,
    pub crossover_eta: f64,
    /// `None` means `1 / d`.
    pub mutation_prob: Option<f64>,
    pub mutation_eta: f64,
    pub seed: u64,
    /// Seed the initial population with supplied designs (at most 10%).
    pub inject_incumbents: bool,
    /// Return every evaluated point's nondominated subset instead of the
    /// final population's.
    pub archive_all: bool,
    /// Reference point for the elitism safeguard in [`survive`]. Defaults to
    /// one unit beyond the worst value of the fronts being compared.
    pub hv_reference: Option<Vec<f64>>,
}

impl Default for EAConfig {
    fn default() -> Self {
        Self {
            pop_size: None,
            generations: 100,
            crossover_prob: 0.9,
            crossover_eta: 15.0,
            mutation_prob: None,
            mutation_eta: 20.0,
            seed: 0,
            inject_incumbents: true,
            archive_all: false,
            hv_reference: None,
        }
    }
}

impl EAConfig {
    pub fn pop_size_for(&self, d: usize) -> usize {
        let p = self.pop_size.unwrap_or(100 * d);
        p + p % 2
    }

    pub fn mutation_prob_for(&self, d: usize) -> f64 {
        self.mutation_prob.unwrap_or(1.0 / d.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.pop_size {
            if p < 2 || p % 2 != 0 {
                return Err(Error::config("ea.pop_size", "must be even and at least 2"));
            }
        }
        if self.generations < 1 {
            return Err(Error::config("ea.generations", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err(Error::config("ea.crossover_prob", "must lie in [0, 1]"));
        }
        if let Some(p) = self.mutation_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("ea.mutation_prob", "must lie in [0, 1]"));
            }
        }
        if !(self.crossover_eta > 0.0) {
            return Err(Error::config("ea.crossover_eta", "must be positive"));
        }
        if !(self.mutation_eta > 0.0) {
            return Err(Error::config("ea.mutation_eta", "must be positive"));
        }
        Ok(())
    }
}

/// Simulated binary crossover; children are clamped to `space`.
pub fn sbx_crossover(
    p1: &[f64],
    p2: &[f64],
    space: &DesignSpace,
    cfg: &EAConfig,
    rng: &mut Rng,
) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = p1.to_vec();
    let mut c2 = p2.to_vec();
    if rng.random::<f64>() >= cfg.crossover_prob {
        return (c1, c2);
    }
    let e = 1.0 / (cfg.crossover_eta + 1.0);
    for i in 0..p1.len() {
        // one uniform per gene keeps the stream layout independent of the data
        let u: f64 = rng.random();
        let apply: f64 = rng.random();
        let swap: bool = rng.random();
        if apply > 0.5 || p1[i] == p2[i] {
            continue;
        }
        let beta = if u <= 0.5 {
            (2.0 * u).powf(e)
        } else {
            (1.0 / (2.0 * (1.0 - u))).powf(e)
        };
        let a = 0.5 * ((1.0 + beta) * p1[i] + (1.0 - beta) * p2[i]);
        let b = 0.5 * ((1.0 - beta) * p1[i] + (1.0 + beta) * p2[i]);
        if swap {
            c1[i] = b;
            c2[i] = a;
        } else {
            c1[i] = a;
            c2[i] = b;
        }
    }
    space.clamp(&mut c1);
    space.clamp(&mut c2);
    (c1, c2)
}

/// Bounded polynomial mutation, applied gene-wise with `mutation_prob`.
pub fn polynomial_mutation(x: &[f64], space: &DesignSpace, cfg: &EAConfig, rng: &mut Rng) -> Vec<f64> {
    let pm = cfg.mutation_prob_for(x.len());
    let eta = cfg.mutation_eta;
    let mut out = x.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let r: f64 = rng.random();
        let u: f64 = rng.random();
        if r >= pm {
            continue;
        }
        let (lo, hi) = (space.lower()[i], space.upper()[i]);
        let span = hi - lo;
        let d1 = (*v - lo) / span;
        let d2 = (hi - *v) / span;
        let p = 1.0 / (eta + 1.0);
        let dq = if u < 0.5 {
            let t = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(eta + 1.0);
            t.powf(p) - 1.0
        } else {
            let t = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(eta + 1.0);
            1.0 - t.powf(p)
        };
        *v = (*v + dq * span).clamp(lo, hi);
    }
    out
}

/// Vector-valued objective evaluated one generation at a time.
pub trait BatchObjective {
    fn n_objectives(&self) -> usize;
    fn eval_batch(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Adapts a pointwise closure; points are evaluated in parallel.
pub struct FnObjective<F> {
    pub k: usize,
    pub f: F,
}

impl<F> BatchObjective for FnObjective<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn n_objectives(&self) -> usize {
        self.k
    }

    fn eval_batch(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let f = &self.f;
        Ok(par::map(xs, |x| f(x)))
    }
}

/// Output of one NSGA-II run.
#[derive(Debug, Clone)]
pub struct Nsga2Result {
    pub archive: ParetoArchive,
    pub population: Vec<Individual>,
    pub evaluations: usize,
    /// Evaluations that returned a non-finite value.
    pub quarantined: usize,
}

/// Per-generation callback: generation index (0 = initial population) and
/// the surviving population.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &[Individual]);

fn assign_rank_and_crowding(pop: &mut [Individual]) {
    let finite: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].is_finite()).collect();
    let ys: Vec<Vec<f64>> = finite.iter().map(|&i| pop[i].y.clone()).collect();
    let fronts = fast_nondominated_sort(&ys);
    let worst = fronts.len();
    for (r, front) in fronts.iter().enumerate() {
        let fy: Vec<Vec<f64>> = front.iter().map(|&j| ys[j].clone()).collect();
        let cd = crowding_distance(&fy);
        for (&j, c) in front.iter().zip(cd) {
            let ind = &mut pop[finite[j]];
            ind.rank = r;
            ind.crowding = c;
        }
    }
    for ind in pop.iter_mut().filter(|i| !i.is_finite()) {
        ind.rank = worst;
        ind.crowding = 0.0;
    }
}

fn better(a: &Individual, b: &Individual) -> bool {
    a.rank < b.rank || (a.rank == b.rank && a.crowding > b.crowding)
}

fn tournament<'p>(pop: &'p [Individual], rng: &mut Rng) -> &'p Individual {
    let a = &pop[rng.random_range(0..pop.len())];
    let b = &pop[rng.random_range(0..pop.len())];
    if better(b, a) {
        b
    } else {
        a
    }
}

/// Keeps the best `n` of `pool` by front, then by crowding distance.
///
/// `prev_front` indexes the previous population's first front inside `pool`.
/// When the merged first front must be truncated and crowding would shrink
/// its hypervolume below that of `prev_front` (checked exactly for up to
/// three objectives), the previous front, or the members dominating it, are
/// kept first and the remaining slots are filled by crowding.
fn survive(mut pool: Vec<Individual>, n: usize, prev_front: &[usize], reference: Option<&[f64]>) -> Vec<Individual> {
    assign_rank_and_crowding(&mut pool);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&i, &j| {
        pool[i]
            .rank
            .cmp(&pool[j].rank)
            .then(pool[j].crowding.total_cmp(&pool[i].crowding))
            .then(i.cmp(&j))
    });
    let first: Vec<usize> = order.iter().copied().filter(|&i| pool[i].rank == 0 && pool[i].is_finite()).collect();
    if first.len() > n && !prev_front.is_empty() {
        if let Some(keep) = hv_safeguard(&pool, &first, n, prev_front, reference) {
            order = keep;
        }
    }
    order.truncate(n);
    order.sort_unstable();
    let keep: std::collections::HashSet<usize> = order.into_iter().collect();
    let mut next: Vec<Individual> = pool
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, ind)| ind)
        .collect();
    // whole fronts survive except possibly the last, so pool ranks stay
    // valid; crowding is a property of the surviving set
    recompute_crowding(&mut next);
    next
}

fn recompute_crowding(pop: &mut [Individual]) {
    let mut ranks: Vec<usize> = pop.iter().filter(|i| i.is_finite()).map(|i| i.rank).collect();
    ranks.sort_unstable();
    ranks.dedup();
    for (new_rank, &r) in ranks.iter().enumerate() {
        let members: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].is_finite() && pop[i].rank == r).collect();
        let fy: Vec<Vec<f64>> = members.iter().map(|&i| pop[i].y.clone()).collect();
        for (&i, c) in members.iter().zip(crowding_distance(&fy)) {
            pop[i].rank = new_rank;
            pop[i].crowding = c;
        }
    }
    for ind in pop.iter_mut().filter(|i| !i.is_finite()) {
        ind.rank = ranks.len();
        ind.crowding = 0.0;
    }
}

fn hv_safeguard(
    pool: &[Individual],
    first: &[usize],
    n: usize,
    prev: &[usize],
    reference: Option<&[f64]>,
) -> Option<Vec<usize>> {
    let k = pool[first[0]].y.len();
    if k > 3 || reference.is_some_and(|r| r.len() != k) {
        return None;
    }
    let reference: Vec<f64> = match reference {
        Some(r) => r.to_vec(),
        None => (0..k)
            .map(|m| first.iter().chain(prev).map(|&i| pool[i].y[m]).fold(f64::NEG_INFINITY, f64::max) + 1.0)
            .collect(),
    };
    let ys = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| pool[i].y.clone()).collect() };
    let hv_new = hypervolume_value(&ys(&first[..n]), &reference).ok()?;
    let hv_old = hypervolume_value(&ys(prev), &reference).ok()?;
    if hv_new >= hv_old {
        return None;
    }
    let mut keep: Vec<usize> = Vec::with_capacity(n);
    for &p in prev {
        let cover = if pool[p].rank == 0 {
            p
        } else {
            *first.iter().find(|&&f| dominates_unchecked(&pool[f].y, &pool[p].y))?
        };
        if !keep.contains(&cover) {
            keep.push(cover);
        }
    }
    keep.truncate(n);
    for &f in first {
        if keep.len() == n {
            break;
        }
        if !keep.contains(&f) {
            keep.push(f);
        }
    }
    Some(keep)
}

fn evaluate(
    obj: &mut dyn BatchObjective,
    xs: Vec<Vec<f64>>,
    quarantined: &mut usize,
) -> Result<Vec<Individual>> {
    let k = obj.n_objectives();
    let ys = obj.eval_batch(&xs)?;
    if ys.len() != xs.len() {
        return Err(Error::invalid("objective returned the wrong number of rows"));
    }
    let mut out = Vec::with_capacity(xs.len());
    for (x, mut y) in xs.into_iter().zip(ys) {
        if y.len() != k || y.iter().any(|v| !v.is_finite()) {
            *quarantined += 1;
            y = vec![f64::NAN; k];
        }
        out.push(Individual {
            x,
            y,
            rank: 0,
            crowding: 0.0,
        });
    }
    Ok(out)
}

/// Runs NSGA-II on `obj` over `space`.
///
/// `incumbents` are injected into the initial population (at most 10% of
/// it) when `cfg.inject_incumbents` is set. Randomness is drawn only in the
/// sequential variation phase, so results do not depend on how `obj`
/// parallelizes its batches.
pub fn nsga2_run(
    obj: &mut dyn BatchObjective,
    space: &DesignSpace,
    cfg: &EAConfig,
    incumbents: &[Vec<f64>],
    rng: &mut Rng,
    mut observer: Option<Observer<'_>>,
) -> Result<Nsga2Result> {
    cfg.validate()?;
    let d = space.dim();
    let n = cfg.pop_size_for(d);
    let mut quarantined = 0;

    let mut init: Vec<Vec<f64>> = Vec::with_capacity(n);
    if cfg.inject_incumbents {
        for x in incumbents.iter().take(n / 10) {
            if x.len() != d {
                return Err(Error::invalid("incumbent has the wrong dimension"));
            }
            let mut x = x.clone();
            space.clamp(&mut x);
            init.push(x);
        }
    }
    while init.len() < n {
        init.push(space.sample(rng));
    }
    let mut pop = evaluate(obj, init, &mut quarantined)?;
    let mut evaluations = pop.len();
    assign_rank_and_crowding(&mut pop);
    let mut all: Vec<Individual> = if cfg.archive_all { pop.clone() } else { Vec::new() };
    if let Some(f) = observer.as_mut() {
        f(0, &pop);
    }

    for gen in 1..=cfg.generations {
        let mut children = Vec::with_capacity(n);
        while children.len() < n {
            let a = tournament(&pop, rng).x.clone();
            let b = tournament(&pop, rng).x.clone();
            let (c1, c2) = sbx_crossover(&a, &b, space, cfg, rng);
            children.push(polynomial_mutation(&c1, space, cfg, rng));
            children.push(polynomial_mutation(&c2, space, cfg, rng));
        }
        children.truncate(n);
        let offspring = evaluate(obj, children, &mut quarantined)?;
        evaluations += offspring.len();
        if cfg.archive_all {
            all.extend(offspring.iter().cloned());
        }
        let prev_front: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].rank == 0 && pop[i].is_finite()).collect();
        let mut pool = pop;
        pool.extend(offspring);
        pop = survive(pool, n, &prev_front, cfg.hv_reference.as_deref());
        if let Some(f) = observer.as_mut() {
            f(gen, &pop);
        }
    }

    if quarantined > 0 {
        log::warn!("nsga2: {quarantined} evaluations returned non-finite values");
    }
    let source = if cfg.archive_all { &all } else { &pop };
    let finite: Vec<&Individual> = source.iter().filter(|i| i.is_finite()).collect();
    let ys: Vec<Vec<f64>> = finite.iter().map(|i| i.y.clone()).collect();
    let keep = nondominated_filter(&ys);
    let x: Vec<Vec<f64>> = keep.iter().map(|&i| finite[i].x.clone()).collect();
    let y: Vec<Vec<f64>> = keep.iter().map(|&i| finite[i].y.clone()).collect();
    Ok(Nsga2Result {
        archive: ParetoArchive { x, y },
        population: pop,
        evaluations,
        quarantined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{zdt3, zdt3_true_front};
    use crate::pareto::igd;
    use crate::rng::{stream, tag};

    fn cfg() -> EAConfig {
        EAConfig::default()
    }

    #[test]
    fn crossover_identities() {
        let s = DesignSpace::unit(3);
        let mut rng = stream(1, tag::TEST, 0);
        let p1 = vec![0.1, 0.5, 0.9];
        let p2 = vec![0.7, 0.2, 0.3];
        let off = EAConfig {
            crossover_prob: 0.0,
            ..cfg()
        };
        assert_eq!(sbx_crossover(&p1, &p2, &s, &off, &mut rng), (p1.clone(), p2.clone()));
        let on = EAConfig {
            crossover_prob: 1.0,
            ..cfg()
        };
        for _ in 0..100 {
            assert_eq!(sbx_crossover(&p1, &p1, &s, &on, &mut rng), (p1.clone(), p1.clone()));
        }
    }

    #[test]
    fn crossover_preserves_midpoint_on_average() {
        let s = DesignSpace::unit(2);
        let mut rng = stream(2, tag::TEST, 0);
        let on = EAConfig {
            crossover_prob: 1.0,
            ..cfg()
        };
        let p1 = [0.4, 0.45];
        let p2 = [0.6, 0.5];
        let mut mean = [0.0; 2];
        let n = 10_000;
        for _ in 0..n {
            let (c1, c2) = sbx_crossover(&p1, &p2, &s, &on, &mut rng);
            for i in 0..2 {
                assert!((0.0..=1.0).contains(&c1[i]) && (0.0..=1.0).contains(&c2[i]));
                mean[i] += 0.5 * (c1[i] + c2[i]) / n as f64;
            }
        }
        for i in 0..2 {
            let mid = 0.5 * (p1[i] + p2[i]);
            assert!((mean[i] - mid).abs() <= 0.01 * mid);
        }
    }

    #[test]
    fn mutation_identity_and_bounds() {
        let s = DesignSpace::new(vec![-1.0, 0.0], vec![1.0, 5.0]).unwrap();
        let mut rng = stream(3, tag::TEST, 0);
        let off = EAConfig {
            mutation_prob: Some(0.0),
            ..cfg()
        };
        assert_eq!(polynomial_mutation(&[0.3, 2.0], &s, &off, &mut rng), vec![0.3, 2.0]);
        let on = EAConfig {
            mutation_prob: Some(1.0),
            ..cfg()
        };
        let mut sum = 0.0;
        for _ in 0..1000 {
            let m = polynomial_mutation(&[-1.0, 5.0], &s, &on, &mut rng);
            assert!(s.contains(&m));
            assert!(m[0] >= -1.0 && m[1] <= 5.0);
            sum += m[0] + 1.0;
        }
        assert!(sum > 0.0);
    }

    #[test]
    fn mutation_is_symmetric_in_the_interior() {
        let s = DesignSpace::unit(1);
        let mut rng = stream(4, tag::TEST, 0);
        let on = EAConfig {
            mutation_prob: Some(1.0),
            ..cfg()
        };
        let n = 10_000;
        let deltas: Vec<f64> = (0..n)
            .map(|_| polynomial_mutation(&[0.5], &s, &on, &mut rng)[0] - 0.5)
            .collect();
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let var = deltas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn sphere_is_minimized() {
        let s = DesignSpace::new(vec![-5.0; 2], vec![5.0; 2]).unwrap();
        let c = EAConfig {
            pop_size: Some(50),
            generations: 50,
            ..cfg()
        };
        let mut obj = FnObjective {
            k: 1,
            f: |x: &[f64]| vec![x.iter().map(|v| v * v).sum()],
        };
        let r = nsga2_run(&mut obj, &s, &c, &[], &mut stream(5, tag::TEST, 0), None).unwrap();
        assert!(r.archive.y[0][0] < 1e-3);
        assert_eq!(r.evaluations, 50 * 51);
    }

    #[test]
    fn duplicated_objectives_collapse() {
        let s = DesignSpace::unit(2);
        let c = EAConfig {
            pop_size: Some(40),
            generations: 60,
            ..cfg()
        };
        let mut obj = FnObjective {
            k: 2,
            f: |x: &[f64]| {
                let v = (x[0] - 0.3).powi(2) + (x[1] - 0.6).powi(2);
                vec![v, v]
            },
        };
        let r = nsga2_run(&mut obj, &s, &c, &[], &mut stream(6, tag::TEST, 0), None).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = r.archive.y.iter().map(|y| y[k]).collect();
            let spread = col.iter().cloned().fold(f64::MIN, f64::max) - col.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 1e-2);
        }
    }

    #[test]
    fn non_finite_values_are_quarantined() {
        let s = DesignSpace::unit(1);
        let c = EAConfig {
            pop_size: Some(20),
            generations: 5,
            ..cfg()
        };
        let mut obj = FnObjective {
            k: 2,
            f: |x: &[f64]| if x[0] > 0.5 { vec![f64::NAN, 0.0] } else { vec![x[0], 1.0 - x[0]] },
        };
        let r = nsga2_run(&mut obj, &s, &c, &[], &mut stream(7, tag::TEST, 0), None).unwrap();
        assert!(r.quarantined > 0);
        assert!(r.archive.x.iter().all(|x| x[0] <= 0.5));
    }

    #[test]
    fn incumbents_are_injected() {
        let s = DesignSpace::unit(1);
        let c = EAConfig {
            pop_size: Some(20),
            generations: 1,
            ..cfg()
        };
        let mut first = Vec::new();
        let mut obs = |g: usize, p: &[Individual]| {
            if g == 0 {
                first = p.iter().map(|i| i.x.clone()).collect();
            }
        };
        let mut obj = FnObjective {
            k: 1,
            f: |x: &[f64]| vec![x[0]],
        };
        let inc = vec![vec![0.123], vec![0.456], vec![0.789]];
        nsga2_run(&mut obj, &s, &c, &inc, &mut stream(8, tag::TEST, 0), Some(&mut obs)).unwrap();
        assert_eq!(&first[..2], &inc[..2]);
        assert!(!first.contains(&inc[2]));
    }

    #[test]
    fn zdt3_converges_with_monotone_population_hv() {
        let s = DesignSpace::unit(5);
        let c = EAConfig {
            pop_size: Some(200),
            generations: 100,
            hv_reference: Some(vec![1.1, 11.0]),
            ..cfg()
        };
        let reference = vec![1.1, 11.0];
        let mut hv = Vec::new();
        let mut obs = |_: usize, p: &[Individual]| {
            let front: Vec<Vec<f64>> = p.iter().filter(|i| i.rank == 0).map(|i| i.y.clone()).collect();
            hv.push(hypervolume_value(&front, &reference).unwrap());
        };
        let mut obj = FnObjective {
            k: 2,
            f: |x: &[f64]| zdt3(x).unwrap().to_vec(),
        };
        let r = nsga2_run(&mut obj, &s, &c, &[], &mut stream(9, tag::TEST, 0), Some(&mut obs)).unwrap();
        for w in hv.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "population HV dropped {} -> {}", w[0], w[1]);
        }
        let front = zdt3_true_front(2000);
        assert!(igd(&front, &r.archive.y) < 0.05);
    }

    #[test]
    fn deterministic_given_seed() {
        let s = DesignSpace::unit(3);
        let c = EAConfig {
            pop_size: Some(30),
            generations: 10,
            ..cfg()
        };
        let run = || {
            let mut obj = FnObjective {
                k: 2,
                f: |x: &[f64]| zdt3(x).unwrap().to_vec(),
            };
            nsga2_run(&mut obj, &s, &c, &[], &mut stream(10, tag::TEST, 0), None).unwrap().archive
        };
        assert_eq!(run(), run());
    }
}
