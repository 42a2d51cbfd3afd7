//! Synthetic test problems on the unit cube, all in minimization form.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::DesignSpace;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Problem {
    BraninCurrin,
    Zdt3,
    Dtlz3,
    Dtlz7,
}

/// A named benchmark with fixed dimension and objective count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub problem: Problem,
    pub d: usize,
    pub k: usize,
}

/// Names understood by [`Benchmark::by_name`] without extra arguments.
pub const REGISTERED: &[&str] = &[
    "branin-currin",
    "zdt3-d5",
    "zdt3-d10",
    "dtlz3-d5",
    "dtlz3-d10",
    "dtlz7-d5",
    "dtlz7-d10",
];

impl Benchmark {
    pub fn new(problem: Problem, d: usize, k: usize) -> Result<Self> {
        let name = match problem {
            Problem::BraninCurrin => "branin-currin".to_string(),
            Problem::Zdt3 => format!("zdt3-d{d}"),
            Problem::Dtlz3 => format!("dtlz3-d{d}"),
            Problem::Dtlz7 => format!("dtlz7-d{d}"),
        };
        let ok = match problem {
            Problem::BraninCurrin => d == 2 && k == 2,
            Problem::Zdt3 => d >= 2 && k == 2,
            Problem::Dtlz3 | Problem::Dtlz7 => k >= 2 && d >= k,
        };
        if !ok {
            return Err(Error::invalid(format!("{name}: unsupported d={d}, K={k}")));
        }
        Ok(Self { name, problem, d, k })
    }

    /// Looks up `branin-currin` or `<zdt3|dtlz3|dtlz7>-d<N>`; `k` overrides
    /// the objective count of the DTLZ problems (default 2).
    pub fn by_name(name: &str, k: Option<usize>) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        if lower == "branin-currin" {
            return Self::new(Problem::BraninCurrin, 2, 2);
        }
        let (family, dim) = lower
            .split_once("-d")
            .ok_or_else(|| Error::invalid(format!("unknown benchmark `{name}`")))?;
        let d: usize = dim
            .parse()
            .map_err(|_| Error::invalid(format!("bad dimension in benchmark `{name}`")))?;
        match family {
            "zdt3" => Self::new(Problem::Zdt3, d, 2),
            "dtlz3" => Self::new(Problem::Dtlz3, d, k.unwrap_or(2)),
            "dtlz7" => Self::new(Problem::Dtlz7, d, k.unwrap_or(2)),
            _ => Err(Error::invalid(format!("unknown benchmark `{name}`"))),
        }
    }

    pub fn space(&self) -> DesignSpace {
        DesignSpace::unit(self.d)
    }

    /// Noiseless objective vector.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::invalid(format!("{}: expected {} inputs", self.name, self.d)));
        }
        match self.problem {
            Problem::BraninCurrin => branin_currin(x).map(|v| v.to_vec()),
            Problem::Zdt3 => zdt3(x).map(|v| v.to_vec()),
            Problem::Dtlz3 => dtlz3(x, self.k),
            Problem::Dtlz7 => dtlz7(x, self.k),
        }
    }

    /// `eval(x)` plus independent Gaussian noise of variance `noise_var`.
    pub fn observe(&self, x: &[f64], noise_var: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        if !(noise_var >= 0.0) {
            return Err(Error::invalid("noise variance must be >= 0"));
        }
        let mut y = self.eval(x)?;
        if noise_var > 0.0 {
            let normal = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
            for v in &mut y {
                *v += normal.sample(rng);
            }
        }
        Ok(y)
    }
}

fn check_unit(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::invalid("input outside the unit cube"))
    }
}

/// ZDT3, `d >= 2`.
pub fn zdt3(x: &[f64]) -> Result<[f64; 2]> {
    check_unit(x)?;
    let d = x.len();
    if d < 2 {
        return Err(Error::invalid("zdt3 needs d >= 2"));
    }
    let f1 = x[0];
    let g = 1.0 + 9.0 * x[1..].iter().sum::<f64>() / (d - 1) as f64;
    let ratio = f1 / g;
    let f2 = g * (1.0 - ratio.sqrt() - ratio * (10.0 * PI * f1).sin());
    Ok([f1, f2])
}

fn dtlz_check(x: &[f64], k: usize) -> Result<()> {
    check_unit(x)?;
    if k < 2 || x.len() < k {
        return Err(Error::invalid("DTLZ needs K >= 2 and d >= K"));
    }
    Ok(())
}

/// DTLZ3 (multimodal g, spherical front).
pub fn dtlz3(x: &[f64], k: usize) -> Result<Vec<f64>> {
    dtlz_check(x, k)?;
    let tail = &x[k - 1..];
    let g = 100.0
        * (tail.len() as f64
            + tail
                .iter()
                .map(|v| (v - 0.5).powi(2) - (20.0 * PI * (v - 0.5)).cos())
                .sum::<f64>());
    let mut f = vec![1.0 + g; k];
    for (m, fm) in f.iter_mut().enumerate() {
        for xj in &x[..k - 1 - m] {
            *fm *= (xj * PI / 2.0).cos();
        }
        if m > 0 {
            *fm *= (x[k - 1 - m] * PI / 2.0).sin();
        }
    }
    Ok(f)
}

/// DTLZ7 (disconnected front).
pub fn dtlz7(x: &[f64], k: usize) -> Result<Vec<f64>> {
    dtlz_check(x, k)?;
    let tail = &x[k - 1..];
    let g = 1.0 + 9.0 * tail.iter().sum::<f64>() / tail.len() as f64;
    let mut f: Vec<f64> = x[..k - 1].to_vec();
    let h = k as f64
        - f.iter()
            .map(|fi| fi / (1.0 + g) * (1.0 + (3.0 * PI * fi).sin()))
            .sum::<f64>();
    f.push((1.0 + g) * h);
    Ok(f)
}

/// Branin (rescaled to the unit square) paired with the Currin exponential.
pub fn branin_currin(x: &[f64]) -> Result<[f64; 2]> {
    check_unit(x)?;
    if x.len() != 2 {
        return Err(Error::invalid("branin-currin needs d = 2"));
    }
    Ok([branin(x[0], x[1]), currin(x[0], x[1])])
}

fn branin(u: f64, v: f64) -> f64 {
    let x1 = 15.0 * u - 5.0;
    let x2 = 15.0 * v;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

fn currin(u: f64, v: f64) -> f64 {
    // exp(-1/(2v)) -> 0 as v -> 0
    let factor = if v == 0.0 { 1.0 } else { 1.0 - (-1.0 / (2.0 * v)).exp() };
    let num = 2300.0 * u.powi(3) + 1900.0 * u * u + 2092.0 * u + 60.0;
    let den = 100.0 * u.powi(3) + 500.0 * u * u + 4.0 * u + 20.0;
    factor * num / den
}

/// The five disjoint `f1` intervals of the ZDT3 Pareto front.
pub const ZDT3_FRONT_INTERVALS: [(f64, f64); 5] = [
    (0.0, 0.083_001_534_9),
    (0.182_228_728_0, 0.257_762_363_4),
    (0.409_313_674_8, 0.453_882_104_1),
    (0.618_396_794_4, 0.652_511_703_8),
    (0.823_331_798_3, 0.851_832_865_4),
];

/// Dense sample of the true ZDT3 front: the nondominated part of the `g = 1`
/// curve `f2 = 1 - sqrt(f1) - f1 sin(10 pi f1)`.
pub fn zdt3_true_front(samples: usize) -> Vec<Vec<f64>> {
    let curve: Vec<Vec<f64>> = (0..samples)
        .map(|i| {
            let f1 = i as f64 / (samples - 1) as f64;
            vec![f1, 1.0 - f1.sqrt() - f1 * (10.0 * PI * f1).sin()]
        })
        .collect();
    // sweep: curve is sorted by f1, keep points improving the running min of f2
    let mut best = f64::INFINITY;
    curve
        .into_iter()
        .filter(|p| {
            if p[1] < best {
                best = p[1];
                true
            } else {
                false
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    #[test]
    fn zdt3_closed_forms() {
        assert_eq!(zdt3(&[0.0; 5]).unwrap(), [0.0, 1.0]);
        let v = zdt3(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1].abs() < 1e-14);
        let v = zdt3(&[0.5, 1.0]).unwrap();
        let expected = 10.0 * (1.0 - 0.05f64.sqrt() - 0.05 * (5.0 * PI).sin());
        assert!((v[1] - expected).abs() < 1e-12);
        assert!((v[1] - 7.7639).abs() < 1e-4);
        assert!(zdt3(&[1.2, 0.0]).is_err());
    }

    #[test]
    fn dtlz3_front_is_unit_sphere() {
        for t in 0..20 {
            let a = t as f64 / 19.0;
            let x = [a, 0.5, 0.5, 0.5, 0.5];
            let f = dtlz3(&x, 2).unwrap();
            assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let f = dtlz3(&[0.0, 0.5, 0.5, 0.5], 2).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12 && f[1].abs() < 1e-12);
        let f3 = dtlz3(&[0.3, 0.8, 0.5, 0.5, 0.5], 3).unwrap();
        assert!((f3.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dtlz7_constants() {
        // trailing block 0 gives g = 1, leading 0 gives h = K, f_K = 2K
        for k in 2..5 {
            let x = vec![0.0; k + 3];
            let f = dtlz7(&x, k).unwrap();
            assert_eq!(f[k - 1], 2.0 * k as f64);
        }
        // leading 1: h = K - (K-1)/2 * (1 + sin 3pi), f_K = 2h
        let f = dtlz7(&[1.0, 0.0, 0.0, 0.0, 0.0], 2).unwrap();
        let h = 2.0 - 0.5 * (1.0 + (3.0 * PI).sin());
        assert!((f[1] - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn branin_minimum_and_currin_limit() {
        let u = (PI + 5.0) / 15.0;
        let v = 2.275 / 15.0;
        assert!((branin(u, v) - 0.397_887).abs() < 1e-4);
        let at_zero = currin(0.3, 0.0);
        let near_zero = currin(0.3, 1e-9);
        assert!((at_zero - near_zero).abs() < 1e-12);
    }

    #[test]
    fn observe_noise_free_and_reproducible() {
        let b = Benchmark::by_name("zdt3-d5", None).unwrap();
        let x = [0.3, 0.1, 0.2, 0.3, 0.4];
        let mut rng = stream(1, tag::TEST, 0);
        assert_eq!(b.observe(&x, 0.0, &mut rng).unwrap(), b.eval(&x).unwrap());
        let a = b.observe(&x, 1e-3, &mut stream(5, tag::TEST, 0)).unwrap();
        let c = b.observe(&x, 1e-3, &mut stream(5, tag::TEST, 0)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn registry_names_resolve() {
        for name in REGISTERED {
            let b = Benchmark::by_name(name, None).unwrap();
            assert_eq!(&b.name, name);
        }
        assert!(Benchmark::by_name("zdt9-d5", None).is_err());
        assert!(Benchmark::by_name("dtlz3-d2", Some(3)).is_err());
    }

    #[test]
    fn true_front_lies_in_known_intervals() {
        let front = zdt3_true_front(100_001);
        for p in &front {
            let inside = ZDT3_FRONT_INTERVALS
                .iter()
                .any(|(lo, hi)| p[0] >= lo - 1e-3 && p[0] <= hi + 1e-3);
            assert!(inside, "f1 = {}", p[0]);
        }
    }
}
