//! Experiment configuration: a TOML file with defaults filled in on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::{LoopConfig, MaximinSpace, Policy, RefPoint};
use crate::benchmarks::Benchmark;
use crate::error::{Error, Result};
use crate::gp::DesignSpace;
use crate::nsga2::EAConfig;
use crate::paths::{NystromMode, PathConfig};

/// Default output directory when neither the config nor the CLI names one.
pub const OUTPUT_DIR_ENV: &str = "QPOTS_OUTPUT_DIR";

/// Benchmark name for problems evaluated outside the process.
pub const EXTERNAL: &str = "external";

/// A fully resolved experiment. Serializes back to a TOML file that loads to
/// an equal value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub benchmark: String,
    pub policy: Policy,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_seed: usize,
    pub budget: usize,
    pub q: usize,
    pub noise_var: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective_noise: Option<Vec<f64>>,
    /// Bounds of an external problem; benchmarks use their own.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    pub ref_point: RefPoint,
    pub repetitions: usize,
    pub base_seed: u64,
    pub nystrom: NystromMode,
    pub refit_every: usize,
    pub refit_restarts: usize,
    pub maximin_space: MaximinSpace,
    pub sobol_shift: bool,
    pub max_failure_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub output_dir: PathBuf,
    pub ea: EAConfig,
    pub paths: PathConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    benchmark: Option<String>,
    policy: Option<String>,
    d: Option<usize>,
    #[serde(rename = "K", alias = "k")]
    k: Option<usize>,
    n_seed: Option<usize>,
    budget: Option<usize>,
    q: Option<usize>,
    noise_var: Option<f64>,
    objective_noise: Option<Vec<f64>>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    ref_point: Option<RefPoint>,
    repetitions: Option<usize>,
    base_seed: Option<u64>,
    nystrom: Option<String>,
    refit_every: Option<usize>,
    refit_restarts: Option<usize>,
    maximin_space: Option<MaximinSpace>,
    sobol_shift: Option<bool>,
    max_failure_fraction: Option<f64>,
    weights: Option<Vec<f64>>,
    output_dir: Option<PathBuf>,
    ea: Option<EAConfig>,
    paths: Option<PathConfig>,
}

/// Reads and resolves a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parses and resolves config text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_else(|| "config".into());
        Error::config(key, e.message().trim().to_string())
    })?;
    raw.resolve()
}

/// Finds the dotted key of the line holding byte offset `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let pos = pos.min(text.len());
    let mut table = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let end = start + line.len();
        let trimmed = line.trim();
        let header = trimmed.strip_prefix('[').and_then(|t| t.strip_suffix(']'));
        if pos < end || end == text.len() {
            if let Some(h) = header {
                return h.trim().to_string();
            }
            let key = trimmed.split('=').next().unwrap_or("").trim();
            let key = if key.is_empty() { "config" } else { key };
            return if table.is_empty() { key.to_string() } else { format!("{table}.{key}") };
        }
        if let Some(h) = header {
            table = h.trim().to_string();
        }
        start = end;
    }
    "config".into()
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let benchmark = self.benchmark.ok_or_else(|| Error::config("benchmark", "required"))?;
        let policy: Policy = self.policy.ok_or_else(|| Error::config("policy", "required"))?.parse()?;
        let (d, k) = if benchmark == EXTERNAL {
            let d = self
                .d
                .or(self.lower.as_ref().map(Vec::len))
                .ok_or_else(|| Error::config("d", "required for an external problem"))?;
            let k = self.k.ok_or_else(|| Error::config("K", "required for an external problem"))?;
            (d, k)
        } else {
            let b = Benchmark::by_name(&benchmark, self.k).map_err(|e| Error::config("benchmark", e.to_string()))?;
            if self.d.is_some_and(|d| d != b.d) {
                return Err(Error::config("d", format!("{} has d = {}", b.name, b.d)));
            }
            if self.k.is_some_and(|k| k != b.k) {
                return Err(Error::config("K", format!("{} has K = {}", b.name, b.k)));
            }
            if self.lower.is_some() || self.upper.is_some() {
                return Err(Error::config("lower", "bounds are fixed by the benchmark"));
            }
            (b.d, b.k)
        };
        let mut ea = self.ea.unwrap_or_default();
        ea.pop_size = Some(ea.pop_size_for(d));
        let mut paths = self.paths.unwrap_or_default();
        if let Some(n) = self.nystrom {
            paths.nystrom = n.parse()?;
        }
        let output_dir = self
            .output_dir
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"));
        let cfg = ExperimentConfig {
            benchmark,
            policy,
            d,
            k,
            n_seed: self.n_seed.unwrap_or(10 * d),
            budget: self.budget.ok_or_else(|| Error::config("budget", "required"))?,
            q: self.q.unwrap_or(1),
            noise_var: self.noise_var.unwrap_or(1e-3),
            objective_noise: self.objective_noise,
            lower: self.lower,
            upper: self.upper,
            ref_point: self.ref_point.unwrap_or_else(RefPoint::auto),
            repetitions: self.repetitions.unwrap_or(10),
            base_seed: self.base_seed.unwrap_or(0),
            nystrom: paths.nystrom,
            refit_every: self.refit_every.unwrap_or(1),
            refit_restarts: self.refit_restarts.unwrap_or(1),
            maximin_space: self.maximin_space.unwrap_or(MaximinSpace::Unit),
            sobol_shift: self.sobol_shift.unwrap_or(false),
            max_failure_fraction: self.max_failure_fraction.unwrap_or(0.1),
            weights: self.weights,
            output_dir,
            ea,
            paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    /// Defaults for a registered benchmark.
    pub fn for_benchmark(benchmark: &str, policy: Policy, budget: usize) -> Result<Self> {
        RawConfig {
            benchmark: Some(benchmark.to_string()),
            policy: Some(policy.name().to_string()),
            budget: Some(budget),
            ..RawConfig::default()
        }
        .resolve()
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget <= self.n_seed {
            return Err(Error::config("budget", format!("must exceed n_seed = {}", self.n_seed)));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::config("max_failure_fraction", "must lie in [0, 1]"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.k || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("weights", "needs K nonnegative entries with positive sum"));
            }
        }
        match (&self.lower, &self.upper) {
            (Some(_), None) => return Err(Error::config("upper", "required with `lower`")),
            (None, Some(_)) => return Err(Error::config("lower", "required with `upper`")),
            (Some(l), Some(_)) if l.len() != self.d => {
                return Err(Error::config("lower", format!("needs d = {} entries", self.d)));
            }
            _ => {}
        }
        self.space()?;
        self.loop_config(0)?.validate()
    }

    pub fn is_external(&self) -> bool {
        self.benchmark == EXTERNAL
    }

    pub fn benchmark(&self) -> Result<Option<Benchmark>> {
        if self.is_external() {
            Ok(None)
        } else {
            Benchmark::by_name(&self.benchmark, Some(self.k)).map(Some)
        }
    }

    pub fn space(&self) -> Result<DesignSpace> {
        match (&self.lower, &self.upper) {
            (Some(l), Some(u)) => DesignSpace::new(l.clone(), u.clone()).map_err(|e| Error::config("lower", e.to_string())),
            _ => Ok(DesignSpace::unit(self.d)),
        }
    }

    /// Repetition seed; shared by every policy so seed designs match.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.base_seed.wrapping_add(rep as u64)
    }

    /// Loop settings of repetition `rep`.
    pub fn loop_config(&self, rep: usize) -> Result<LoopConfig> {
        let mut c = LoopConfig::new(self.policy, self.space()?, self.k, self.n_seed, self.budget, self.rep_seed(rep));
        c.q = self.q;
        c.noise_var = self.noise_var;
        c.objective_noise = self.objective_noise.clone();
        c.ea = self.ea.clone();
        c.paths = self.paths.clone();
        c.maximin_space = self.maximin_space;
        c.refit_every = self.refit_every;
        c.refit_restarts = self.refit_restarts;
        c.reference = self.ref_point.clone();
        c.max_failure_fraction = self.max_failure_fraction;
        c.sobol_shift = self.sobol_shift;
        c.weights_override = self.weights.clone();
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_is_defaulted() {
        let c = parse_config("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\n").unwrap();
        assert_eq!((c.d, c.k), (5, 2));
        assert_eq!(c.n_seed, 50);
        assert_eq!(c.q, 1);
        assert_eq!(c.noise_var, 1e-3);
        assert_eq!(c.repetitions, 10);
        assert_eq!(c.ea.pop_size, Some(500));
        assert_eq!(c.ref_point, RefPoint::auto());
        assert_eq!(c.nystrom, NystromMode::Auto);
    }

    #[test]
    fn budget_not_above_seed_is_rejected() {
        let e = parse_config("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 50\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "budget"), "{e}");
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\nq = \"four\"\n", "q"),
            ("benchmark = \"zdt3-d5\"\npolicy = \"nope\"\nbudget = 150\n", "policy"),
            ("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\nbogus = 1\n", "bogus"),
            ("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\n[ea]\ngenerations = -1\n", "ea.generations"),
            ("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\nnystrom = \"maybe\"\n", "nystrom"),
            ("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\nref_point = [1.0]\n", "ref_point"),
            ("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\nrepetitions = 0\n", "repetitions"),
            ("benchmark = \"zdt3-d5\"\npolicy = \"qpots\"\nbudget = 150\nd = 3\n", "d"),
            ("policy = \"qpots\"\nbudget = 150\n", "benchmark"),
        ];
        for (text, key) in cases {
            match parse_config(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trip() {
        let text = "benchmark = \"dtlz7-d5\"\nK = 3\npolicy = \"scalarized-ts\"\nbudget = 80\nq = 4\n\
                    ref_point = [1.0, 2.0, 30.0]\nnystrom = \"on\"\noutput_dir = \"out\"\n[ea]\ngenerations = 7\n";
        let c = parse_config(text).unwrap();
        let again = parse_config(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.paths.nystrom, NystromMode::On);
        assert_eq!(again.ea.generations, 7);
    }

    #[test]
    fn external_problem_needs_dimensions() {
        let e = parse_config("benchmark = \"external\"\npolicy = \"qpots\"\nbudget = 30\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "d"));
        let c = parse_config(
            "benchmark = \"external\"\npolicy = \"qpots\"\nbudget = 30\nK = 2\nlower = [0.0, -1.0]\nupper = [1.0, 1.0]\n",
        )
        .unwrap();
        assert_eq!((c.d, c.n_seed), (2, 20));
        assert_eq!(c.space().unwrap().lower(), &[0.0, -1.0]);
        let again = parse_config(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }
}
