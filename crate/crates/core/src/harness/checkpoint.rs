//! Versioned, hash-protected run state on disk.
//!
//! File layout: `{"version":N,"sha256":"<hex>","payload":<json>}` where the
//! hash covers the exact payload bytes. Writes go through a temporary file
//! and a rename, so a reader never sees a partial checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::acquisition::BoState;
use crate::benchmarks::Benchmark;
use crate::error::{Error, Result};
use crate::oracle::BenchmarkOracle;

pub const CHECKPOINT_VERSION: u32 = 1;

/// How the observations of a checkpointed run are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OracleSpec {
    Benchmark { benchmark: Benchmark, noise_var: f64 },
    /// Observations arrive through ask/tell.
    External,
}

impl OracleSpec {
    /// The in-process oracle for `state`, if there is one.
    pub fn oracle(&self, state: &BoState) -> Option<BenchmarkOracle> {
        match self {
            OracleSpec::Benchmark { benchmark, noise_var } => Some(BenchmarkOracle {
                benchmark: benchmark.clone(),
                noise_var: *noise_var,
                seed: state.config.seed,
                n_seed: state.config.n_seed,
            }),
            OracleSpec::External => None,
        }
    }
}

/// One repetition's resumable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub rep: usize,
    pub oracle: OracleSpec,
    pub state: BoState,
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    version: u32,
    sha256: String,
    payload: &'a RawValue,
}

#[derive(Deserialize)]
struct EnvelopeIn<'a> {
    version: u32,
    sha256: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a checkpoint. Equal states give identical bytes.
pub fn encode_checkpoint(cp: &Checkpoint) -> Result<String> {
    let payload = serde_json::to_string(cp)?;
    let raw = RawValue::from_string(payload)?;
    let env = EnvelopeOut {
        version: CHECKPOINT_VERSION,
        sha256: digest(raw.get().as_bytes()),
        payload: &raw,
    };
    let mut out = serde_json::to_string(&env)?;
    out.push('\n');
    Ok(out)
}

/// Parses and verifies a checkpoint, rebuilding the surrogate models.
pub fn decode_checkpoint(text: &str) -> Result<Checkpoint> {
    let env: EnvelopeIn = serde_json::from_str(text).map_err(|e| Error::Integrity(format!("unreadable envelope: {e}")))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: env.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if digest(env.payload.get().as_bytes()) != env.sha256 {
        return Err(Error::Integrity("payload hash does not match".into()));
    }
    let mut cp: Checkpoint =
        serde_json::from_str(env.payload.get()).map_err(|e| Error::Integrity(format!("bad payload: {e}")))?;
    cp.state.restore_models()?;
    Ok(cp)
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let text = encode_checkpoint(cp)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    decode_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{LoopConfig, Policy};

    fn sample() -> Checkpoint {
        let b = Benchmark::by_name("branin-currin", None).unwrap();
        let mut c = LoopConfig::new(Policy::Qpots, b.space(), 2, 6, 10, 3);
        c.ea.pop_size = Some(10);
        c.ea.generations = 3;
        let source = OracleSpec::Benchmark {
            benchmark: b,
            noise_var: 1e-3,
        };
        let mut state = BoState::new(c).unwrap();
        let mut oracle = source.oracle(&state).unwrap();
        state.step(&mut oracle).unwrap();
        state.step(&mut oracle).unwrap();
        for r in &mut state.history.records {
            r.wallclock_s = 0.0;
        }
        Checkpoint {
            rep: 0,
            oracle: source,
            state,
        }
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let cp = sample();
        let a = encode_checkpoint(&cp).unwrap();
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.state.models().len(), 2);
        assert_eq!(encode_checkpoint(&back).unwrap(), a);
        assert_eq!(encode_checkpoint(&cp).unwrap(), a);
    }

    #[test]
    fn corruption_is_detected() {
        let text = encode_checkpoint(&sample()).unwrap();
        let i = text.find("\"iteration\":1").expect("iteration field");
        let mut bad = text.clone();
        bad.replace_range(i..i + 13, "\"iteration\":2");
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Integrity(_))));
        assert!(matches!(decode_checkpoint(&text[..text.len() / 2]), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = encode_checkpoint(&sample()).unwrap().replacen("\"version\":1", "\"version\":7", 1);
        match decode_checkpoint(&text) {
            Err(Error::Version { found, expected }) => assert_eq!((found, expected), (7, CHECKPOINT_VERSION)),
            other => panic!("{other:?}"),
        }
    }
}
