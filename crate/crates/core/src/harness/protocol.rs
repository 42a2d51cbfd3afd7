//! Ask/tell exchange with an external oracle, one JSON object per line.
//!
//! Proposals: `{"id": 12, "x": [...]}`. Observations: `{"id": 12, "y": [...]}`
//! or `{"id": 12, "failed": true}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::output::RepFiles;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskRow {
    pub id: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TellRow {
    pub id: usize,
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    #[serde(default)]
    pub failed: bool,
}

/// Proposes the next batch of the run stored at `state_path` and marks it
/// pending.
pub fn ask(state_path: &Path) -> Result<Vec<AskRow>> {
    let mut cp = load_checkpoint(state_path)?;
    let proposal = cp.state.propose()?;
    save_checkpoint(state_path, &cp)?;
    Ok(proposal
        .ids()
        .zip(proposal.points)
        .map(|(id, x)| AskRow { id, x })
        .collect())
}

/// Feeds observations of the pending batch back and refits the models.
pub fn tell(state_path: &Path, rows: &[TellRow]) -> Result<()> {
    let t = Instant::now();
    let mut cp = load_checkpoint(state_path)?;
    let pending = cp
        .state
        .pending
        .as_ref()
        .ok_or_else(|| Error::Protocol("no pending batch; call ask first".into()))?;
    let ids = pending.ids();
    let mut by_id: BTreeMap<usize, Option<Vec<f64>>> = BTreeMap::new();
    for row in rows {
        if !ids.contains(&row.id) {
            return Err(Error::Protocol(format!("id {} is not pending (pending {:?})", row.id, ids)));
        }
        let value = match (row.failed, &row.y) {
            (true, _) => None,
            (false, Some(y)) => Some(y.clone()),
            (false, None) => return Err(Error::Protocol(format!("id {}: missing `y`", row.id))),
        };
        if by_id.insert(row.id, value).is_some() {
            return Err(Error::Protocol(format!("id {} reported twice", row.id)));
        }
    }
    if let Some(missing) = ids.clone().find(|i| !by_id.contains_key(i)) {
        return Err(Error::Protocol(format!("no observation for id {missing}")));
    }
    let obs: Vec<Option<Vec<f64>>> = by_id.into_values().collect();
    cp.state.incorporate(obs, t.elapsed().as_secs_f64())?;
    save_checkpoint(state_path, &cp)?;
    if let Some(dir) = state_path.parent() {
        let files = RepFiles::new(dir, cp.rep);
        if files.history().exists() {
            files.append(cp.state.history.records.last().expect("incorporate adds a record"))?;
        } else {
            files.reset(&cp.state)?;
        }
        if cp.state.is_done() {
            files.finish(&cp.state)?;
        }
    }
    Ok(())
}

pub fn format_proposals(rows: &[AskRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses observation lines; blank lines are skipped.
pub fn parse_observations(text: &str) -> Result<Vec<TellRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Protocol(format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_lines() {
        let rows = parse_observations("{\"id\": 3, \"y\": [1.0, 2.0]}\n\n{\"id\": 4, \"failed\": true}\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].y, Some(vec![1.0, 2.0]));
        assert!(rows[1].failed && rows[1].y.is_none());
        assert!(matches!(parse_observations("{\"id\": 1, \"z\": 2}"), Err(Error::Protocol(_))));
        assert!(matches!(parse_observations("not json"), Err(Error::Protocol(_))));
    }
}
