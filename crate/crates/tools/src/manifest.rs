//! Split manifests and per-split score files.

use std::fs;
use std::path::Path;

use dml_core::splits::{SplitSequence, StateKind};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToolError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub swap_size: usize,
    pub retained_fraction_floor: f64,
    pub states: Vec<ManifestState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestState {
    pub step: usize,
    /// "initial", "swap" or "removal".
    pub kind: String,
    pub train_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
    pub fid: f64,
}

impl From<&SplitSequence> for Manifest {
    fn from(seq: &SplitSequence) -> Self {
        Manifest {
            swap_size: seq.swap_size,
            retained_fraction_floor: seq.retained_fraction_floor,
            states: seq
                .states
                .iter()
                .map(|s| ManifestState {
                    step: s.step,
                    kind: s.kind.as_str().to_owned(),
                    train_classes: s.train_classes.clone(),
                    test_classes: s.test_classes.clone(),
                    fid: s.fid,
                })
                .collect(),
        }
    }
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        let known = [StateKind::Initial, StateKind::Swap, StateKind::Removal].map(StateKind::as_str);
        if let Some(bad) = m.states.iter().find(|s| !known.contains(&s.kind.as_str())) {
            return Err(ToolError::format(None, format!("unknown state kind {:?}", bad.kind)));
        }
        Ok(m)
    }

    pub fn fids(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.fid).collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScoresFile {
    Bare(Vec<f64>),
    Wrapped { scores: Vec<f64> },
}

/// Either a JSON array of numbers or `{"scores": [...]}`, one per manifest state.
pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    parse_scores(&fs::read(path)?)
}

pub fn parse_scores(bytes: &[u8]) -> Result<Vec<f64>> {
    match serde_json::from_slice(bytes)? {
        ScoresFile::Bare(s) | ScoresFile::Wrapped { scores: s } => Ok(s),
    }
}
