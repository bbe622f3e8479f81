//! Provenance records written next to checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{file_name_for, load_checkpoint, write_atomic};
use crate::error::{Error, Result};
use crate::pipelines::{HyperParams, PairSeeds};

/// One paired sweep run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub master_seed: u64,
    pub run_index: usize,
    pub hyperparams: HyperParams,
    pub seeds: PairSeeds,
    pub init_hash: String,
    /// Full hashes of the checkpoints this run produced.
    pub checkpoints: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    /// Checks that every referenced checkpoint exists under `ckpt_dir` and hash-verifies.
    pub fn verify(&self, ckpt_dir: &Path) -> Result<()> {
        for hash in &self.checkpoints {
            let ck = load_checkpoint(&ckpt_dir.join(file_name_for(hash)))?;
            if &ck.hash != hash {
                return Err(Error::InvalidArgument(format!(
                    "manifest {} references {hash} but file holds {}",
                    self.run_id, ck.hash
                )));
            }
        }
        Ok(())
    }
}

/// Progress of a whole experiment; rewritten after every phase so a failure
/// leaves the partial state on disk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    pub master_seed: u64,
    pub completed_phases: Vec<String>,
    pub failed_phase: Option<String>,
    pub error: Option<String>,
    /// Phase label to checkpoint hash.
    pub checkpoints: BTreeMap<String, String>,
    pub runs: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
