use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::objectives::{DomainMode, LossComponents, Stage};

use super::plan::StagePlan;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Trained parameters of one stage plus the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub plan: StagePlan,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// epoch whose parameters were kept
    pub best_epoch: usize,
    pub finalised: bool,
    pub sets: Vec<(String, ParamSet)>,
    /// SHA-256 of the concatenated parameter bytes, hex
    pub param_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    plan: StagePlan,
    seed: u64,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    finalised: bool,
    sets: Vec<String>,
    param_hash: String,
}

pub(crate) fn hash_sets(sets: &[(String, ParamSet)]) -> String {
    let mut h = Sha256::new();
    for (name, set) in sets {
        h.update(name.as_bytes());
        h.update(set.to_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn set(&self, name: &str) -> Option<&ParamSet> {
        self.sets.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Error unless the checkpoint is finalised and its parameters match the
    /// recorded hash.
    pub fn verify(&self) -> Result<()> {
        if !self.finalised {
            return Err(Error::Integrity(format!("{} checkpoint is not finalised", self.stage)));
        }
        let actual = hash_sets(&self.sets);
        if actual != self.param_hash {
            return Err(Error::Integrity(format!(
                "{} checkpoint parameters hash to {actual}, header records {}",
                self.stage, self.param_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            plan: self.plan.clone(),
            seed: self.seed,
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            finalised: self.finalised,
            sets: self.sets.iter().map(|(n, _)| n.clone()).collect(),
            param_hash: self.param_hash.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, set) in &self.sets {
            out.extend_from_slice(&set.to_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not newline-terminated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        let mut rest = &bytes[nl + 1..];
        let mut sets = Vec::with_capacity(header.sets.len());
        for name in header.sets {
            let (set, used) = ParamSet::from_bytes(rest)?;
            rest = &rest[used..];
            sets.push((name, set));
        }
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after parameter sets", rest.len())));
        }
        Ok(Self {
            stage: header.stage,
            plan: header.plan,
            seed: header.seed,
            history: header.history,
            best_epoch: header.best_epoch,
            finalised: header.finalised,
            sets,
            param_hash: header.param_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn file_name(stage: Stage) -> String {
        format!("{}.ckpt", stage.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub stage: Stage,
    pub mode: DomainMode,
    pub components: LossComponents,
    pub total: f64,
}

/// Append-only training record of one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRecord>,
    /// seconds per epoch; kept apart from the deterministic logs
    pub epoch_seconds: Vec<f64>,
}

pub const STEP_HEADER: &str = "step,stage,mode,L_i,L_k,L_ik,L_ki,total";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:e}"))
}

impl RunLog {
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{STEP_HEADER}\n");
        for r in &self.steps {
            let c = &r.components;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:e}",
                r.step,
                r.stage.short(),
                r.mode,
                opt(c.l_i),
                opt(c.l_k),
                opt(c.l_ik),
                opt(c.l_ki),
                r.total
            )
            .expect("string write");
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            writeln!(out, "{},{:e},{:e}", e.epoch, e.train_loss, e.val_loss).expect("string write");
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for (i, s) in self.epoch_seconds.iter().enumerate() {
            writeln!(out, "{},{s:.3}", i + 1).expect("string write");
        }
        out
    }
}
