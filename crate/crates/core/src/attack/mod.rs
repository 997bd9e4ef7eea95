//! Universal trigger attacks on rationales.
//!
//! A trigger set is a small collection of token groups inserted at fixed
//! unit positions of every document. The search tunes those tokens so the
//! victim model's rationale moves (away from where it was, or onto the
//! triggers themselves) while its prediction stays pinned to the clean
//! output. Everything is white-box and inference-time: model parameters
//! are read, never written.
//!
//! Submodules: [`layout`] builds adversarial inputs and the label
//! sequences the losses compare against; [`loss`] evaluates the batch
//! objective on a tape; [`search`] runs the greedy token search;
//! [`eval`] scores a trigger set on a split and handles transfer.

pub mod eval;
pub mod layout;
pub mod loss;
pub mod search;

pub use eval::{empty_trigger_set, evaluate_attack, fixed_trigger_set, EvalOutcome, SampleOutcome};
pub use layout::{
    build_layout, default_positions, fill_triggers, splice_label_sequences, AdvLayout,
    LabelSequences, TriggerShape,
};
pub use loss::{batch_attack_loss, LossConfig, Measure, Mode};
pub use search::{search, QueryMethod, RoundRecord, SearchConfig, SearchOutcome};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Level;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::scalar::Scalar;

const TRIGGER_FORMAT: &str = "trigger-set";
const TRIGGER_VERSION: u32 = 1;

/// A concrete trigger set tied to one vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSet {
    pub mode: Mode,
    pub level: Level,
    /// Insertion positions in clean unit space; -1 addresses the end.
    pub positions: Vec<i64>,
    /// Token ids, one row per group; all rows have equal length.
    pub ids: Vec<Vec<usize>>,
    /// Token surfaces matching `ids`, for human inspection.
    pub surfaces: Vec<Vec<String>>,
    /// Hash of the vocabulary the ids index into.
    pub vocab_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct TriggerFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    set: TriggerSet,
}

impl TriggerSet {
    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.ids.len() || self.ids.len() != self.surfaces.len() {
            return Err(Error::Attack(format!(
                "inconsistent trigger set: {} positions, {} id groups, {} surface groups",
                self.positions.len(),
                self.ids.len(),
                self.surfaces.len()
            )));
        }
        let len = self.ids.first().map(Vec::len).unwrap_or(0);
        for (g, ids) in self.ids.iter().enumerate() {
            if ids.len() != len {
                return Err(Error::Attack(format!(
                    "trigger group {} has {} tokens, expected {}",
                    g,
                    ids.len(),
                    len
                )));
            }
        }
        for &p in &self.positions {
            if p < -1 {
                return Err(Error::Attack(format!("invalid trigger position {}", p)));
            }
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.ids.len()
    }

    pub fn tokens_per_group(&self) -> usize {
        self.ids.first().map(Vec::len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.group_count() == 0 || self.tokens_per_group() == 0
    }

    pub fn shape(&self) -> TriggerShape {
        TriggerShape {
            positions: self.positions.clone(),
            tokens_per_group: self.tokens_per_group(),
        }
    }

    /// Checks the set indexes the same vocabulary as `bundle`.
    pub fn check_compatible<S: Scalar>(&self, bundle: &ModelBundle<S>) -> Result<()> {
        if self.vocab_hash != bundle.vocab_hash() {
            return Err(Error::Attack(
                "trigger set was built for a different vocabulary".to_string(),
            ));
        }
        for ids in &self.ids {
            for &id in ids {
                if id >= bundle.vocab_size() {
                    return Err(Error::Attack(format!("trigger id {} out of vocabulary", id)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = TriggerFile {
            format: TRIGGER_FORMAT.to_string(),
            version: TRIGGER_VERSION,
            set: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: TriggerFile = serde_json::from_str(&text).map_err(|e| {
            Error::Artifact(format!("{}: not a trigger file: {}", path.display(), e))
        })?;
        if file.format != TRIGGER_FORMAT {
            return Err(Error::Artifact(format!(
                "{}: unexpected format {:?}",
                path.display(),
                file.format
            )));
        }
        if file.version != TRIGGER_VERSION {
            return Err(Error::Artifact(format!(
                "{}: unsupported version {}",
                path.display(),
                file.version
            )));
        }
        file.set.validate()?;
        Ok(file.set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> TriggerSet {
        TriggerSet {
            mode: Mode::NonTarget,
            level: Level::Token,
            positions: vec![0, 4, -1],
            ids: vec![vec![7, 8], vec![9, 10], vec![11, 12]],
            surfaces: vec![
                vec!["a".into(), "b".into()],
                vec!["c".into(), "d".into()],
                vec!["e".into(), "f".into()],
            ],
            vocab_hash: 0xfeed,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let set = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triggers.json");
        set.save(&path).unwrap();
        let back = TriggerSet::load(&path).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn ragged_groups_rejected() {
        let mut set = sample_set();
        set.ids[1].pop();
        set.surfaces[1].pop();
        assert!(set.validate().is_err());
    }

    #[test]
    fn bad_position_rejected() {
        let mut set = sample_set();
        set.positions[0] = -2;
        assert!(set.validate().is_err());
    }

    #[test]
    fn malformed_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triggers.json");
        std::fs::write(&path, "{\"format\": \"something else\"}").unwrap();
        assert!(TriggerSet::load(&path).is_err());
    }
}
