//! Versioned JSON checkpoints of trained learners.
//!
//! A checkpoint carries every parameter tensor (with its gradient buffer and
//! optimizer state), the hyperparameters, the step counters and the world it
//! was trained in. Floats are written in shortest round-trip form and parsed
//! exactly, so save followed by load reproduces the learners bit for bit.

use std::fs;
use std::path::Path;

use efa_marl_core::envs::{Scenario, WorldConfig};
use efa_marl_core::qlearn::Learner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub scenario: Scenario,
    pub n_agents: usize,
    pub world: WorldConfig,
    pub team: Learner,
    pub adversary: Option<Learner>,
}

#[derive(Deserialize)]
struct Header {
    version: u32,
}

impl Checkpoint {
    pub fn new(
        scenario: Scenario,
        n_agents: usize,
        world: WorldConfig,
        team: Learner,
        adversary: Option<Learner>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            scenario,
            n_agents,
            world,
            team,
            adversary,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints hold only finite numbers")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let json_err = |e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        };
        let header: Header = serde_json::from_str(text).map_err(json_err)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(json_err)
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}
