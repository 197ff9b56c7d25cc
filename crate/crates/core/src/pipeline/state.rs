//! Per-run state file and stage gating.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DetectionConfig, PipelineConfig, TrainVariant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Detected,
    Candidates,
    PreferencesCollected,
    RewardLearned,
    Trained,
    Generated,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Detected => "detected",
            Stage::Candidates => "candidates",
            Stage::PreferencesCollected => "preferences-collected",
            Stage::RewardLearned => "reward-learned",
            Stage::Trained => "trained",
            Stage::Generated => "generated",
        }
    }

    /// The command that completes this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Detected => "detect",
            Stage::Candidates => "candidates",
            Stage::PreferencesCollected => "serve",
            Stage::RewardLearned => "learn-reward",
            Stage::Trained => "train",
            Stage::Generated => "generate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub run_id: String,
    /// Furthest stage reached.
    pub stage: Stage,
    pub completed: BTreeSet<Stage>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub config_hash: String,
    pub corpus: PathBuf,
    pub corpus_hash: String,
    /// Detection settings after command-line overrides.
    pub detection: DetectionConfig,
    pub top_l: usize,
    #[serde(default)]
    pub train_variant: Option<TrainVariant>,
}

impl PipelineState {
    pub fn record(&mut self, stage: Stage) {
        self.completed.insert(stage);
        self.stage = self.stage.max(stage);
    }
}

/// A run directory under the configured runs root.
#[derive(Clone, Debug)]
pub struct Run {
    pub id: String,
    pub dir: PathBuf,
    pub config: PipelineConfig,
}

pub const STATE_FILE: &str = "state.json";

impl Run {
    pub fn new(config: PipelineConfig, run_id: &str) -> Result<Self> {
        let ok = !run_id.is_empty()
            && run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
            && !run_id.starts_with('.');
        if !ok {
            return Err(Error::validation(format!(
                "run id {run_id:?} must be non-empty and use only letters, digits, '-', '_' or '.'"
            )));
        }
        Ok(Run {
            id: run_id.to_owned(),
            dir: config.runs_root.join(run_id),
            config,
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn load_state(&self) -> Result<Option<PipelineState>> {
        let p = self.path(STATE_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save_state(&self, state: &PipelineState) -> Result<()> {
        let p = self.path(STATE_FILE);
        let tmp = p.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(state)?;
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
    }

    /// Loads the state and checks that every stage in `needs` has completed
    /// and that the configuration is the one the run started with.
    pub fn require(&self, needs: &[Stage]) -> Result<PipelineState> {
        let state = self.load_state()?.ok_or_else(|| {
            Error::Stage(format!(
                "run {} has not been started; run `chronoline detect --run-id {}` first",
                self.id, self.id
            ))
        })?;
        for &s in needs {
            if !state.completed.contains(&s) {
                return Err(Error::Stage(format!(
                    "run {} has not reached stage {s}; run `chronoline {}` first",
                    self.id,
                    s.command()
                )));
            }
            for (name, rel) in state.artifacts.iter().filter(|(n, _)| artifact_stage(n) == Some(s)) {
                if !self.path(rel).exists() {
                    return Err(Error::Stage(format!(
                        "artifact {name} of stage {s} is missing at {}",
                        self.path(rel).display()
                    )));
                }
            }
        }
        let hash = self.config.hash();
        if state.config_hash != hash {
            return Err(Error::validation(format!(
                "run {} was started with config {}, current config is {hash}; use a new run id",
                self.id, state.config_hash
            )));
        }
        Ok(state)
    }
}

/// Stage that produces each named artifact.
pub fn artifact_stage(name: &str) -> Option<Stage> {
    Some(match name {
        "clusters" => Stage::Detected,
        "candidates" => Stage::Candidates,
        "preferences" => Stage::PreferencesCollected,
        "score-model" | "reward" | "keyword-set" => Stage::RewardLearned,
        "policy" | "train-log" => Stage::Trained,
        "timeline" => Stage::Generated,
        _ => return None,
    })
}
