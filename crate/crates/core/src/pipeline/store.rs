//! Append-only preference and keyword store.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gppl::PreferencePair;

pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const KEYWORDS_FILE: &str = "keywords.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub task_id: String,
    /// Content hashes of the candidate timelines.
    pub winner: String,
    pub loser: String,
    pub annotator: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRecord {
    pub topic: String,
    pub keywords: Vec<String>,
    pub annotator: String,
    pub timestamp: String,
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Both logs of one run, held in memory and mirrored to disk on every append.
#[derive(Debug)]
pub struct PreferenceStore {
    dir: PathBuf,
    preferences: Vec<PreferenceRecord>,
    keywords: Vec<KeywordRecord>,
}

impl PreferenceStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_owned();
        Ok(PreferenceStore {
            preferences: read_jsonl(&dir.join(PREFERENCES_FILE))?,
            keywords: read_jsonl(&dir.join(KEYWORDS_FILE))?,
            dir,
        })
    }

    pub fn preferences(&self) -> &[PreferenceRecord] {
        &self.preferences
    }

    pub fn keyword_records(&self) -> &[KeywordRecord] {
        &self.keywords
    }

    pub fn choice_for(&self, task_id: &str) -> Option<&PreferenceRecord> {
        self.preferences.iter().find(|r| r.task_id == task_id)
    }

    /// Records a choice; a task can be answered once.
    pub fn append_preference(&mut self, record: PreferenceRecord) -> Result<()> {
        if self.choice_for(&record.task_id).is_some() {
            return Err(Error::Conflict(format!("task {} is already answered", record.task_id)));
        }
        if record.winner == record.loser {
            return Err(Error::validation("a preference needs two different timelines"));
        }
        append_jsonl(&self.dir.join(PREFERENCES_FILE), &record)?;
        self.preferences.push(record);
        Ok(())
    }

    pub fn append_keywords(&mut self, record: KeywordRecord) -> Result<()> {
        if record.keywords.is_empty() {
            return Err(Error::validation("keyword list is empty"));
        }
        append_jsonl(&self.dir.join(KEYWORDS_FILE), &record)?;
        self.keywords.push(record);
        Ok(())
    }

    /// All recorded pairs, pooled across annotators with unit weight.
    pub fn pairs(&self) -> Vec<PreferencePair> {
        self.preferences
            .iter()
            .map(|r| PreferencePair::new(r.winner.clone(), r.loser.clone()))
            .collect()
    }

    /// Keywords for `topic` in recording order, first occurrence kept.
    pub fn keywords_for(&self, topic: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.keywords.iter().filter(|r| r.topic == topic) {
            for k in &r.keywords {
                if !out.contains(k) {
                    out.push(k.clone());
                }
            }
        }
        out
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}
