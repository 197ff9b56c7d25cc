//! Run configuration, read from a TOML key-value file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{hashed_embedding_provider, remote_embedding_provider, tfidf_fit, EmbeddingCache, EmbeddingProvider, RemoteConfig};
use crate::corpus::ArticleCollection;
use crate::error::{Error, Result};
use crate::event_detection::Algorithm;
use crate::gppl::GpplConfig;
use crate::reward::{ngram_lm_fit, remote_lm, LmScorer, RewardConfig};
use crate::rl::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PipelineConfig {
    pub seed: u64,
    pub runs_root: PathBuf,
    pub corpus: Option<PathBuf>,
    pub embedding: EmbeddingConfig,
    pub detection: DetectionConfig,
    pub candidates: CandidateConfig,
    pub gppl: GpplSection,
    pub reward: RewardSection,
    pub train: TrainSection,
    pub generate: GenerateConfig,
    pub serve: ServeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            runs_root: PathBuf::from("runs"),
            corpus: None,
            embedding: EmbeddingConfig::default(),
            detection: DetectionConfig::default(),
            candidates: CandidateConfig::default(),
            gppl: GpplSection::default(),
            reward: RewardSection::default(),
            train: TrainSection::default(),
            generate: GenerateConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hashed,
    Tfidf,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    pub dim: usize,
    pub hash_seed: u64,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub retries: usize,
    pub batch_size: usize,
    pub max_concurrency: usize,
    /// Cache file for remote embeddings; relative paths live in the run directory.
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        let remote = RemoteConfig::default();
        EmbeddingConfig {
            provider: ProviderKind::Hashed,
            dim: 64,
            hash_seed: 0,
            endpoint: None,
            timeout_secs: remote.timeout.as_secs(),
            retries: remote.retries,
            batch_size: remote.batch_size,
            max_concurrency: remote.max_concurrency,
            cache: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn remote_config(&self) -> RemoteConfig {
        RemoteConfig {
            timeout: Duration::from_secs(self.timeout_secs),
            retries: self.retries,
            batch_size: self.batch_size.max(1),
            max_concurrency: self.max_concurrency.max(1),
        }
    }

    pub fn build(&self, corpus: &ArticleCollection, run_dir: &Path) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self.provider {
            ProviderKind::Hashed => Box::new(hashed_embedding_provider(self.dim, self.hash_seed)?),
            ProviderKind::Tfidf => Box::new(tfidf_fit(corpus)?),
            ProviderKind::Remote => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::validation("remote embedding provider needs embedding.endpoint"))?;
                let cache = match &self.cache {
                    Some(p) => EmbeddingCache::open(run_dir.join(p))?,
                    None => EmbeddingCache::in_memory(),
                };
                Box::new(remote_embedding_provider(endpoint, self.dim, self.remote_config(), cache)?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DetectionConfig {
    pub algorithm: Algorithm,
    pub threshold: f64,
    pub inflation: f64,
    pub max_iter: usize,
    /// Used when no reference timeline fixes the number of events.
    pub top_l: usize,
    pub truncate_sentences: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            algorithm: Algorithm::Agglomerative,
            threshold: 0.7,
            inflation: 2.0,
            max_iter: 100,
            top_l: 10,
            truncate_sentences: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CandidateConfig {
    pub count: usize,
    pub centroid_budget: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            count: 5,
            centroid_budget: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GpplSection {
    pub lengthscale: Option<f64>,
    pub signal_variance: f64,
    pub noise: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub jitter: f64,
}

impl Default for GpplSection {
    fn default() -> Self {
        let g = GpplConfig::default();
        GpplSection {
            lengthscale: g.lengthscale,
            signal_variance: g.signal_variance,
            noise: g.noise,
            max_iter: g.max_iter,
            tolerance: g.tolerance,
            jitter: g.jitter,
        }
    }
}

impl From<&GpplSection> for GpplConfig {
    fn from(s: &GpplSection) -> Self {
        GpplConfig {
            lengthscale: s.lengthscale,
            signal_variance: s.signal_variance,
            noise: s.noise,
            max_iter: s.max_iter,
            tolerance: s.tolerance,
            jitter: s.jitter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmKind {
    Ngram,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RewardSection {
    pub w: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub normalize_keywords: bool,
    pub lm: LmKind,
    pub lm_order: usize,
    pub lm_discount: f64,
    pub lm_endpoint: Option<String>,
    /// Keywords recorded per topic when a reference is used to simulate the annotator.
    pub simulated_keywords: usize,
}

impl Default for RewardSection {
    fn default() -> Self {
        let r = RewardConfig::default();
        RewardSection {
            w: r.w,
            gamma1: r.gamma1,
            gamma2: r.gamma2,
            gamma3: r.gamma3,
            gamma4: r.gamma4,
            normalize_keywords: r.normalize_keywords,
            lm: LmKind::Ngram,
            lm_order: 3,
            lm_discount: 0.1,
            lm_endpoint: None,
            simulated_keywords: 10,
        }
    }
}

impl RewardSection {
    /// Reward weights with a placeholder α, to be calibrated.
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            w: self.w,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            gamma3: self.gamma3,
            gamma4: self.gamma4,
            alpha: 1.0,
            normalize_keywords: self.normalize_keywords,
        }
    }

    pub fn build_lm(&self, corpus: &ArticleCollection, remote: &RemoteConfig) -> Result<Box<dyn LmScorer>> {
        Ok(match self.lm {
            LmKind::Ngram => Box::new(ngram_lm_fit(corpus, self.lm_order, self.lm_discount)?),
            LmKind::Remote => {
                let endpoint = self
                    .lm_endpoint
                    .as_deref()
                    .ok_or_else(|| Error::validation("remote language model needs reward.lm-endpoint"))?;
                Box::new(remote_lm(endpoint, remote)?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainSection {
    pub episodes_per_cluster: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_summary_tokens: usize,
    pub reward_stride: usize,
    pub delta_shaping: bool,
    pub temperature: f64,
    pub per_cluster_policy: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            episodes_per_cluster: t.episodes_per_cluster,
            actor_lr: t.actor_lr,
            critic_lr: t.critic_lr,
            adam_beta1: t.adam_betas.0,
            adam_beta2: t.adam_betas.1,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            max_summary_tokens: t.max_summary_tokens,
            reward_stride: t.reward_stride,
            delta_shaping: t.delta_shaping,
            temperature: t.temperature,
            per_cluster_policy: false,
            checkpoint_every: 25,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            episodes_per_cluster: self.episodes_per_cluster,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            adam_betas: (self.adam_beta1, self.adam_beta2),
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            max_summary_tokens: self.max_summary_tokens,
            reward_stride: self.reward_stride,
            delta_shaping: self.delta_shaping,
            temperature: self.temperature,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenerateConfig {
    pub window_days: u32,
    /// External summariser used for untrained candidates and zero-shot output.
    pub policy_endpoint: Option<String>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            window_days: 0,
            policy_endpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ServeConfig {
    pub bind: String,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1:8080".into(),
            static_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            message: e.message().to_owned(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut reward = self.reward.reward_config();
        reward.alpha = 1.0;
        reward.validate()?;
        self.train.train_config(self.seed).validate()?;
        if !(0.0..=2.0).contains(&self.detection.threshold) {
            return Err(Error::validation("detection.threshold must lie in [0, 2]"));
        }
        if self.detection.inflation <= 1.0 {
            return Err(Error::validation("detection.inflation must exceed 1"));
        }
        if self.detection.top_l == 0 {
            return Err(Error::validation("detection.top-l must be at least 1"));
        }
        if self.candidates.count == 0 {
            return Err(Error::validation("candidates.count must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serialises")
    }

    /// SHA-256 of the canonical serialisation, leaving out where runs live
    /// and how the server binds since neither changes any artifact.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig {
            runs_root: PathBuf::new(),
            serve: ServeConfig::default(),
            ..self.clone()
        };
        hash_hex(canonical.to_toml().as_bytes())
    }

    /// A seed for one stage, derived from the root seed and the stage label.
    pub fn stage_seed(&self, label: &str) -> u64 {
        let digest = Sha256::digest(format!("{}:{label}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Sub-rewards switched off for an ablation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Ablation {
    pub no_r1: bool,
    pub no_r2: bool,
    pub no_r3r4: bool,
}

impl Ablation {
    pub fn apply(&self, mut cfg: RewardConfig) -> RewardConfig {
        if self.no_r1 {
            cfg.gamma1 = 0.0;
        }
        if self.no_r2 {
            cfg.gamma2 = 0.0;
        }
        if self.no_r3r4 {
            cfg.gamma3 = 0.0;
            cfg.gamma4 = 0.0;
        }
        cfg
    }
}

/// How a policy was trained; part of the training checkpoint identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainVariant {
    pub ablation: Ablation,
    pub per_cluster_policy: bool,
}

pub fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
