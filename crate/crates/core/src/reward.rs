//! The four sub-rewards and their weighted combination.
//!
//! * R1, preference: `w·Σ cos(k_i, s) + (1−w)·f̂(s)` over keyword embeddings
//!   `k_i` and the learned score model `f̂`.
//! * R2, consistency: `cos(s, source)`.
//! * R3, language quality: `(α − loss(text)) / α`.
//! * R4, repetition: `1 − repeats / tokens`.
//!
//! The total is `γ1·R1 + γ2·R2 + γ3·R3 + γ4·R4`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, ArticleCollection};
use crate::embedding::{avg_sentence_embedding, cosine_similarity, cosine_with_flag, EmbeddingProvider, RemoteConfig, Vector};
use crate::error::{Error, Result};
use crate::gppl::ScoreModel;
use crate::remote::JsonClient;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub keywords: Vec<String>,
    pub embeddings: Vec<Vector>,
}

impl KeywordSet {
    pub fn new(keywords: Vec<String>, embeddings: Vec<Vector>) -> Result<Self> {
        if keywords.len() != embeddings.len() {
            return Err(Error::validation(format!(
                "{} keywords but {} embeddings",
                keywords.len(),
                embeddings.len()
            )));
        }
        Ok(KeywordSet { keywords, embeddings })
    }

    /// Embeds each keyword as a standalone sentence.
    pub fn embed(keywords: Vec<String>, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let refs: Vec<&str> = keywords.iter().map(String::as_str).collect();
        let embeddings = provider.embed_batch(&refs)?;
        KeywordSet::new(keywords, embeddings)
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub w: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub alpha: f64,
    #[serde(rename = "normalize-keywords", default)]
    pub normalize_keywords: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w: 0.5,
            gamma1: 0.25,
            gamma2: 0.25,
            gamma3: 0.25,
            gamma4: 0.25,
            alpha: 1.0,
            normalize_keywords: false,
        }
    }
}

impl RewardConfig {
    pub fn gammas(&self) -> [f64; 4] {
        [self.gamma1, self.gamma2, self.gamma3, self.gamma4]
    }

    pub fn with_gammas(mut self, g: [f64; 4]) -> Self {
        [self.gamma1, self.gamma2, self.gamma3, self.gamma4] = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::validation(format!("w must lie in [0,1], got {}", self.w)));
        }
        let g = self.gammas();
        if g.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::validation("sub-reward weights must be finite and non-negative"));
        }
        if g.iter().sum::<f64>() <= 0.0 {
            return Err(Error::validation("at least one sub-reward weight must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::validation(format!("cannot encode reward config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RewardConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            message: e.message().to_owned(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn combine(r: [f64; 4], gammas: [f64; 4]) -> Self {
        RewardBreakdown {
            r1: r[0],
            r2: r[1],
            r3: r[2],
            r4: r[3],
            total: r.iter().zip(gammas).map(|(r, g)| r * g).sum(),
        }
    }
}

/// Scores text by mean per-token negative log-likelihood.
pub trait LmScorer: Send + Sync {
    fn loss(&self, text: &str) -> Result<f64>;
}

pub fn preference_reward(
    summary_emb: &Vector,
    ks: &KeywordSet,
    model: Option<&ScoreModel>,
    w: f64,
    normalize_keywords: bool,
) -> Result<f64> {
    let keyword_term = if w > 0.0 {
        if ks.is_empty() {
            return Err(Error::validation("keyword weight is positive but no keywords were recorded"));
        }
        let mut sum = 0.0;
        for k in &ks.embeddings {
            sum += cosine_with_flag(k, summary_emb)?.0;
        }
        if normalize_keywords {
            sum / ks.len() as f64
        } else {
            sum
        }
    } else {
        0.0
    };
    let score_term = if w < 1.0 {
        let model = model.ok_or_else(|| Error::validation("pairwise weight is positive but no score model was learned"))?;
        model.predict(summary_emb)?.0
    } else {
        0.0
    };
    Ok(w * keyword_term + (1.0 - w) * score_term)
}

pub fn consistency_reward(summary_emb: &Vector, source_emb: &Vector) -> Result<f64> {
    cosine_similarity(summary_emb, source_emb)
}

pub fn language_quality_reward(text: &str, lm: &dyn LmScorer, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::validation("alpha must be positive"));
    }
    Ok((alpha - lm.loss(text)?) / alpha)
}

pub fn repetition_penalty<S: AsRef<str>>(tokens: &[S]) -> f64 {
    if tokens.is_empty() {
        return 1.0;
    }
    let mut seen = HashSet::new();
    let repeats = tokens.iter().filter(|t| !seen.insert(t.as_ref().to_lowercase())).count();
    1.0 - repeats as f64 / tokens.len() as f64
}

/// Everything `compound_reward` needs besides the text.
#[derive(Clone, Copy)]
pub struct RewardContext<'a> {
    pub keywords: &'a KeywordSet,
    pub model: Option<&'a ScoreModel>,
    pub source_embedding: &'a Vector,
    pub lm: &'a dyn LmScorer,
    pub provider: &'a dyn EmbeddingProvider,
    pub config: &'a RewardConfig,
}

/// Computes every sub-reward of `text`. Empty text embeds as the zero vector.
pub fn compound_reward(text: &str, ctx: &RewardContext<'_>) -> Result<RewardBreakdown> {
    let emb = if text.trim().is_empty() {
        Vector::zeros(ctx.provider.dim())
    } else {
        avg_sentence_embedding(text, ctx.provider)?
    };
    let cfg = ctx.config;
    let r1 = preference_reward(&emb, ctx.keywords, ctx.model, cfg.w, cfg.normalize_keywords)?;
    let r2 = cosine_with_flag(&emb, ctx.source_embedding)?.0;
    let r3 = language_quality_reward(text, ctx.lm, cfg.alpha)?;
    let r4 = repetition_penalty(&tokenize(text));
    let b = RewardBreakdown::combine([r1, r2, r3, r4], cfg.gammas());
    if !b.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite reward for {text:?}")));
    }
    Ok(b)
}

pub fn calibrate_alpha<S: AsRef<str>>(lm: &dyn LmScorer, validation_texts: &[S]) -> Result<f64> {
    if validation_texts.is_empty() {
        return Err(Error::validation("alpha calibration needs at least one validation text"));
    }
    let mut alpha = f64::NEG_INFINITY;
    for t in validation_texts {
        alpha = alpha.max(lm.loss(t.as_ref())?);
    }
    if !(alpha > 0.0) {
        return Err(Error::Numerical("maximum validation loss is zero".into()));
    }
    Ok(alpha)
}

const BOS: &str = "<s>";
const EOS: &str = "</s>";

#[derive(Clone, Debug, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<String, u64>,
}

/// Interpolated absolute-discounting n-gram model.
#[derive(Clone, Debug)]
pub struct NgramLm {
    order: usize,
    discount: f64,
    /// `levels[k]` holds contexts of length `k`.
    levels: Vec<HashMap<Vec<String>, ContextCounts>>,
    vocab_size: usize,
}

pub fn ngram_lm_fit(corpus: &ArticleCollection, n: usize, discount: f64) -> Result<NgramLm> {
    if corpus.is_empty() {
        return Err(Error::validation("cannot fit a language model on an empty corpus"));
    }
    let sentences: Vec<&str> = corpus.articles.iter().flat_map(|a| a.sentences.iter().map(String::as_str)).collect();
    NgramLm::fit(&sentences, n, discount)
}

impl NgramLm {
    pub fn fit<S: AsRef<str>>(sentences: &[S], n: usize, discount: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("n-gram order must be at least 1"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::validation("discount must lie in [0,1)"));
        }
        let mut levels: Vec<HashMap<Vec<String>, ContextCounts>> = vec![HashMap::new(); n];
        let mut vocab: HashSet<String> = HashSet::new();
        for s in sentences {
            let seq = Self::padded(&tokenize(s.as_ref()), n);
            for i in (n - 1)..seq.len() {
                vocab.insert(seq[i].clone());
                for (k, level) in levels.iter_mut().enumerate() {
                    let ctx = seq[i - k..i].to_vec();
                    let c = level.entry(ctx).or_default();
                    c.total += 1;
                    *c.next.entry(seq[i].clone()).or_insert(0) += 1;
                }
            }
        }
        Ok(NgramLm {
            order: n,
            discount,
            levels,
            vocab_size: vocab.len(),
        })
    }

    fn padded(tokens: &[String], n: usize) -> Vec<String> {
        let mut seq = vec![BOS.to_owned(); n - 1];
        seq.extend(tokens.iter().cloned());
        seq.push(EOS.to_owned());
        seq
    }

    /// `p(word | history)` with `history` holding at most `order − 1` tokens.
    pub fn prob(&self, history: &[String], word: &str) -> f64 {
        // Uniform floor over the training vocabulary plus one unknown type.
        let mut p = 1.0 / (self.vocab_size as f64 + 1.0);
        for k in 0..self.order.min(history.len() + 1) {
            let ctx = &history[history.len() - k..];
            if let Some(c) = self.levels[k].get(ctx) {
                let count = c.next.get(word).copied().unwrap_or(0) as f64;
                let total = c.total as f64;
                let types = c.next.len() as f64;
                p = (count - self.discount).max(0.0) / total + self.discount * types / total * p;
            }
        }
        p
    }
}

impl LmScorer for NgramLm {
    fn loss(&self, text: &str) -> Result<f64> {
        let seq = Self::padded(&tokenize(text), self.order);
        let start = self.order - 1;
        let mut nll = 0.0;
        for i in start..seq.len() {
            nll -= self.prob(&seq[i - start..i], &seq[i]).ln();
        }
        Ok(nll / (seq.len() - start) as f64)
    }
}

#[derive(Serialize)]
struct LossRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct LossResponse {
    loss: f64,
}

/// Client for an external scorer speaking `POST /loss`.
#[derive(Debug)]
pub struct RemoteLm {
    client: JsonClient,
}

pub fn remote_lm(endpoint: &str, config: &RemoteConfig) -> Result<RemoteLm> {
    Ok(RemoteLm {
        client: JsonClient::new(endpoint, config.timeout, config.retries)?,
    })
}

impl LmScorer for RemoteLm {
    fn loss(&self, text: &str) -> Result<f64> {
        let resp: LossResponse = self.client.post("/loss", &LossRequest { text })?;
        if !(resp.loss.is_finite() && resp.loss >= 0.0) {
            return Err(Error::Contract(format!("scorer returned invalid loss {}", resp.loss)));
        }
        Ok(resp.loss)
    }
}
