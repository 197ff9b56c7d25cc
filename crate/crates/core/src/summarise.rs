//! The trainable bigram policy, the extractive centroid baseline, and
//! timeline assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_sentences, tokenize, DayStamp, EventSummary, Timeline};
use crate::embedding::{cosine_with_flag, RemoteConfig, Vector};
use crate::error::{Error, Result};
use crate::remote::JsonClient;

pub const END_TOKEN: &str = "<end>";

/// Softmax policy `π(·|prev) = softmax((u + B[prev]) / τ)` over a fixed
/// vocabulary whose last entry is the end token.
///
/// Parameters live in one flat vector: the `V` unigram logits followed by
/// `V` bigram rows of length `V`. Row 0 is the start context; row `i + 1` is
/// the context "previous token was `i`".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPolicy {
    pub vocabulary: Vec<String>,
    pub temperature: f64,
    pub theta: Vec<f64>,
}

/// Tokens a policy may emit. `support_for` always admits the end token;
/// `from_indices` admits exactly the indices given.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support(Vec<bool>);

impl Support {
    pub fn full(vocab_size: usize) -> Self {
        Support(vec![true; vocab_size])
    }

    pub fn from_indices(vocab_size: usize, allowed: &[usize]) -> Self {
        let mut mask = vec![false; vocab_size];
        for &i in allowed {
            mask[i] = true;
        }
        Support(mask)
    }

    pub fn allows(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn policy_init_from_cluster(text: &str, temperature: f64) -> Result<TokenPolicy> {
    TokenPolicy::from_sentences(&split_sentences(text), temperature)
}

impl TokenPolicy {
    /// A policy with all logits zero over `tokens` plus the end token.
    pub fn uniform(tokens: &[&str], temperature: f64) -> Result<Self> {
        let mut vocabulary: Vec<String> = tokens.iter().map(|t| t.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
        if vocabulary.is_empty() {
            return Err(Error::validation("policy vocabulary is empty"));
        }
        if vocabulary.iter().any(|t| t == END_TOKEN) {
            return Err(Error::validation("the end token is reserved"));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::validation("temperature must be positive"));
        }
        vocabulary.push(END_TOKEN.to_owned());
        let v = vocabulary.len();
        Ok(TokenPolicy {
            vocabulary,
            temperature,
            theta: vec![0.0; v + v * v],
        })
    }

    /// Unigram logits `ln(freq)`, bigram logits `ln(count + 1)`. Sentence
    /// starts count as bigrams from the start context and sentence ends as
    /// bigrams into the end token.
    pub fn from_sentences<S: AsRef<str>>(sentences: &[S], temperature: f64) -> Result<Self> {
        let tokenized: Vec<Vec<String>> = sentences.iter().map(|s| tokenize(s.as_ref())).filter(|t| !t.is_empty()).collect();
        let all: Vec<&str> = tokenized.iter().flatten().map(String::as_str).collect();
        if all.is_empty() {
            return Err(Error::validation("cannot initialise a policy from empty text"));
        }
        let mut policy = TokenPolicy::uniform(&all, temperature)?;
        let v = policy.vocab_size();
        let end = v - 1;
        let mut unigram = vec![0usize; v];
        let mut bigram: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for sent in &tokenized {
            let ids: Vec<usize> = sent.iter().map(|t| policy.index_of(t).expect("token in vocabulary")).collect();
            let mut prev = None;
            for &i in ids.iter().chain(std::iter::once(&end)) {
                unigram[i] += 1;
                *bigram.entry((Self::context(prev), i)).or_insert(0) += 1;
                prev = Some(i);
            }
        }
        let total: usize = unigram.iter().sum();
        for (i, &c) in unigram.iter().enumerate() {
            policy.theta[i] = (c as f64 / total as f64).ln();
        }
        for ((ctx, i), c) in bigram {
            policy.theta[v + ctx * v + i] = (c as f64 + 1.0).ln();
        }
        Ok(policy)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn end_index(&self) -> usize {
        self.vocabulary.len() - 1
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocabulary[..self.end_index()]
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
    }

    fn context(prev: Option<usize>) -> usize {
        prev.map_or(0, |i| i + 1)
    }

    pub fn unigram_logits(&self) -> &[f64] {
        &self.theta[..self.vocab_size()]
    }

    pub fn bigram_row(&self, prev: Option<usize>) -> &[f64] {
        let v = self.vocab_size();
        let start = v + Self::context(prev) * v;
        &self.theta[start..start + v]
    }

    /// Tokens of `text` that are in the vocabulary, plus the end token.
    pub fn support_for(&self, text: &str) -> Support {
        let mut allowed: Vec<usize> = tokenize(text).iter().filter_map(|t| self.index_of(t)).collect();
        allowed.push(self.end_index());
        Support::from_indices(self.vocab_size(), &allowed)
    }

    /// `π(·|prev)` restricted to `support`; excluded tokens get probability 0.
    pub fn distribution(&self, prev: Option<usize>, support: &Support) -> Vec<f64> {
        let v = self.vocab_size();
        let (u, b) = (self.unigram_logits(), self.bigram_row(prev));
        let mut logits = vec![f64::NEG_INFINITY; v];
        let mut max = f64::NEG_INFINITY;
        for i in 0..v {
            if support.allows(i) {
                logits[i] = (u[i] + b[i]) / self.temperature;
                max = max.max(logits[i]);
            }
        }
        let mut p: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 }).collect();
        let z: f64 = p.iter().sum();
        for x in &mut p {
            *x /= z;
        }
        p
    }

    pub fn log_prob(&self, prev: Option<usize>, action: usize, support: &Support) -> f64 {
        self.distribution(prev, support)[action].ln()
    }

    /// Adds `scale · ∇θ log π(action | prev)` into `grad`.
    pub fn accumulate_log_prob_grad(&self, prev: Option<usize>, action: usize, support: &Support, scale: f64, grad: &mut [f64]) {
        let v = self.vocab_size();
        let p = self.distribution(prev, support);
        let row = v + Self::context(prev) * v;
        for k in 0..v {
            if !support.allows(k) {
                continue;
            }
            let d = scale * ((k == action) as u8 as f64 - p[k]) / self.temperature;
            grad[k] += d;
            grad[row + k] += d;
        }
    }

    /// Samples until the end token or `max_tokens`; the end token is not
    /// part of the returned actions.
    pub fn sample_with<R: Rng>(&self, support: &Support, max_tokens: usize, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
        let mut actions = Vec::new();
        let mut log_probs = Vec::new();
        let mut prev = None;
        while actions.len() < max_tokens {
            let p = self.distribution(prev, support);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = None;
            for (i, &pi) in p.iter().enumerate() {
                if pi > 0.0 {
                    acc += pi;
                    choice = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            let a = choice.expect("support is never empty");
            if a == self.end_index() {
                break;
            }
            actions.push(a);
            log_probs.push(p[a].ln());
            prev = Some(a);
        }
        (actions, log_probs)
    }

    /// Argmax decoding; ties go to the lower vocabulary index.
    pub fn greedy_with(&self, support: &Support, max_tokens: usize) -> Vec<usize> {
        let mut actions = Vec::new();
        let mut prev = None;
        while actions.len() < max_tokens {
            let p = self.distribution(prev, support);
            let mut best = 0;
            for i in 1..p.len() {
                if p[i] > p[best] {
                    best = i;
                }
            }
            if best == self.end_index() {
                break;
            }
            actions.push(best);
            prev = Some(best);
        }
        actions
    }

    pub fn detokenize(&self, actions: &[usize]) -> String {
        actions.iter().map(|&a| self.vocabulary[a].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let p: TokenPolicy = serde_json::from_slice(&bytes)?;
        let v = p.vocab_size();
        if v < 2 || p.vocabulary[v - 1] != END_TOKEN || p.theta.len() != v + v * v {
            return Err(Error::validation(format!("{} is not a valid policy checkpoint", path.display())));
        }
        Ok(p)
    }
}

/// Anything that can produce summaries for a source text.
pub trait PolicyContract: Send + Sync {
    fn sample(&self, source: &str, seed: u64, max_tokens: usize) -> Result<(Vec<String>, Vec<f64>)>;
    fn greedy(&self, source: &str, max_tokens: usize) -> Result<Vec<String>>;
    /// Whether analytic log-probability gradients are available.
    fn log_prob_grad(&self) -> bool;
}

impl PolicyContract for TokenPolicy {
    fn sample(&self, source: &str, seed: u64, max_tokens: usize) -> Result<(Vec<String>, Vec<f64>)> {
        let support = self.support_for(source);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (actions, log_probs) = self.sample_with(&support, max_tokens, &mut rng);
        Ok((actions.iter().map(|&a| self.vocabulary[a].clone()).collect(), log_probs))
    }

    fn greedy(&self, source: &str, max_tokens: usize) -> Result<Vec<String>> {
        let support = self.support_for(source);
        Ok(self.greedy_with(&support, max_tokens).iter().map(|&a| self.vocabulary[a].clone()).collect())
    }

    fn log_prob_grad(&self) -> bool {
        true
    }
}

#[derive(Serialize)]
struct SampleRequest<'a> {
    source: &'a str,
    seed: u64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct SampleResponse {
    tokens: Vec<String>,
    log_probs: Vec<f64>,
}

#[derive(Serialize)]
struct GreedyRequest<'a> {
    source: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct GreedyResponse {
    tokens: Vec<String>,
}

/// Generation-only client for an external summariser.
#[derive(Debug)]
pub struct RemotePolicy {
    client: JsonClient,
}

pub fn remote_policy(endpoint: &str, config: &RemoteConfig) -> Result<RemotePolicy> {
    Ok(RemotePolicy {
        client: JsonClient::new(endpoint, config.timeout, config.retries)?,
    })
}

impl PolicyContract for RemotePolicy {
    fn sample(&self, source: &str, seed: u64, max_tokens: usize) -> Result<(Vec<String>, Vec<f64>)> {
        let r: SampleResponse = self.client.post("/sample", &SampleRequest { source, seed, max_tokens })?;
        if r.tokens.len() != r.log_probs.len() {
            return Err(Error::Contract(format!(
                "policy returned {} tokens but {} log-probabilities",
                r.tokens.len(),
                r.log_probs.len()
            )));
        }
        if r.tokens.len() > max_tokens {
            return Err(Error::Contract(format!("policy exceeded max_tokens={max_tokens}")));
        }
        if r.log_probs.iter().any(|&l| !(l <= 0.0)) {
            return Err(Error::Contract("log-probabilities must be non-positive".into()));
        }
        Ok((r.tokens, r.log_probs))
    }

    fn greedy(&self, source: &str, max_tokens: usize) -> Result<Vec<String>> {
        let r: GreedyResponse = self.client.post("/greedy", &GreedyRequest { source, max_tokens })?;
        if r.tokens.len() > max_tokens {
            return Err(Error::Contract(format!("policy exceeded max_tokens={max_tokens}")));
        }
        Ok(r.tokens)
    }

    fn log_prob_grad(&self) -> bool {
        false
    }
}

/// Greedy extractive selection towards the centroid. Returns indices into
/// `sentences` in selection order.
pub fn centroid_opt(sentences: &[(String, Vector)], centroid: &Vector, budget: usize) -> Result<Vec<usize>> {
    const REDUNDANCY: f64 = 0.95;
    let mut selected: Vec<usize> = Vec::new();
    let mut sum = Vector::zeros(centroid.dim());
    while selected.len() < budget {
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, e)) in sentences.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let mut redundant = false;
            for &j in &selected {
                if cosine_with_flag(e, &sentences[j].1)?.0 > REDUNDANCY {
                    redundant = true;
                    break;
                }
            }
            if redundant {
                continue;
            }
            let mean = Vector::new(sum.as_slice().iter().zip(e.as_slice()).map(|(a, b)| a + b).collect())?;
            let score = cosine_with_flag(&mean, centroid)?.0;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let Some((i, _)) = best else { break };
        sum = Vector::new(sum.as_slice().iter().zip(sentences[i].1.as_slice()).map(|(a, b)| a + b).collect())?;
        selected.push(i);
    }
    Ok(selected)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    Greedy,
    Sample(u64),
}

pub fn generate_event_summary(
    policy: &dyn PolicyContract,
    source: &str,
    date: DayStamp,
    decode: Decode,
    max_tokens: usize,
) -> Result<EventSummary> {
    let tokens = match decode {
        Decode::Greedy => policy.greedy(source, max_tokens)?,
        Decode::Sample(seed) => policy.sample(source, seed, max_tokens)?.0,
    };
    Ok(EventSummary::new(date, tokens.join(" ")))
}

pub fn assemble_timeline(topic: &str, summaries: Vec<EventSummary>) -> Timeline {
    Timeline::from_entries(topic, summaries)
}
