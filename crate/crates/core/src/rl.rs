//! Actor-critic fine-tuning of the token policy.
//!
//! Step `t` (0-based) takes action `a_t` in state `s_t`, the embedding of the
//! first `t` tokens. Reward `r_j` (1-based) scores the prefix of `j` tokens,
//! and the return from `s_t` is `G(t) = Σ_{j>t} r_j`, undiscounted. The
//! critic is linear, `v̂(s) = w·s + b`, and `Adv(t) = G(t) − v̂(s_t)`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::{avg_sentence_embedding, EmbeddingProvider, Vector};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::reward::{compound_reward, RewardBreakdown, RewardContext};
use crate::summarise::{Support, TokenPolicy};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub states: Vec<Vector>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub weights: Vector,
    pub bias: f64,
}

impl Critic {
    pub fn zeros(dim: usize) -> Self {
        Critic {
            weights: Vector::zeros(dim),
            bias: 0.0,
        }
    }

    pub fn value(&self, state: &Vector) -> Result<f64> {
        if state.dim() != self.weights.dim() {
            return Err(Error::validation(format!(
                "critic expects dimension {}, got {}",
                self.weights.dim(),
                state.dim()
            )));
        }
        Ok(self.weights.dot(state) + self.bias)
    }

    /// Mean squared error against the returns of `batch`.
    pub fn loss(&self, batch: &[Trajectory]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for t in batch {
            for (s, g) in t.states.iter().zip(&t.returns) {
                let e = self.value(s)? - g;
                sum += e * e;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes_per_cluster: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_summary_tokens: usize,
    pub reward_stride: usize,
    pub delta_shaping: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes_per_cluster: 300,
            actor_lr: 2e-4,
            critic_lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.0,
            max_summary_tokens: 48,
            reward_stride: 1,
            delta_shaping: false,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::validation("learning rates must be positive"));
        }
        if self.reward_stride == 0 {
            return Err(Error::validation("reward stride must be at least 1"));
        }
        if self.max_summary_tokens == 0 {
            return Err(Error::validation("max summary tokens must be at least 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam_eps > 0.0) {
            return Err(Error::validation("invalid Adam hyper-parameters"));
        }
        Ok(())
    }
}

/// Scores an arbitrary prefix text.
pub trait PrefixReward: Sync {
    fn reward(&self, text: &str) -> Result<RewardBreakdown>;
}

impl PrefixReward for RewardContext<'_> {
    fn reward(&self, text: &str) -> Result<RewardBreakdown> {
        compound_reward(text, self)
    }
}

impl<F: Fn(&str) -> Result<RewardBreakdown> + Sync> PrefixReward for F {
    fn reward(&self, text: &str) -> Result<RewardBreakdown> {
        self(text)
    }
}

/// Episode RNG: one ChaCha stream per (cluster, episode) under the root seed,
/// so any episode can be replayed without running its predecessors.
pub fn episode_rng(seed: u64, cluster: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((cluster << 32) ^ episode);
    rng
}

pub fn sample_trajectory(policy: &TokenPolicy, support: &Support, max_tokens: usize, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    if policy.vocab_size() < 2 || support.is_empty() {
        return Err(Error::validation("policy has an empty vocabulary"));
    }
    let (tokens, log_probs) = policy.sample_with(support, max_tokens, rng);
    Ok(Trajectory {
        tokens,
        log_probs,
        ..Trajectory::default()
    })
}

/// Fills states and rewards. Prefixes are scored every `stride` tokens and at
/// the end. Returns the breakdown of the full summary.
pub fn score_trajectory(
    t: &mut Trajectory,
    policy: &TokenPolicy,
    reward: &dyn PrefixReward,
    provider: &dyn EmbeddingProvider,
    stride: usize,
    delta_shaping: bool,
) -> Result<RewardBreakdown> {
    if stride == 0 {
        return Err(Error::validation("reward stride must be at least 1"));
    }
    let n = t.len();
    t.states = Vec::with_capacity(n);
    t.rewards = vec![0.0; n];
    let mut last = if delta_shaping { reward.reward("")?.total } else { 0.0 };
    let mut final_breakdown = None;
    for j in 0..n {
        let prefix = policy.detokenize(&t.tokens[..j]);
        t.states.push(if j == 0 {
            Vector::zeros(provider.dim())
        } else {
            avg_sentence_embedding(&prefix, provider)?
        });
        let len = j + 1;
        if len % stride == 0 || len == n {
            let b = reward.reward(&policy.detokenize(&t.tokens[..len]))?;
            t.rewards[j] = if delta_shaping { b.total - last } else { b.total };
            last = b.total;
            if len == n {
                final_breakdown = Some(b);
            }
        }
    }
    match final_breakdown {
        Some(b) => Ok(b),
        None => reward.reward(""),
    }
}

/// Suffix sums, computed as `G(t) = r_{t+1} + G(t+1)` from the back.
pub fn compute_returns(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + acc;
        out[i] = acc;
    }
    out
}

pub fn compute_advantages(returns: &[f64], states: &[Vector], critic: &Critic) -> Result<Vec<f64>> {
    if returns.len() != states.len() {
        return Err(Error::validation("returns and states differ in length"));
    }
    returns.iter().zip(states).map(|(g, s)| Ok(g - critic.value(s)?)).collect()
}

/// Gradient of `Σ_t log π(a_t|s_t)·Adv(t)` over the batch.
pub fn actor_gradient(policy: &TokenPolicy, support: &Support, batch: &[Trajectory]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.theta.len()];
    for t in batch {
        if t.advantages.len() != t.len() {
            return Err(Error::validation("trajectory advantages are not populated"));
        }
        let mut prev = None;
        for (&a, &adv) in t.tokens.iter().zip(&t.advantages) {
            policy.accumulate_log_prob_grad(prev, a, support, adv, &mut grad);
            prev = Some(a);
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite actor gradient; batch aborted".into()));
    }
    Ok(grad)
}

/// One AdamW ascent step on the actor objective.
pub fn actor_update(policy: &mut TokenPolicy, opt: &mut AdamW, support: &Support, batch: &[Trajectory]) -> Result<()> {
    let mut grad = actor_gradient(policy, support, batch)?;
    for g in &mut grad {
        *g = -*g;
    }
    opt.step(&mut policy.theta, &grad);
    Ok(())
}

/// One AdamW descent step on the critic's mean squared error.
pub fn critic_update(critic: &mut Critic, opt: &mut AdamW, batch: &[Trajectory]) -> Result<()> {
    let dim = critic.weights.dim();
    let mut grad = vec![0.0; dim + 1];
    let mut n = 0usize;
    for t in batch {
        if t.returns.len() != t.states.len() {
            return Err(Error::validation("trajectory returns are not populated"));
        }
        for (s, g) in t.states.iter().zip(&t.returns) {
            let e = critic.value(s)? - g;
            for (gi, si) in grad.iter_mut().zip(s.as_slice()) {
                *gi += e * si;
            }
            grad[dim] += e;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(());
    }
    for g in &mut grad {
        *g *= 2.0 / n as f64;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite critic loss; batch aborted".into()));
    }
    let mut params = critic.weights.as_slice().to_vec();
    params.push(critic.bias);
    opt.step(&mut params, &grad);
    critic.bias = params.pop().unwrap_or(0.0);
    critic.weights = Vector::new(params)?;
    Ok(())
}

/// Policy, critic and both optimisers, as checkpointed between episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub policy: TokenPolicy,
    pub critic: Critic,
    pub actor_opt: AdamW,
    pub critic_opt: AdamW,
}

impl Learner {
    pub fn new(policy: TokenPolicy, state_dim: usize, cfg: &TrainConfig) -> Self {
        let n = policy.theta.len();
        Learner {
            policy,
            critic: Critic::zeros(state_dim),
            actor_opt: AdamW::new(n, cfg.actor_lr, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay),
            critic_opt: AdamW::new(state_dim + 1, cfg.critic_lr, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub cluster_id: String,
    pub episode: usize,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub total: f64,
    pub summary_len: usize,
}

/// What a cluster contributes to training.
pub struct ClusterTask<'a> {
    pub id: &'a str,
    /// Index of the cluster in visiting order; selects the RNG stream.
    pub index: u64,
    pub support: Support,
    pub reward: &'a dyn PrefixReward,
    pub provider: &'a dyn EmbeddingProvider,
}

pub fn run_episode(learner: &mut Learner, task: &ClusterTask<'_>, cfg: &TrainConfig, episode: usize) -> Result<EpisodeLog> {
    let mut rng = episode_rng(cfg.seed, task.index, episode as u64);
    let mut t = sample_trajectory(&learner.policy, &task.support, cfg.max_summary_tokens, &mut rng)?;
    let b = score_trajectory(&mut t, &learner.policy, task.reward, task.provider, cfg.reward_stride, cfg.delta_shaping)?;
    t.returns = compute_returns(&t.rewards);
    t.advantages = compute_advantages(&t.returns, &t.states, &learner.critic)?;
    let batch = [t];
    actor_update(&mut learner.policy, &mut learner.actor_opt, &task.support, &batch)?;
    critic_update(&mut learner.critic, &mut learner.critic_opt, &batch)?;
    Ok(EpisodeLog {
        cluster_id: task.id.to_owned(),
        episode,
        r1: b.r1,
        r2: b.r2,
        r3: b.r3,
        r4: b.r4,
        total: b.total,
        summary_len: batch[0].len(),
    })
}

/// Runs episodes `start..cfg.episodes_per_cluster`, handing each log record
/// to `sink` as soon as it exists.
pub fn train_on_cluster(
    learner: &mut Learner,
    task: &ClusterTask<'_>,
    cfg: &TrainConfig,
    start: usize,
    sink: &mut dyn FnMut(&EpisodeLog, &Learner) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    for episode in start..cfg.episodes_per_cluster {
        let log = run_episode(learner, task, cfg, episode).map_err(|e| e.context(format!("cluster {}", task.id)))?;
        sink(&log, learner)?;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "chronoline-checkpoint config-hash=";

/// Writes `value` as JSON under a header line carrying `config_hash`.
pub fn save_checkpoint<T: Serialize>(path: impl AsRef<Path>, config_hash: &str, value: &T) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        writeln!(f, "{CHECKPOINT_MAGIC}{config_hash}").map_err(|e| Error::io(&tmp, e))?;
        serde_json::to_writer(&mut f, value)?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, refusing one written under a different config.
pub fn load_checkpoint<T: DeserializeOwned>(path: impl AsRef<Path>, config_hash: &str) -> Result<T> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let found = header.trim_end().strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| Error::Parse {
        path: path.to_owned(),
        line: 1,
        message: "missing checkpoint header".into(),
    })?;
    if found != config_hash {
        return Err(Error::validation(format!(
            "{} was written under config {found}, current config is {config_hash}",
            path.display()
        )));
    }
    Ok(serde_json::from_reader(reader)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::hashed_embedding_provider;
    use proptest::prelude::*;
    use rand::Rng;

    fn bandit_policy() -> (TokenPolicy, Support) {
        let p = TokenPolicy::uniform(&["a", "b"], 1.0).unwrap();
        let s = Support::from_indices(3, &[0, 1]);
        (p, s)
    }

    fn bandit_reward(text: &str) -> Result<RewardBreakdown> {
        let r = if text == "a" { 1.0 } else { 0.0 };
        Ok(RewardBreakdown::combine([r, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]))
    }

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[0.5, 0.0, 1.0]), vec![1.5, 1.0, 1.0]);
        assert_eq!(compute_returns(&[0.0; 4]), vec![0.0; 4]);
        assert!(compute_returns(&[]).is_empty());
    }

    #[test]
    fn advantage_examples() {
        let s = vec![Vector::new(vec![1.0, 0.0]).unwrap()];
        let c = Critic {
            weights: Vector::new(vec![0.25, 9.0]).unwrap(),
            bias: 0.25,
        };
        assert_eq!(compute_advantages(&[1.5], &s, &c).unwrap(), vec![1.0]);
        assert_eq!(compute_advantages(&[1.5], &s, &Critic::zeros(2)).unwrap(), vec![1.5]);
        assert!(compute_advantages(&[1.5], &s, &Critic::zeros(3)).is_err());
        assert!(compute_advantages(&[1.5, 2.0], &s, &Critic::zeros(2)).is_err());
    }

    #[test]
    fn zero_advantages_leave_policy() {
        let (mut p, s) = bandit_policy();
        let before = p.clone();
        let mut opt = AdamW::new(p.theta.len(), 0.1, (0.9, 0.999), 1e-8, 0.0);
        let t = Trajectory {
            tokens: vec![0],
            log_probs: vec![0.5f64.ln()],
            advantages: vec![0.0],
            ..Trajectory::default()
        };
        actor_update(&mut p, &mut opt, &s, &[t]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn positive_advantage_raises_taken_token() {
        let (mut p, s) = bandit_policy();
        let mut opt = AdamW::new(p.theta.len(), 2e-4, (0.9, 0.999), 1e-8, 0.0);
        let before = p.distribution(None, &s)[1];
        let t = Trajectory {
            tokens: vec![1],
            advantages: vec![0.7],
            ..Trajectory::default()
        };
        actor_update(&mut p, &mut opt, &s, &[t]).unwrap();
        assert!(p.distribution(None, &s)[1] > before);
    }

    #[test]
    fn critic_at_minimum_is_unchanged() {
        let s = Vector::new(vec![1.0, 2.0]).unwrap();
        let mut c = Critic {
            weights: Vector::new(vec![0.5, 0.25]).unwrap(),
            bias: 0.0,
        };
        let t = Trajectory {
            tokens: vec![0],
            states: vec![s],
            returns: vec![1.0],
            ..Trajectory::default()
        };
        let before = c.clone();
        let mut opt = AdamW::new(3, 0.1, (0.9, 0.999), 1e-8, 0.0);
        critic_update(&mut c, &mut opt, &[t]).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn critic_bias_tracks_constant_return() {
        let s = Vector::new(vec![0.0, 0.0]).unwrap();
        let t = Trajectory {
            tokens: vec![0, 0],
            states: vec![s.clone(), s],
            returns: vec![2.5, 2.5],
            ..Trajectory::default()
        };
        let mut c = Critic::zeros(2);
        let mut opt = AdamW::new(3, 1e-2, (0.9, 0.999), 1e-8, 0.0);
        for _ in 0..3000 {
            critic_update(&mut c, &mut opt, std::slice::from_ref(&t)).unwrap();
        }
        assert!((c.bias - 2.5).abs() < 1e-2, "bias {}", c.bias);
    }

    #[test]
    fn critic_descent_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let states: Vec<Vector> = (0..n)
                .map(|_| Vector::new((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let t = Trajectory {
                tokens: vec![0; n],
                states,
                returns: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
                ..Trajectory::default()
            };
            let mut c = Critic {
                weights: Vector::new((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                bias: rng.random_range(-1.0..1.0),
            };
            let before = c.loss(std::slice::from_ref(&t)).unwrap();
            let mut opt = AdamW::new(4, 1e-4, (0.9, 0.999), 1e-8, 0.0);
            critic_update(&mut c, &mut opt, std::slice::from_ref(&t)).unwrap();
            assert!(c.loss(std::slice::from_ref(&t)).unwrap() <= before + 1e-15);
        }
    }

    #[test]
    fn terminal_only_stride() {
        let provider = hashed_embedding_provider(8, 0).unwrap();
        let p = TokenPolicy::uniform(&["x", "y", "z"], 1.0).unwrap();
        let reward = |_: &str| -> Result<RewardBreakdown> { Ok(RewardBreakdown::combine([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])) };
        let mut t = Trajectory {
            tokens: vec![0, 1, 2],
            log_probs: vec![0.0; 3],
            ..Trajectory::default()
        };
        score_trajectory(&mut t, &p, &reward, &provider, 3, false).unwrap();
        assert_eq!(t.rewards, vec![0.0, 0.0, 1.0]);
        assert_eq!(t.states.len(), 3);
        assert!(t.states[0].as_slice().iter().all(|&x| x == 0.0));
        score_trajectory(&mut t, &p, &reward, &provider, 2, false).unwrap();
        assert_eq!(t.rewards, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn single_token_reward_is_compound_of_token() {
        let provider = hashed_embedding_provider(8, 0).unwrap();
        let p = TokenPolicy::uniform(&["x", "y"], 1.0).unwrap();
        let reward = |text: &str| -> Result<RewardBreakdown> {
            Ok(RewardBreakdown::combine([text.len() as f64, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]))
        };
        let mut t = Trajectory {
            tokens: vec![1],
            log_probs: vec![0.0],
            ..Trajectory::default()
        };
        let b = score_trajectory(&mut t, &p, &reward, &provider, 1, false).unwrap();
        assert_eq!(t.rewards, vec![1.0]);
        assert_eq!(b.total, 1.0);
    }

    #[test]
    fn repetition_lowers_prefix_reward() {
        use crate::reward::repetition_penalty;
        let provider = hashed_embedding_provider(8, 0).unwrap();
        let p = TokenPolicy::uniform(&["a", "b"], 1.0).unwrap();
        let reward = |text: &str| -> Result<RewardBreakdown> {
            let toks: Vec<&str> = text.split_whitespace().collect();
            Ok(RewardBreakdown::combine([0.0, 0.0, 0.0, repetition_penalty(&toks)], [0.0, 0.0, 0.0, 1.0]))
        };
        let mut t = Trajectory {
            tokens: vec![0, 1, 1],
            log_probs: vec![0.0; 3],
            ..Trajectory::default()
        };
        score_trajectory(&mut t, &p, &reward, &provider, 1, false).unwrap();
        assert_eq!(t.rewards[1], 1.0);
        assert!((t.rewards[2] - 2.0 / 3.0).abs() < 1e-12);
        score_trajectory(&mut t, &p, &reward, &provider, 1, true).unwrap();
        assert!((t.rewards[2] - (2.0 / 3.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_episodes_leave_learner() {
        let (p, s) = bandit_policy();
        let provider = hashed_embedding_provider(4, 0).unwrap();
        let cfg = TrainConfig {
            episodes_per_cluster: 0,
            max_summary_tokens: 1,
            ..TrainConfig::default()
        };
        let mut l = Learner::new(p, 4, &cfg);
        let before = l.clone();
        let task = ClusterTask {
            id: "c",
            index: 0,
            support: s,
            reward: &bandit_reward,
            provider: &provider,
        };
        train_on_cluster(&mut l, &task, &cfg, 0, &mut |_, _| Ok(())).unwrap();
        assert_eq!(l, before);
    }

    #[test]
    fn bandit_learns_quickly_at_larger_rate() {
        let (p, s) = bandit_policy();
        let provider = hashed_embedding_provider(4, 0).unwrap();
        let cfg = TrainConfig {
            episodes_per_cluster: 500,
            actor_lr: 2e-2,
            max_summary_tokens: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut l = Learner::new(p, 4, &cfg);
        let task = ClusterTask {
            id: "bandit",
            index: 0,
            support: s.clone(),
            reward: &bandit_reward,
            provider: &provider,
        };
        train_on_cluster(&mut l, &task, &cfg, 0, &mut |_, _| Ok(())).unwrap();
        assert!(l.policy.distribution(None, &s)[0] > 0.9);
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let (p, s) = bandit_policy();
        let provider = hashed_embedding_provider(4, 0).unwrap();
        let cfg = TrainConfig {
            episodes_per_cluster: 40,
            actor_lr: 1e-2,
            max_summary_tokens: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let task = ClusterTask {
            id: "bandit",
            index: 2,
            support: s,
            reward: &bandit_reward,
            provider: &provider,
        };
        let mut full = Learner::new(p.clone(), 4, &cfg);
        let mut logs_full = Vec::new();
        train_on_cluster(&mut full, &task, &cfg, 0, &mut |log, _| {
            logs_full.push(log.clone());
            Ok(())
        })
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("learner.ckpt");
        let mut part = Learner::new(p, 4, &cfg);
        let half = TrainConfig {
            episodes_per_cluster: 17,
            ..cfg.clone()
        };
        train_on_cluster(&mut part, &task, &half, 0, &mut |_, l| save_checkpoint(&ckpt, "h", l)).unwrap();
        let mut resumed: Learner = load_checkpoint(&ckpt, "h").unwrap();
        assert!(load_checkpoint::<Learner>(&ckpt, "other").is_err());
        let mut logs_tail = Vec::new();
        train_on_cluster(&mut resumed, &task, &cfg, 17, &mut |log, _| {
            logs_tail.push(log.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(resumed, full);
        assert_eq!(logs_tail, logs_full[17..]);
    }

    #[test]
    fn constant_baseline_keeps_gradient_unbiased() {
        // Two actions, one step, rewards {1, 0}; compare the mean score-function
        // gradient with zero baseline against a constant baseline.
        let (mut p, s) = bandit_policy();
        p.theta[0] = 0.3;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dim = p.theta.len();
        let (mut sum0, mut sum1) = (vec![0.0; dim], vec![0.0; dim]);
        let (mut sq0, mut sq1) = (vec![0.0; dim], vec![0.0; dim]);
        for _ in 0..n {
            let (a, _) = p.sample_with(&s, 1, &mut rng);
            let r = if a[0] == 0 { 1.0 } else { 0.0 };
            let mut g0 = vec![0.0; dim];
            let mut g1 = vec![0.0; dim];
            p.accumulate_log_prob_grad(None, a[0], &s, r, &mut g0);
            p.accumulate_log_prob_grad(None, a[0], &s, r - 0.8, &mut g1);
            for i in 0..dim {
                sum0[i] += g0[i];
                sum1[i] += g1[i];
                sq0[i] += g0[i] * g0[i];
                sq1[i] += g1[i] * g1[i];
            }
        }
        for i in 0..dim {
            let m0 = sum0[i] / n as f64;
            let m1 = sum1[i] / n as f64;
            let v0 = sq0[i] / n as f64 - m0 * m0;
            let v1 = sq1[i] / n as f64 - m1 * m1;
            let se = ((v0 + v1) / n as f64).sqrt();
            assert!((m0 - m1).abs() <= 3.0 * se + 1e-12, "param {i}: {m0} vs {m1}");
        }
    }

    proptest! {
        #[test]
        fn return_recurrence_is_exact(r in proptest::collection::vec(-10.0f64..10.0, 0..40)) {
            let g = compute_returns(&r);
            for t in 0..r.len() {
                let next = if t + 1 < r.len() { g[t + 1] } else { 0.0 };
                prop_assert_eq!(g[t], r[t] + next);
            }
        }
    }
}
