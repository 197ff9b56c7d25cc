//! The workflow stages, one function per subcommand.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{hash_hex, Ablation, DetectionConfig, PipelineConfig, TrainVariant};
use super::state::{PipelineState, Run, Stage};
use super::store::{now_timestamp, KeywordRecord, PreferenceRecord, PreferenceStore, KEYWORDS_FILE, PREFERENCES_FILE};
use crate::corpus::{
    extract_keywords_tfidf, load_collection, load_timeline, save_timeline, timeline_bytes,
    truncate_article, ArticleCollection, DayStamp, EventSummary, Timeline,
};
use crate::embedding::{embed_article, embed_timeline, EmbeddingProvider, Vector};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_timeline, MetricReport};
use crate::event_detection::{
    cluster_agglomerative, cluster_markov, date_clusters, rank_clusters, select_top_l, Algorithm, EventCluster,
};
use crate::gppl::{fit_gppl, pairs_from_ranking, GpplConfig, PreferenceDataset, ScoreModel};
use crate::reward::{calibrate_alpha, KeywordSet, LmScorer, RewardConfig, RewardContext};
use crate::rl::{load_checkpoint, run_episode, save_checkpoint, ClusterTask, EpisodeLog, Learner};
use crate::summarise::{
    assemble_timeline, centroid_opt, generate_event_summary, remote_policy, Decode, PolicyContract, TokenPolicy,
};

pub const CLUSTERS_FILE: &str = "clusters.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const CANDIDATES_DIR: &str = "candidates";
pub const SCORE_MODEL_FILE: &str = "score_model.txt";
pub const REWARD_FILE: &str = "reward.toml";
pub const KEYWORD_SET_FILE: &str = "keyword_set.json";
pub const TRAIN_CHECKPOINT_FILE: &str = "train_state.ckpt";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TIMELINE_FILE: &str = "timeline.jsonl";
pub const ZERO_SHOT_FILE: &str = "timeline_zero_shot.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

/// A selected event, in rank order, with the text it is summarised from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedEvent {
    pub rank: usize,
    pub cluster: EventCluster,
    /// Sentences of the member articles after truncation.
    pub sentences: Vec<String>,
}

impl DetectedEvent {
    pub fn date(&self) -> DayStamp {
        self.cluster.assigned_date.expect("selected clusters are dated")
    }

    pub fn source(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntry {
    /// SHA-256 of the timeline file bytes.
    pub id: String,
    pub label: String,
    pub file: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct DetectOptions {
    pub corpus: Option<PathBuf>,
    pub algorithm: Option<Algorithm>,
    pub threshold: Option<f64>,
    pub inflation: Option<f64>,
    pub top_l: Option<usize>,
    /// A reference timeline; its date count fixes `l` unless `top_l` is given.
    pub reference: Option<PathBuf>,
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hash_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn truncated(corpus: &ArticleCollection, k: usize) -> Result<ArticleCollection> {
    ArticleCollection::new(
        corpus.topic.clone(),
        corpus.articles.iter().map(|a| truncate_article(a, k)).collect(),
    )
}

/// Runs embedding and event detection, writing the top-`l` ranked events.
pub fn cmd_detect(run: &Run, opts: &DetectOptions) -> Result<Vec<DetectedEvent>> {
    let cfg = &run.config;
    let corpus_path = opts
        .corpus
        .clone()
        .or_else(|| cfg.corpus.clone())
        .ok_or_else(|| Error::validation("no corpus given; pass --corpus or set `corpus` in the config"))?;
    let existing = run.load_state()?;
    if let Some(s) = &existing {
        if s.config_hash != cfg.hash() {
            return Err(Error::validation(format!(
                "run {} was started with config {}; use a new run id",
                run.id, s.config_hash
            )));
        }
    }
    let corpus = load_collection(&corpus_path).map_err(|e| e.context("detect: loading corpus"))?;
    if corpus.is_empty() {
        return Err(Error::validation(format!("corpus {} is empty", corpus_path.display())));
    }
    let corpus_hash = file_hash(&corpus_path)?;
    if let Some(s) = &existing {
        if s.corpus_hash != corpus_hash {
            return Err(Error::validation(format!(
                "run {} was started on a different corpus; use a new run id",
                run.id
            )));
        }
    }

    let mut det: DetectionConfig = cfg.detection.clone();
    if let Some(a) = opts.algorithm {
        det.algorithm = a;
    }
    if let Some(t) = opts.threshold {
        det.threshold = t;
    }
    if let Some(i) = opts.inflation {
        det.inflation = i;
    }
    let top_l = match (opts.top_l, &opts.reference) {
        (Some(l), _) => l,
        (None, Some(r)) => load_timeline(r).map_err(|e| e.context("detect: loading reference"))?.entries.len(),
        (None, None) => det.top_l,
    };

    std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
    let events = detect_events(&corpus, &det, top_l, cfg, &run.dir).map_err(|e| e.context("detect"))?;
    write_jsonl(&run.path(CLUSTERS_FILE), &events)?;

    let mut state = existing.unwrap_or_else(|| PipelineState {
        run_id: run.id.clone(),
        stage: Stage::Detected,
        completed: BTreeSet::new(),
        artifacts: BTreeMap::new(),
        config_hash: cfg.hash(),
        corpus: std::path::absolute(&corpus_path).unwrap_or(corpus_path.clone()),
        corpus_hash,
        detection: det.clone(),
        top_l,
        train_variant: None,
    });
    state.detection = det;
    state.top_l = top_l;
    state.artifacts.insert("clusters".into(), CLUSTERS_FILE.into());
    state.record(Stage::Detected);
    run.save_state(&state)?;
    Ok(events)
}

/// The detection stage without any persistence.
pub fn detect_events(
    corpus: &ArticleCollection,
    det: &DetectionConfig,
    top_l: usize,
    cfg: &PipelineConfig,
    run_dir: &Path,
) -> Result<Vec<DetectedEvent>> {
    let short = truncated(corpus, det.truncate_sentences)?;
    let provider = cfg.embedding.build(&short, run_dir)?;
    let mut vectors = BTreeMap::new();
    for a in &short.articles {
        vectors.insert(a.id.clone(), embed_article(a, provider.as_ref()).map_err(|e| e.context(format!("article {}", a.id)))?);
    }
    let cs = match det.algorithm {
        Algorithm::Agglomerative => cluster_agglomerative(&vectors, det.threshold)?,
        Algorithm::Markov => cluster_markov(&vectors, det.inflation, det.max_iter)?,
    };
    let mentions: HashMap<String, Vec<DayStamp>> =
        short.articles.iter().map(|a| (a.id.clone(), a.date_mentions.clone())).collect();
    let ranked = rank_clusters(date_clusters(cs, &mentions), &short.mention_counts())?;
    let selected = select_top_l(&ranked, top_l)?;
    if selected.is_empty() {
        return Err(Error::validation("no cluster could be dated"));
    }
    Ok(selected
        .into_iter()
        .enumerate()
        .map(|(rank, cluster)| {
            let sentences = cluster
                .members
                .iter()
                .filter_map(|m| short.get(m))
                .flat_map(|a| a.sentences.iter().cloned())
                .collect();
            DetectedEvent {
                rank,
                cluster,
                sentences,
            }
        })
        .collect())
}

/// Everything later stages reload from a run.
struct Loaded {
    state: PipelineState,
    corpus: ArticleCollection,
    events: Vec<DetectedEvent>,
    provider: Box<dyn EmbeddingProvider>,
}

fn load_run(run: &Run, needs: &[Stage]) -> Result<Loaded> {
    let state = run.require(needs)?;
    let hash = file_hash(&state.corpus)?;
    if hash != state.corpus_hash {
        return Err(Error::validation(format!(
            "corpus {} changed since detection; use a new run id",
            state.corpus.display()
        )));
    }
    let corpus = load_collection(&state.corpus)?;
    let events: Vec<DetectedEvent> = read_jsonl(&run.path(CLUSTERS_FILE))?;
    let short = truncated(&corpus, state.detection.truncate_sentences)?;
    let provider = run.config.embedding.build(&short, &run.dir)?;
    Ok(Loaded {
        state,
        corpus,
        events,
        provider,
    })
}

/// The shared policy before any training, built from every event's sentences.
pub fn untrained_policy(events: &[DetectedEvent], temperature: f64) -> Result<TokenPolicy> {
    let sentences: Vec<&str> = events.iter().flat_map(|e| e.sentences.iter().map(String::as_str)).collect();
    TokenPolicy::from_sentences(&sentences, temperature)
}

fn untrained_contract(run: &Run, events: &[DetectedEvent]) -> Result<Box<dyn PolicyContract>> {
    let cfg = &run.config;
    Ok(match &cfg.generate.policy_endpoint {
        Some(url) => Box::new(remote_policy(url, &cfg.embedding.remote_config())?),
        None => Box::new(untrained_policy(events, cfg.train.temperature)?),
    })
}

fn extractive_timeline(topic: &str, events: &[DetectedEvent], provider: &dyn EmbeddingProvider, budget: usize) -> Result<Timeline> {
    let mut summaries = Vec::new();
    for e in events {
        let sentences: Vec<(String, Vector)> = e
            .sentences
            .iter()
            .map(|s| Ok((s.clone(), provider.embed_sentence(s)?)))
            .collect::<Result<_>>()?;
        let mut picked = centroid_opt(&sentences, &e.cluster.centroid, budget)?;
        picked.sort_unstable();
        let text: Vec<&str> = picked.iter().map(|&i| sentences[i].0.as_str()).collect();
        summaries.push(EventSummary::new(e.date(), text.join(" ")));
    }
    Ok(assemble_timeline(topic, summaries))
}

fn policy_timeline(topic: &str, events: &[DetectedEvent], policy: &dyn PolicyContract, decode: impl Fn(usize) -> Decode, max_tokens: usize) -> Result<Timeline> {
    let mut summaries = Vec::new();
    for e in events {
        summaries.push(
            generate_event_summary(policy, &e.source(), e.date(), decode(e.rank), max_tokens)
                .map_err(|err| err.context(format!("cluster {}", e.cluster.id)))?,
        );
    }
    Ok(assemble_timeline(topic, summaries))
}

/// Emits `count` distinct candidate timelines in priority order: extractive,
/// untrained greedy, then untrained samples.
pub fn cmd_candidates(run: &Run, count: Option<usize>) -> Result<Vec<CandidateEntry>> {
    let Loaded {
        mut state,
        corpus,
        events,
        provider,
    } = load_run(run, &[Stage::Detected])?;
    let cfg = &run.config;
    let count = count.unwrap_or(cfg.candidates.count);
    if count == 0 {
        return Err(Error::validation("candidate count must be at least 1"));
    }
    let policy = untrained_contract(run, &events)?;
    let max_tokens = cfg.train.max_summary_tokens;
    let topic = corpus.topic.as_str();

    let mut made: Vec<(String, Timeline)> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |label: String, t: Timeline, made: &mut Vec<(String, Timeline)>| {
        if seen.insert(timeline_bytes(&t)) {
            made.push((label, t));
        }
    };
    push(
        "centroid-opt".into(),
        extractive_timeline(topic, &events, provider.as_ref(), cfg.candidates.centroid_budget)?,
        &mut made,
    );
    if made.len() < count {
        push("greedy".into(), policy_timeline(topic, &events, policy.as_ref(), |_| Decode::Greedy, max_tokens)?, &mut made);
    }
    const MAX_DRAWS: usize = 1000;
    let mut k = 0;
    while made.len() < count {
        if k == MAX_DRAWS {
            return Err(Error::validation(format!(
                "only {} distinct candidates after {MAX_DRAWS} samples",
                made.len()
            )));
        }
        let t = policy_timeline(
            topic,
            &events,
            policy.as_ref(),
            |rank| Decode::Sample(cfg.stage_seed(&format!("candidates:{k}:{rank}"))),
            max_tokens,
        )?;
        push(format!("sample-{k}"), t, &mut made);
        k += 1;
    }

    let dir = run.path(CANDIDATES_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::new();
    for (label, t) in &made {
        let id = hash_hex(&timeline_bytes(t));
        let file = PathBuf::from(CANDIDATES_DIR).join(format!("{id}.jsonl"));
        save_timeline(t, run.path(&file))?;
        entries.push(CandidateEntry {
            id,
            label: label.clone(),
            file,
        });
    }
    let mut manifest = serde_json::to_vec_pretty(&entries)?;
    manifest.push(b'\n');
    write_atomic(&run.path(CANDIDATES_FILE), &manifest)?;
    state.artifacts.insert("candidates".into(), CANDIDATES_FILE.into());
    state.record(Stage::Candidates);
    run.save_state(&state)?;
    Ok(entries)
}

pub fn load_candidates(run: &Run) -> Result<Vec<(CandidateEntry, Timeline)>> {
    let path = run.path(CANDIDATES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<CandidateEntry> = serde_json::from_str(&text)?;
    entries
        .into_iter()
        .map(|c| {
            let t = load_timeline(run.path(&c.file))?;
            Ok((c, t))
        })
        .collect()
}

/// A pairwise comparison between two candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub left: String,
    pub right: String,
}

/// Every unordered candidate pair, in manifest order.
pub fn annotation_tasks(candidates: &[CandidateEntry]) -> Vec<TaskSpec> {
    let mut out = Vec::new();
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            let (l, r) = (&candidates[i].id, &candidates[j].id);
            out.push(TaskSpec {
                task_id: format!("{}-{}", &l[..16], &r[..16]),
                left: l.clone(),
                right: r.clone(),
            });
        }
    }
    out
}

pub fn open_store(run: &Run, state: &mut PipelineState) -> Result<PreferenceStore> {
    state.artifacts.entry("preferences".into()).or_insert(PREFERENCES_FILE.into());
    state.artifacts.entry("keywords".into()).or_insert(KEYWORDS_FILE.into());
    PreferenceStore::open(&run.dir)
}

/// Stands in for a human annotator: answers every pending task by ranking the
/// candidates against `reference`, and records TF-IDF keywords of the reference.
pub fn cmd_simulate_annotation(run: &Run, reference: &Path) -> Result<usize> {
    let Loaded {
        mut state,
        corpus,
        provider,
        ..
    } = load_run(run, &[Stage::Candidates])?;
    let reference = load_timeline(reference).map_err(|e| e.context("simulate-annotation: loading reference"))?;
    let candidates = load_candidates(run)?;
    let mut scored = Vec::new();
    for (c, t) in &candidates {
        let m = evaluate_timeline(t, &reference, provider.as_ref(), run.config.generate.window_days)?;
        scored.push((m.ar1_f + m.ar2_f + m.date_f1, c.id.clone()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let ranking: Vec<String> = scored.into_iter().map(|(_, id)| id).collect();
    let better: BTreeSet<(String, String)> = pairs_from_ranking(&ranking)?
        .into_iter()
        .map(|p| (p.winner, p.loser))
        .collect();

    let mut store = open_store(run, &mut state)?;
    let tasks = annotation_tasks(&candidates.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>());
    let mut added = 0;
    for t in tasks {
        if store.choice_for(&t.task_id).is_some() {
            continue;
        }
        let (winner, loser) = if better.contains(&(t.left.clone(), t.right.clone())) {
            (t.left, t.right)
        } else {
            (t.right, t.left)
        };
        store.append_preference(PreferenceRecord {
            task_id: t.task_id,
            winner,
            loser,
            annotator: "simulated".into(),
            timestamp: now_timestamp(),
            idempotency_key: None,
        })?;
        added += 1;
    }
    if store.keywords_for(&corpus.topic).is_empty() {
        let keywords = extract_keywords_tfidf(&reference, &corpus, run.config.reward.simulated_keywords)?;
        if !keywords.is_empty() {
            store.append_keywords(KeywordRecord {
                topic: corpus.topic.clone(),
                keywords,
                annotator: "simulated".into(),
                timestamp: now_timestamp(),
            })?;
        }
    }
    if !store.preferences().is_empty() {
        state.record(Stage::PreferencesCollected);
    }
    run.save_state(&state)?;
    Ok(added)
}

fn timeline_embedding(t: &Timeline, provider: &dyn EmbeddingProvider) -> Result<Vector> {
    if t.text().trim().is_empty() {
        Ok(Vector::zeros(provider.dim()))
    } else {
        embed_timeline(t, provider)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedReward {
    pub pairs: usize,
    pub keywords: Vec<String>,
    pub config: RewardConfig,
    pub converged: bool,
}

/// Fits the score model on the recorded preferences and calibrates α.
pub fn cmd_learn_reward(run: &Run) -> Result<LearnedReward> {
    let Loaded {
        mut state,
        corpus,
        provider,
        ..
    } = load_run(run, &[Stage::Candidates])?;
    let cfg = &run.config;
    let store = open_store(run, &mut state)?;
    let pairs = store.pairs();
    if pairs.is_empty() {
        return Err(Error::Stage(format!(
            "no preference pairs recorded for run {}; compare candidates with `chronoline serve --run-id {}` first",
            run.id, run.id
        )));
    }
    let keywords = store.keywords_for(&corpus.topic);
    if cfg.reward.w > 0.0 && keywords.is_empty() {
        return Err(Error::Stage(format!(
            "no keywords recorded for topic {:?}; submit them through `chronoline serve` (POST /keywords) or set reward.w = 0",
            corpus.topic
        )));
    }

    let candidates = load_candidates(run)?;
    let mut items = BTreeMap::new();
    let mut texts = Vec::new();
    for (c, t) in &candidates {
        items.insert(c.id.clone(), timeline_embedding(t, provider.as_ref())?);
        texts.extend(t.entries.iter().filter(|e| !e.text.trim().is_empty()).map(|e| e.text.clone()));
    }
    let data = PreferenceDataset::new(items, pairs).map_err(|e| e.context("learn-reward: preference store"))?;
    let model = fit_gppl(&data, &GpplConfig::from(&cfg.gppl)).map_err(|e| e.context("learn-reward"))?;
    model.save(run.path(SCORE_MODEL_FILE))?;

    let lm = cfg.reward.build_lm(&corpus, &cfg.embedding.remote_config())?;
    let mut reward = cfg.reward.reward_config();
    reward.alpha = calibrate_alpha(lm.as_ref(), &texts).map_err(|e| e.context("learn-reward: calibrating alpha"))?;
    reward.save(run.path(REWARD_FILE))?;
    let mut ks = serde_json::to_vec_pretty(&keywords)?;
    ks.push(b'\n');
    write_atomic(&run.path(KEYWORD_SET_FILE), &ks)?;

    for (name, file) in [("score-model", SCORE_MODEL_FILE), ("reward", REWARD_FILE), ("keyword-set", KEYWORD_SET_FILE)] {
        state.artifacts.insert(name.into(), file.into());
    }
    state.record(Stage::RewardLearned);
    run.save_state(&state)?;
    Ok(LearnedReward {
        pairs: data.pairs.len(),
        keywords,
        config: reward,
        converged: model.converged,
    })
}

/// Learned reward components, reloaded from a run.
pub struct RewardParts {
    pub model: ScoreModel,
    pub config: RewardConfig,
    pub keywords: KeywordSet,
    pub lm: Box<dyn LmScorer>,
}

fn load_reward(run: &Run, corpus: &ArticleCollection, provider: &dyn EmbeddingProvider) -> Result<RewardParts> {
    let model = ScoreModel::load(run.path(SCORE_MODEL_FILE))?;
    let config = RewardConfig::load(run.path(REWARD_FILE))?;
    let path = run.path(KEYWORD_SET_FILE);
    let words: Vec<String> = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let keywords = KeywordSet::embed(words, provider)?;
    let lm = run.config.reward.build_lm(corpus, &run.config.embedding.remote_config())?;
    Ok(RewardParts {
        model,
        config,
        keywords,
        lm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainProgress {
    learners: Vec<Learner>,
    /// Position in the ranked event list of the cluster being trained.
    cluster: usize,
    next_episode: usize,
    logged: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub ablation: Ablation,
    pub per_cluster_policy: bool,
    /// Stop after this many episodes in this invocation; the next call resumes.
    pub max_episodes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub finished: bool,
    pub episodes_run: usize,
    pub logs: Vec<EpisodeLog>,
}

fn variant_hash(config_hash: &str, v: &TrainVariant) -> Result<String> {
    Ok(hash_hex(format!("{config_hash}:{}", serde_json::to_string(v)?).as_bytes()))
}

/// Actor-critic fine-tuning over the ranked clusters, resumable from the
/// last checkpoint.
pub fn cmd_train(run: &Run, opts: &TrainOptions) -> Result<TrainOutcome> {
    let Loaded {
        mut state,
        corpus,
        events,
        provider,
    } = load_run(run, &[Stage::RewardLearned])?;
    let cfg = &run.config;
    if cfg.generate.policy_endpoint.is_some() {
        log::warn!("training updates the in-process policy; the external summariser is not trained");
    }
    let variant = TrainVariant {
        ablation: opts.ablation,
        per_cluster_policy: opts.per_cluster_policy || cfg.train.per_cluster_policy,
    };
    let ckpt_hash = variant_hash(&state.config_hash, &variant)?;
    let tc = cfg.train.train_config(cfg.stage_seed("train"));
    tc.validate()?;
    let parts = load_reward(run, &corpus, provider.as_ref())?;
    let reward_cfg = variant.ablation.apply(parts.config.clone());

    let ckpt_path = run.path(TRAIN_CHECKPOINT_FILE);
    let mut progress: TrainProgress = if ckpt_path.exists() {
        load_checkpoint(&ckpt_path, &ckpt_hash).map_err(|e| {
            e.context(format!(
                "train: {} belongs to another training variant; delete it to start over",
                ckpt_path.display()
            ))
        })?
    } else {
        let learners = if variant.per_cluster_policy {
            events
                .iter()
                .map(|e| Ok(Learner::new(untrained_policy(std::slice::from_ref(e), tc.temperature)?, provider.dim(), &tc)))
                .collect::<Result<_>>()?
        } else {
            vec![Learner::new(untrained_policy(&events, tc.temperature)?, provider.dim(), &tc)]
        };
        TrainProgress {
            learners,
            cluster: 0,
            next_episode: 0,
            logged: 0,
        }
    };

    // Drop log lines written after the checkpoint being resumed.
    let log_path = run.path(TRAIN_LOG_FILE);
    let mut kept: Vec<EpisodeLog> = if log_path.exists() { read_jsonl(&log_path)? } else { Vec::new() };
    kept.truncate(progress.logged);
    write_jsonl(&log_path, &kept)?;
    let mut log_file = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let budget = opts.max_episodes.unwrap_or(usize::MAX);
    let mut ran = 0;
    let mut logs = Vec::new();
    while progress.cluster < events.len() {
        let e = &events[progress.cluster];
        let li = if variant.per_cluster_policy { progress.cluster } else { 0 };
        let source = e.source();
        let ctx = RewardContext {
            keywords: &parts.keywords,
            model: Some(&parts.model),
            source_embedding: &e.cluster.centroid,
            lm: parts.lm.as_ref(),
            provider: provider.as_ref(),
            config: &reward_cfg,
        };
        let task = ClusterTask {
            id: &e.cluster.id,
            index: progress.cluster as u64,
            support: progress.learners[li].policy.support_for(&source),
            reward: &ctx,
            provider: provider.as_ref(),
        };
        while progress.next_episode < tc.episodes_per_cluster {
            if ran == budget {
                save_checkpoint(&ckpt_path, &ckpt_hash, &progress)?;
                return Ok(TrainOutcome {
                    finished: false,
                    episodes_run: ran,
                    logs,
                });
            }
            let log = run_episode(&mut progress.learners[li], &task, &tc, progress.next_episode)
                .map_err(|err| err.context(format!("train: cluster {}", e.cluster.id)))?;
            let mut line = serde_json::to_vec(&log)?;
            line.push(b'\n');
            log_file.write_all(&line).map_err(|err| Error::io(&log_path, err))?;
            logs.push(log);
            progress.next_episode += 1;
            progress.logged += 1;
            ran += 1;
            if cfg.train.checkpoint_every > 0 && progress.next_episode % cfg.train.checkpoint_every == 0 {
                log_file.flush().map_err(|err| Error::io(&log_path, err))?;
                save_checkpoint(&ckpt_path, &ckpt_hash, &progress)?;
            }
        }
        progress.cluster += 1;
        progress.next_episode = 0;
        log_file.flush().map_err(|err| Error::io(&log_path, err))?;
        save_checkpoint(&ckpt_path, &ckpt_hash, &progress)?;
    }

    save_checkpoint(run.path(POLICY_FILE), &state.config_hash, &progress.learners)?;
    state.artifacts.insert("policy".into(), POLICY_FILE.into());
    state.artifacts.insert("train-log".into(), TRAIN_LOG_FILE.into());
    state.train_variant = Some(variant);
    state.record(Stage::Trained);
    run.save_state(&state)?;
    Ok(TrainOutcome {
        finished: true,
        episodes_run: ran,
        logs,
    })
}

pub fn read_train_log(run: &Run) -> Result<Vec<EpisodeLog>> {
    read_jsonl(&run.path(TRAIN_LOG_FILE))
}

#[derive(Clone, Debug, Default)]
pub struct GenerateOptions {
    /// Use the untrained policy, skipping training.
    pub zero_shot: bool,
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub timeline: Timeline,
    pub path: PathBuf,
    pub metrics: Option<MetricReport>,
}

/// Greedy generation per event, assembly, and optional evaluation.
pub fn cmd_generate(run: &Run, opts: &GenerateOptions) -> Result<Generated> {
    let needs: &[Stage] = if opts.zero_shot { &[Stage::Candidates] } else { &[Stage::Trained] };
    let Loaded {
        mut state,
        corpus,
        events,
        provider,
    } = load_run(run, needs)?;
    let reference = match &opts.reference {
        Some(p) => Some(load_timeline(p).map_err(|e| e.context("generate: loading reference"))?),
        None => None,
    };
    let max_tokens = run.config.train.max_summary_tokens;
    let timeline = if opts.zero_shot {
        let policy = untrained_contract(run, &events)?;
        policy_timeline(&corpus.topic, &events, policy.as_ref(), |_| Decode::Greedy, max_tokens)?
    } else {
        let learners: Vec<Learner> = load_checkpoint(run.path(POLICY_FILE), &state.config_hash)?;
        let per_cluster = state.train_variant.is_some_and(|v| v.per_cluster_policy);
        let mut summaries = Vec::new();
        for e in &events {
            let policy = &learners[if per_cluster { e.rank } else { 0 }].policy;
            summaries.push(generate_event_summary(policy, &e.source(), e.date(), Decode::Greedy, max_tokens)?);
        }
        assemble_timeline(&corpus.topic, summaries)
    };
    let file = if opts.zero_shot { ZERO_SHOT_FILE } else { TIMELINE_FILE };
    save_timeline(&timeline, run.path(file))?;
    let metrics = match &reference {
        Some(r) => {
            let m = evaluate_timeline(&timeline, r, provider.as_ref(), run.config.generate.window_days)?;
            let mut bytes = serde_json::to_vec_pretty(&m)?;
            bytes.push(b'\n');
            write_atomic(&run.path(METRICS_FILE), &bytes)?;
            Some(m)
        }
        None => None,
    };
    if !opts.zero_shot {
        state.artifacts.insert("timeline".into(), TIMELINE_FILE.into());
        state.record(Stage::Generated);
        run.save_state(&state)?;
    }
    Ok(Generated {
        timeline,
        path: run.path(file),
        metrics,
    })
}

/// Scores predicted timelines against references, pairwise in order.
pub fn evaluate_files(
    pairs: &[(PathBuf, PathBuf)],
    provider: &dyn EmbeddingProvider,
    window_days: u32,
) -> Result<Vec<(String, MetricReport)>> {
    pairs
        .iter()
        .map(|(p, r)| {
            let pred = load_timeline(p)?;
            let reference = load_timeline(r)?;
            let m = evaluate_timeline(&pred, &reference, provider, window_days)
                .map_err(|e| e.context(format!("evaluating {}", p.display())))?;
            Ok((reference.topic, m))
        })
        .collect()
}
