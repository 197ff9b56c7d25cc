//! Sentence, document and timeline embeddings behind one provider trait.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    document_frequencies, smoothed_idf, split_sentences, tokenize, Article, ArticleCollection, Timeline,
};
use crate::error::{Error, Result};
use crate::remote::JsonClient;

/// A dense real vector with finite components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if let Some(i) = components.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("vector component {i} is not finite")));
        }
        Ok(Vector(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * factor).collect())
    }

    pub fn squared_distance(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Arithmetic mean of equally sized vectors.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a Vector>) -> Result<Vector> {
        let mut iter = vectors.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::validation("mean of zero vectors"))?;
        let mut sum = first.0.clone();
        let mut n = 1usize;
        for v in iter {
            check_dims(first, v)?;
            sum.iter_mut().zip(&v.0).for_each(|(s, x)| *s += x);
            n += 1;
        }
        Ok(Vector(sum.into_iter().map(|x| x / n as f64).collect()))
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

fn check_dims(u: &Vector, v: &Vector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// Cosine similarity plus a flag that is set when either vector is zero, in
/// which case the similarity is defined as 0.
pub fn cosine_with_flag(u: &Vector, v: &Vector) -> Result<(f64, bool)> {
    check_dims(u, v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0), false))
}

/// `u·v / (‖u‖‖v‖)`; zero vectors give 0 and log a warning.
pub fn cosine_similarity(u: &Vector, v: &Vector) -> Result<f64> {
    let (c, degenerate) = cosine_with_flag(u, v)?;
    if degenerate {
        log::warn!("cosine similarity with a zero vector defined as 0");
    }
    Ok(c)
}

/// Deterministic text encoder with a fixed output dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed_sentence(&self, text: &str) -> Result<Vector>;

    /// Embeds many sentences, returning vectors in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>> {
        texts.iter().map(|t| self.embed_sentence(t)).collect()
    }
}

/// Mean of the sentence embeddings of `text`.
pub fn avg_sentence_embedding(text: &str, provider: &dyn EmbeddingProvider) -> Result<Vector> {
    let sentences = split_sentences(text);
    if sentences.is_empty() {
        return Err(Error::validation("cannot embed empty text"));
    }
    Vector::mean(&provider.embed_batch(&sentences)?)
}

pub fn embed_article(article: &Article, provider: &dyn EmbeddingProvider) -> Result<Vector> {
    if article.sentences.is_empty() {
        return Err(Error::validation(format!("article {} has no sentences", article.id)));
    }
    let sentences: Vec<&str> = article.sentences.iter().map(String::as_str).collect();
    Vector::mean(&provider.embed_batch(&sentences)?)
}

/// Mean over entries of each entry's average sentence embedding. Entries with
/// empty text are skipped.
pub fn embed_timeline(timeline: &Timeline, provider: &dyn EmbeddingProvider) -> Result<Vector> {
    let per_entry = timeline
        .entries
        .iter()
        .filter(|e| !split_sentences(&e.text).is_empty())
        .map(|e| avg_sentence_embedding(&e.text, provider))
        .collect::<Result<Vec<_>>>()?;
    Vector::mean(&per_entry).map_err(|_| Error::validation("timeline has no text to embed"))
}

/// TF-IDF bag-of-words vectors over a fitted vocabulary.
#[derive(Clone, Debug)]
pub struct TfidfProvider {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl TfidfProvider {
    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&i| self.idf[i])
    }
}

impl EmbeddingProvider for TfidfProvider {
    fn name(&self) -> &str {
        "tfidf"
    }

    fn dim(&self) -> usize {
        self.idf.len()
    }

    fn embed_sentence(&self, text: &str) -> Result<Vector> {
        let mut v = vec![0.0; self.dim()];
        for t in tokenize(text) {
            if let Some(&i) = self.vocabulary.get(&t) {
                v[i] += self.idf[i];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Vector::new(v)
    }
}

/// Fits TF-IDF weights over the collection: raw counts times
/// `ln((1+N)/(1+df)) + 1`, L2-normalised.
pub fn tfidf_fit(collection: &ArticleCollection) -> Result<TfidfProvider> {
    if collection.is_empty() {
        return Err(Error::validation("cannot fit TF-IDF on an empty collection"));
    }
    let df = document_frequencies(collection);
    let mut terms: Vec<(String, usize)> = df.into_iter().collect();
    terms.sort();
    let n = collection.len();
    let idf = terms.iter().map(|(_, d)| smoothed_idf(n, *d)).collect();
    let vocabulary = terms
        .into_iter()
        .enumerate()
        .map(|(i, (t, _))| (t, i))
        .collect();
    Ok(TfidfProvider { vocabulary, idf })
}

/// Feature-hashing encoder: each token maps to one signed coordinate.
#[derive(Clone, Debug)]
pub struct HashedProvider {
    name: String,
    dim: usize,
    seed: u64,
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finaliser
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl HashedProvider {
    fn coordinate(&self, token: &str) -> (usize, f64) {
        let h = fnv1a(self.seed, token.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl EmbeddingProvider for HashedProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_sentence(&self, text: &str) -> Result<Vector> {
        let mut v = vec![0.0; self.dim];
        for t in tokenize(text) {
            let (i, s) = self.coordinate(&t);
            v[i] += s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Vector::new(v)
    }
}

pub fn hashed_embedding_provider(dim: usize, seed: u64) -> Result<HashedProvider> {
    if dim < 2 {
        return Err(Error::validation("hashed embedding dimension must be at least 2"));
    }
    Ok(HashedProvider {
        name: format!("hashed-{dim}-{seed}"),
        dim,
        seed,
    })
}

/// Vectors keyed by (provider name, content hash), optionally persisted as
/// line-delimited records and reloaded on open.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: Mutex<HashMap<String, Vector>>,
    path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    vector: Vector,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let mut entries = HashMap::new();
        if path.exists() {
            let content = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for r in crate::corpus::parse_records::<CacheRecord>(&path, &content)? {
                entries.insert(r.key, r.vector);
            }
        }
        Ok(EmbeddingCache {
            entries: Mutex::new(entries),
            path: Some(path),
        })
    }

    pub fn key(provider: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(provider.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<Vector> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: String, vector: Vector) -> Result<()> {
        let mut entries = self.entries.lock().unwrap();
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&CacheRecord {
                key: key.clone(),
                vector: vector.clone(),
            })?;
            line.push(b'\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        entries.insert(key, vector);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub timeout: Duration,
    pub retries: usize,
    pub batch_size: usize,
    pub max_concurrency: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            timeout: Duration::from_secs(30),
            retries: 2,
            batch_size: 64,
            max_concurrency: 4,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    sentences: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an external sentence encoder speaking `POST /embed`.
#[derive(Debug)]
pub struct RemoteEmbeddingProvider {
    name: String,
    dim: usize,
    client: JsonClient,
    cache: EmbeddingCache,
    config: RemoteConfig,
}

impl RemoteEmbeddingProvider {
    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    fn fetch(&self, batch: &[&str]) -> Result<Vec<Vector>> {
        let resp: EmbedResponse = self.client.post("/embed", &EmbedRequest { sentences: batch })?;
        if resp.vectors.len() != batch.len() {
            return Err(Error::Contract(format!(
                "expected {} vectors, got {}",
                batch.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::Contract(format!(
                        "embedding dimension mismatch: expected {}, got {}",
                        self.dim,
                        v.len()
                    )));
                }
                Vector::new(v)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_sentence(&self, text: &str) -> Result<Vector> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>> {
        let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(&self.name, t)).collect();
        let mut out: Vec<Option<Vector>> = keys.iter().map(|k| self.cache.get(k)).collect();
        let mut seen = HashSet::new();
        let missing: Vec<usize> = (0..texts.len())
            .filter(|&i| out[i].is_none() && seen.insert(keys[i].clone()))
            .collect();
        if !missing.is_empty() {
            let batches: Vec<&[usize]> = missing.chunks(self.config.batch_size.max(1)).collect();
            for group in batches.chunks(self.config.max_concurrency.max(1)) {
                let results: Vec<Result<Vec<Vector>>> = std::thread::scope(|s| {
                    let handles: Vec<_> = group
                        .iter()
                        .map(|idx| {
                            let batch: Vec<&str> = idx.iter().map(|&i| texts[i]).collect();
                            s.spawn(move || self.fetch(&batch))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("embed worker")).collect()
                });
                for (idx, vectors) in group.iter().zip(results) {
                    for (&i, v) in idx.iter().zip(vectors?) {
                        self.cache.insert(keys[i].clone(), v.clone())?;
                        out[i] = Some(v);
                    }
                }
            }
        }
        // Duplicate texts within one call share a cache entry.
        out.into_iter()
            .zip(&keys)
            .map(|(v, k)| match v {
                Some(v) => Ok(v),
                None => self
                    .cache
                    .get(k)
                    .ok_or_else(|| Error::Provider("embedding missing after fetch".into())),
            })
            .collect()
    }
}

pub fn remote_embedding_provider(
    endpoint: &str,
    dim: usize,
    config: RemoteConfig,
    cache: EmbeddingCache,
) -> Result<RemoteEmbeddingProvider> {
    Ok(RemoteEmbeddingProvider {
        name: format!("remote:{endpoint}"),
        dim,
        client: JsonClient::new(endpoint, config.timeout, config.retries)?,
        cache,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DayStamp;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        let c = cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_errors_and_zero_vectors() {
        assert!(cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])).is_err());
        assert_eq!(cosine_with_flag(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), (0.0, true));
        assert!(Vector::new(vec![f64::NAN]).is_err());
    }

    struct Fixed;
    impl EmbeddingProvider for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed_sentence(&self, text: &str) -> Result<Vector> {
            Ok(if text.starts_with('A') { v(&[1.0, 0.0]) } else { v(&[0.0, 1.0]) })
        }
    }

    #[test]
    fn averaging_sentences() {
        assert_eq!(avg_sentence_embedding("A cat.", &Fixed).unwrap(), v(&[1.0, 0.0]));
        assert_eq!(avg_sentence_embedding("A cat. B dog.", &Fixed).unwrap(), v(&[0.5, 0.5]));
        assert_eq!(
            avg_sentence_embedding("B dog. A cat.", &Fixed).unwrap(),
            avg_sentence_embedding("A cat. B dog.", &Fixed).unwrap()
        );
        assert!(avg_sentence_embedding("  ", &Fixed).is_err());
    }

    fn collection(texts: &[&str]) -> ArticleCollection {
        let d = DayStamp::new(2011, 3, 1).unwrap();
        ArticleCollection::new(
            "t",
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Article::from_text(format!("a{i}"), d, t))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tfidf_weights() {
        let c = collection(&["oil rose", "oil fell", "oil rose"]);
        let p = tfidf_fit(&c).unwrap();
        assert_eq!(p.dim(), 3);
        assert_eq!(p.idf("oil"), Some(1.0));
        let e = p.embed_sentence("oil fell").unwrap();
        let rose = p.vocabulary["rose"];
        assert_eq!(e.as_slice()[rose], 0.0);
        assert_eq!(p.embed_sentence("oil rose").unwrap(), p.embed_sentence("oil rose").unwrap());
        assert!(tfidf_fit(&collection(&[])).is_err());
    }

    #[test]
    fn hashed_provider_properties() {
        let p = hashed_embedding_provider(64, 7).unwrap();
        let a = p.embed_sentence("Oil prices rose sharply.").unwrap();
        assert_eq!(a, p.embed_sentence("Oil prices rose sharply.").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!(hashed_embedding_provider(1, 0).is_err());
    }

    #[test]
    fn hashed_disjoint_sentences_are_nearly_orthogonal() {
        let mut large = 0;
        for seed in 0..100 {
            let p = hashed_embedding_provider(1024, seed).unwrap();
            let a = p.embed_sentence("alpha bravo charlie delta echo").unwrap();
            let b = p.embed_sentence("foxtrot golf hotel india juliet").unwrap();
            if cosine_similarity(&a, &b).unwrap().abs() >= 0.5 {
                large += 1;
            }
        }
        assert!(large <= 5, "{large} of 100 seeds gave |cos| >= 0.5");
    }

    #[test]
    fn cache_persists_between_opens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let key = EmbeddingCache::key("p", "hello");
        EmbeddingCache::open(&path).unwrap().insert(key.clone(), v(&[0.5, 0.25])).unwrap();
        let reopened = EmbeddingCache::open(&path).unwrap();
        assert_eq!(reopened.get(&key), Some(v(&[0.5, 0.25])));
        assert_ne!(key, EmbeddingCache::key("q", "hello"));
    }

    proptest! {
        #[test]
        fn cosine_invariants(u in proptest::collection::vec(-5.0f64..5.0, 3),
                             w in proptest::collection::vec(-5.0f64..5.0, 3),
                             alpha in 0.01f64..100.0) {
            let (u, w) = (v(&u), v(&w));
            prop_assume!(u.norm() > 1e-3 && w.norm() > 1e-3);
            prop_assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
            let c = cosine_similarity(&u, &w).unwrap();
            prop_assert!((c - cosine_similarity(&w, &u).unwrap()).abs() < 1e-12);
            prop_assert!((c - cosine_similarity(&u.scaled(alpha), &w).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
