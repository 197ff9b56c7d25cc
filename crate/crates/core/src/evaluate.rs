//! Timeline metrics: date F1, ROUGE-N, date-aligned ROUGE and soft token F1.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{DayStamp, Timeline};
use crate::embedding::{cosine_with_flag, EmbeddingProvider, Vector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From raw counts; any zero denominator yields 0.
    pub fn from_counts(hits: f64, predicted: f64, reference: f64) -> Self {
        let precision = if predicted > 0.0 { hits / predicted } else { 0.0 };
        let recall = if reference > 0.0 { hits / reference } else { 0.0 };
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn date_f1(pred: &BTreeSet<DayStamp>, reference: &BTreeSet<DayStamp>) -> Prf {
    let hits = pred.intersection(reference).count();
    Prf::from_counts(hits as f64, pred.len() as f64, reference.len() as f64)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

fn clipped_overlap<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> usize {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum()
}

pub fn rouge_n<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::validation("ROUGE order must be at least 1"));
    }
    Ok(Prf::from_counts(
        clipped_overlap(cand, reference, n) as f64,
        ngram_total(cand.len(), n) as f64,
        ngram_total(reference.len(), n) as f64,
    ))
}

/// Pairs of (pred entry, ref entry) matched closest-date-first within
/// `window_days`, each entry used at most once.
pub fn align_dates(pred: &Timeline, reference: &Timeline, window_days: u32) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, p) in pred.entries.iter().enumerate() {
        for (j, r) in reference.entries.iter().enumerate() {
            let d = p.date.days_since(r.date).unsigned_abs();
            if d <= window_days as u64 {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort();
    let mut used_p = vec![false; pred.entries.len()];
    let mut used_r = vec![false; reference.entries.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_p[i] && !used_r[j] {
            used_p[i] = true;
            used_r[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// ROUGE-N counted only within date-matched entry pairs, normalised by all
/// n-grams on each side.
pub fn alignment_rouge(pred: &Timeline, reference: &Timeline, n: usize, window_days: u32) -> Result<Prf> {
    if n == 0 {
        return Err(Error::validation("ROUGE order must be at least 1"));
    }
    let hits: usize = align_dates(pred, reference, window_days)
        .into_iter()
        .map(|(i, j)| clipped_overlap(&pred.entries[i].tokens, &reference.entries[j].tokens, n))
        .sum();
    let total = |t: &Timeline| t.entries.iter().map(|e| ngram_total(e.tokens.len(), n)).sum::<usize>() as f64;
    Ok(Prf::from_counts(hits as f64, total(pred), total(reference)))
}

/// Greedy max-cosine token matching with each token embedded alone.
pub fn soft_token_f1<S: AsRef<str>>(cand: &[S], reference: &[S], embedder: &dyn EmbeddingProvider) -> Result<f64> {
    if cand.is_empty() || reference.is_empty() {
        return Ok(0.0);
    }
    let mut cache: HashMap<&str, Vector> = HashMap::new();
    let distinct: BTreeSet<&str> = cand.iter().chain(reference).map(AsRef::as_ref).collect();
    let distinct: Vec<&str> = distinct.into_iter().collect();
    for (t, v) in distinct.iter().zip(embedder.embed_batch(&distinct)?) {
        cache.insert(t, v);
    }
    let best = |from: &[S], to: &[S]| -> Result<f64> {
        let mut sum = 0.0;
        for a in from {
            let mut m: f64 = 0.0;
            for b in to {
                m = m.max(cosine_with_flag(&cache[a.as_ref()], &cache[b.as_ref()])?.0);
            }
            sum += m.clamp(0.0, 1.0);
        }
        Ok(sum / from.len() as f64)
    };
    let p = best(cand, reference)?;
    let r = best(reference, cand)?;
    Ok(harmonic(p, r))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub date_f1: f64,
    pub ar1_f: f64,
    pub ar2_f: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub soft_f1: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "topic,date_f1,ar1_f,ar2_f,rouge1_f,rouge2_f,soft_f1";

    pub fn csv_row(&self, topic: &str) -> String {
        format!(
            "{topic},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.date_f1, self.ar1_f, self.ar2_f, self.rouge1_f, self.rouge2_f, self.soft_f1
        )
    }
}

pub fn evaluate_timeline(
    pred: &Timeline,
    reference: &Timeline,
    embedder: &dyn EmbeddingProvider,
    window_days: u32,
) -> Result<MetricReport> {
    if pred.is_empty() || reference.is_empty() {
        return Err(Error::validation("cannot evaluate an empty timeline"));
    }
    let pd: BTreeSet<DayStamp> = pred.dates().into_iter().collect();
    let rd: BTreeSet<DayStamp> = reference.dates().into_iter().collect();
    let (pt, rt) = (pred.tokens(), reference.tokens());
    Ok(MetricReport {
        date_f1: date_f1(&pd, &rd).f1,
        ar1_f: alignment_rouge(pred, reference, 1, window_days)?.f1,
        ar2_f: alignment_rouge(pred, reference, 2, window_days)?.f1,
        rouge1_f: rouge_n(&pt, &rt, 1)?.f1,
        rouge2_f: rouge_n(&pt, &rt, 2)?.f1,
        soft_f1: soft_token_f1(&pt, &rt, embedder)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, EventSummary};
    use crate::embedding::hashed_embedding_provider;
    use proptest::prelude::*;

    fn day(s: &str) -> DayStamp {
        s.parse().unwrap()
    }

    fn tl(entries: &[(&str, &str)]) -> Timeline {
        Timeline::from_entries("t", entries.iter().map(|(d, t)| EventSummary::new(day(d), *t)).collect())
    }

    /// Maps every token to its own basis vector; synonyms share one.
    struct OneHot(Vec<Vec<&'static str>>);

    impl EmbeddingProvider for OneHot {
        fn name(&self) -> &str {
            "one-hot"
        }
        fn dim(&self) -> usize {
            self.0.len() + 1
        }
        fn embed_sentence(&self, text: &str) -> Result<Vector> {
            let mut v = vec![0.0; self.dim()];
            let i = self.0.iter().position(|g| g.contains(&text)).unwrap_or(self.0.len());
            v[i] = 1.0;
            Vector::new(v)
        }
    }

    #[test]
    fn date_f1_examples() {
        let set = |xs: &[&str]| xs.iter().map(|s| day(s)).collect::<BTreeSet<_>>();
        let a = set(&["2020-01-01", "2020-01-02"]);
        assert_eq!(date_f1(&a, &a).f1, 1.0);
        assert_eq!(date_f1(&a, &set(&["2021-01-01"])), Prf::default());
        let p = date_f1(&a, &set(&["2020-01-02", "2020-01-03"]));
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        assert_eq!(date_f1(&BTreeSet::new(), &a), Prf::default());
    }

    #[test]
    fn rouge_examples() {
        let c = tokenize("the cat sat");
        let r = tokenize("the cat ran");
        let p = rouge_n(&c, &r, 1).unwrap();
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_n(&c, &c, 2).unwrap().f1, 1.0);
        assert_eq!(rouge_n(&c, &tokenize("dog ran"), 1).unwrap(), Prf::default());
        assert!(rouge_n(&c, &r, 0).is_err());
        // Clipping: repeated candidate tokens only match as often as they occur.
        let p = rouge_n(&tokenize("the the the"), &tokenize("the cat"), 1).unwrap();
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_examples() {
        let pred = tl(&[("2020-01-01", "a b c d"), ("2020-01-05", "x y")]);
        let refr = tl(&[("2020-01-01", "a b e f g"), ("2020-01-09", "q")]);
        // Matched pair shares 2 unigrams; pred has 6, ref has 6 unigrams overall.
        let p = alignment_rouge(&pred, &refr, 1, 0).unwrap();
        assert!((p.precision - 2.0 / 6.0).abs() < 1e-12);
        let none = tl(&[("2021-01-01", "a b")]);
        assert_eq!(alignment_rouge(&none, &refr, 1, 0).unwrap(), Prf::default());
        assert_eq!(alignment_rouge(&pred, &pred, 2, 0).unwrap().f1, 1.0);
    }

    #[test]
    fn alignment_hand_computed() {
        // Pred has 4 unigrams, ref has 5; the single matched date shares 2.
        let pred = tl(&[("2020-01-01", "a b"), ("2020-01-02", "c d")]);
        let refr = tl(&[("2020-01-01", "a b x"), ("2020-01-03", "y z")]);
        let p = alignment_rouge(&pred, &refr, 1, 0).unwrap();
        assert!((p.precision - 0.5).abs() < 1e-12);
        assert!((p.recall - 0.4).abs() < 1e-12);
        assert!((p.f1 - 4.0 / 9.0).abs() < 1e-12);
        // Within a one-day window the second pair also aligns.
        let w = alignment_rouge(&pred, &refr, 1, 1).unwrap();
        assert!((w.precision - 0.5).abs() < 1e-12);
    }

    #[test]
    fn closest_first_matching() {
        let pred = tl(&[("2020-01-02", "a"), ("2020-01-03", "b")]);
        let refr = tl(&[("2020-01-03", "b"), ("2020-01-04", "a")]);
        let m = align_dates(&pred, &refr, 2);
        assert!(m.contains(&(1, 0)));
        assert!(m.contains(&(0, 1)));
    }

    #[test]
    fn soft_f1_examples() {
        let e = OneHot(vec![vec!["big"], vec!["large"], vec!["storm"], vec!["hit"]]);
        let a = tokenize("big storm hit");
        assert!((soft_token_f1(&a, &a, &e).unwrap() - 1.0).abs() < 1e-12);
        let b = tokenize("large storm");
        let rouge = rouge_n(&a, &b, 1).unwrap().f1;
        assert!((soft_token_f1(&a, &b, &e).unwrap() - rouge).abs() < 1e-12);
        let syn = OneHot(vec![vec!["big", "large"], vec!["storm"], vec!["hit"]]);
        let c = tokenize("large storm hit");
        assert!((soft_token_f1(&a, &c, &syn).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(soft_token_f1::<String>(&[], &a, &e).unwrap(), 0.0);
    }

    #[test]
    fn report_identity_and_empty_text() {
        let provider = hashed_embedding_provider(64, 3).unwrap();
        let r = tl(&[("2020-01-01", "storm hits coast"), ("2020-01-03", "power is restored")]);
        let m = evaluate_timeline(&r, &r, &provider, 0).unwrap();
        for x in [m.date_f1, m.ar1_f, m.ar2_f, m.rouge1_f, m.rouge2_f, m.soft_f1] {
            assert!((x - 1.0).abs() < 1e-12);
        }
        let empty = tl(&[("2020-01-01", ""), ("2020-01-03", "")]);
        let m = evaluate_timeline(&empty, &r, &provider, 0).unwrap();
        assert_eq!(m.date_f1, 1.0);
        assert_eq!((m.ar1_f, m.ar2_f), (0.0, 0.0));
        assert!(evaluate_timeline(&Timeline::from_entries("t", vec![]), &r, &provider, 0).is_err());
    }

    proptest! {
        #[test]
        fn rouge_duality_and_bounds(c in proptest::collection::vec("[a-e]", 0..12),
                                    r in proptest::collection::vec("[a-e]", 0..12), n in 1usize..3) {
            let cr = rouge_n(&c, &r, n).unwrap();
            let rc = rouge_n(&r, &c, n).unwrap();
            prop_assert!((cr.precision - rc.recall).abs() < 1e-12);
            for x in [cr.precision, cr.recall, cr.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert!(cr.f1 <= cr.precision.max(cr.recall) + 1e-12);
            prop_assert!(cr.f1 >= cr.precision.min(cr.recall) - 1e-12 || cr.f1 == 0.0);
        }

        #[test]
        fn alignment_monotone_in_window(pd in proptest::collection::vec((0i64..10, "[a-c]( [a-c]){0,3}"), 1..5),
                                        rd in proptest::collection::vec((0i64..10, "[a-c]( [a-c]){0,3}"), 1..5),
                                        k in 0u32..5) {
            let base = day("2020-01-01");
            let mk = |xs: &[(i64, String)]| Timeline::from_entries("t",
                xs.iter().map(|(d, t)| EventSummary::new(base.offset_days(*d), t.clone())).collect());
            let (p, r) = (mk(&pd), mk(&rd));
            let exact = alignment_rouge(&p, &r, 1, 0).unwrap();
            let wide = alignment_rouge(&p, &r, 1, k).unwrap();
            prop_assert!(wide.f1 >= exact.f1 - 1e-12);
        }

        #[test]
        fn soft_f1_matches_rouge_on_distinct_tokens(c in proptest::collection::btree_set("[a-f]", 1..6),
                                                     r in proptest::collection::btree_set("[a-f]", 1..6)) {
            let vocab: Vec<&'static str> = vec!["a", "b", "c", "d", "e", "f"];
            let e = OneHot(vocab.iter().map(|t| vec![*t]).collect());
            let c: Vec<String> = c.into_iter().collect();
            let r: Vec<String> = r.into_iter().collect();
            let soft = soft_token_f1(&c, &r, &e).unwrap();
            prop_assert!((soft - rouge_n(&c, &r, 1).unwrap().f1).abs() < 1e-12);
        }
    }
}
