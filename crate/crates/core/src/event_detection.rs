//! Event detection: cluster article embeddings, date the clusters, rank them
//! by how often their date is mentioned, and keep the top `l`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::DayStamp;
use crate::embedding::{cosine_similarity, Vector};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCluster {
    pub id: String,
    pub members: Vec<String>,
    pub centroid: Vector,
    pub assigned_date: Option<DayStamp>,
    /// Corpus-wide mentions of `assigned_date`; filled in by ranking.
    pub mention_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<EventCluster>,
    pub provider_name: String,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Agglomerative,
    Markov,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agglomerative" => Ok(Algorithm::Agglomerative),
            "markov" => Ok(Algorithm::Markov),
            other => Err(Error::validation(format!("unknown clustering algorithm {other:?}"))),
        }
    }
}

fn check_vectors(vectors: &BTreeMap<String, Vector>) -> Result<usize> {
    let dim = vectors
        .values()
        .next()
        .map(Vector::dim)
        .ok_or_else(|| Error::validation("clustering needs at least one vector"))?;
    if let Some((id, v)) = vectors.iter().find(|(_, v)| v.dim() != dim) {
        return Err(Error::validation(format!(
            "vector {id} has dimension {}, expected {dim}",
            v.dim()
        )));
    }
    Ok(dim)
}

fn build_clusters(groups: Vec<Vec<usize>>, ids: &[&String], vecs: &[&Vector]) -> Result<Vec<EventCluster>> {
    let mut groups: Vec<Vec<usize>> = groups
        .into_iter()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    groups.sort();
    groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            Ok(EventCluster {
                id: format!("c{i:04}"),
                members: g.iter().map(|&k| ids[k].clone()).collect(),
                centroid: Vector::mean(g.iter().map(|&k| vecs[k]))?,
                assigned_date: None,
                mention_count: 0,
            })
        })
        .collect()
}

/// Pairwise cosine distances `1 - cos` between the vectors, in id order.
fn distance_matrix(vecs: &[&Vector]) -> Result<Vec<Vec<f64>>> {
    let n = vecs.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = 1.0 - cosine_similarity(vecs[i], vecs[j])?;
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    Ok(d)
}

/// Average-linkage agglomerative clustering under cosine distance.
///
/// Clusters are merged while the smallest average inter-cluster distance is at
/// most `threshold`. Equal distances are broken by the smallest member ids of
/// the two clusters.
pub fn cluster_agglomerative(vectors: &BTreeMap<String, Vector>, threshold: f64) -> Result<ClusterSet> {
    check_vectors(vectors)?;
    if !(0.0..=2.0).contains(&threshold) {
        return Err(Error::validation("agglomerative threshold must lie in [0, 2]"));
    }
    let ids: Vec<&String> = vectors.keys().collect();
    let vecs: Vec<&Vector> = vectors.values().collect();
    let n = ids.len();
    let mut dist = distance_matrix(&vecs)?;
    // Ids are sorted, so a cluster's smallest member is its smallest index.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if members[a].is_none() {
                continue;
            }
            for b in (a + 1)..n {
                if members[b].is_none() {
                    continue;
                }
                let d = dist[a][b];
                // Iteration order already follows (min id a, min id b), so only
                // a strictly smaller distance replaces the incumbent.
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d > threshold {
            break;
        }
        let mb = members[b].take().unwrap();
        let ma = members[a].as_mut().unwrap();
        let (na, nb) = (ma.len() as f64, mb.len() as f64);
        ma.extend(mb);
        for k in 0..n {
            if k == a || members[k].is_none() {
                continue;
            }
            let merged = (na * dist[k][a] + nb * dist[k][b]) / (na + nb);
            dist[k][a] = merged;
            dist[a][k] = merged;
        }
    }

    let groups = members.into_iter().flatten().collect();
    Ok(ClusterSet {
        clusters: build_clusters(groups, &ids, &vecs)?,
        provider_name: String::new(),
        converged: true,
    })
}

/// Markov clustering over the clipped cosine-similarity graph.
///
/// The row-stochastic transition matrix (negative similarities set to 0,
/// self-loops of weight 1) is alternately squared and inflated until the
/// largest entry change falls below 1e-6. Clusters are the connected
/// components of the remaining flow.
pub fn cluster_markov(vectors: &BTreeMap<String, Vector>, inflation: f64, max_iter: usize) -> Result<ClusterSet> {
    check_vectors(vectors)?;
    if inflation <= 1.0 {
        return Err(Error::validation("inflation must exceed 1"));
    }
    let ids: Vec<&String> = vectors.keys().collect();
    let vecs: Vec<&Vector> = vectors.values().collect();
    let n = ids.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = if i == j {
                1.0
            } else {
                cosine_similarity(vecs[i], vecs[j])?.max(0.0)
            };
        }
    }
    normalise_rows(&mut m);

    let mut converged = false;
    for _ in 0..max_iter {
        let prev = m.clone();
        m = &m * &m;
        m.apply(|x| {
            let y = x.powf(inflation);
            *x = if y < 1e-12 { 0.0 } else { y };
        });
        normalise_rows(&mut m);
        if (&m - &prev).amax() < 1e-6 {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("markov clustering did not converge in {max_iter} iterations");
    }

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        parent[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] > 1e-6 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    Ok(ClusterSet {
        clusters: build_clusters(groups.into_values().collect(), &ids, &vecs)?,
        provider_name: String::new(),
        converged,
    })
}

fn normalise_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
}

/// Modal date among the members' mentions, earliest date on ties. `None`
/// means the cluster is undatable.
pub fn assign_cluster_date(members: &[String], mentions: &HashMap<String, Vec<DayStamp>>) -> Option<DayStamp> {
    let mut counts: BTreeMap<DayStamp, usize> = BTreeMap::new();
    for m in members {
        for d in mentions.get(m).into_iter().flatten() {
            *counts.entry(*d).or_insert(0) += 1;
        }
    }
    // BTreeMap iterates in ascending date order; keep the first maximum.
    counts
        .into_iter()
        .fold(None, |best: Option<(DayStamp, usize)>, (d, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((d, c)),
        })
        .map(|(d, _)| d)
}

/// Dates every cluster and drops the undatable ones.
pub fn date_clusters(mut cs: ClusterSet, mentions: &HashMap<String, Vec<DayStamp>>) -> ClusterSet {
    cs.clusters.retain_mut(|c| {
        c.assigned_date = assign_cluster_date(&c.members, mentions);
        if c.assigned_date.is_none() {
            log::info!("dropping undatable cluster {}", c.id);
        }
        c.assigned_date.is_some()
    });
    cs
}

/// Orders clusters by corpus-wide mentions of their date (descending), then
/// earlier date, then more members.
pub fn rank_clusters(mut cs: ClusterSet, corpus_mentions: &BTreeMap<DayStamp, usize>) -> Result<ClusterSet> {
    for c in &mut cs.clusters {
        let d = c
            .assigned_date
            .ok_or_else(|| Error::validation(format!("cluster {} has no assigned date", c.id)))?;
        c.mention_count = corpus_mentions.get(&d).copied().unwrap_or(0);
    }
    cs.clusters.sort_by(|a, b| {
        b.mention_count
            .cmp(&a.mention_count)
            .then(a.assigned_date.cmp(&b.assigned_date))
            .then(b.members.len().cmp(&a.members.len()))
            .then_with(|| a.members.cmp(&b.members))
    });
    Ok(cs)
}

/// Merges clusters sharing a date (into the higher-ranked one) and keeps the
/// first `l`.
pub fn select_top_l(ranked: &ClusterSet, l: usize) -> Result<Vec<EventCluster>> {
    if l == 0 {
        return Err(Error::validation("top-l must be at least 1"));
    }
    let mut merged: Vec<EventCluster> = Vec::new();
    for c in &ranked.clusters {
        match merged.iter_mut().find(|m| m.assigned_date == c.assigned_date) {
            Some(m) => {
                let (na, nb) = (m.members.len() as f64, c.members.len() as f64);
                let centroid: Vec<f64> = m
                    .centroid
                    .as_slice()
                    .iter()
                    .zip(c.centroid.as_slice())
                    .map(|(x, y)| (na * x + nb * y) / (na + nb))
                    .collect();
                m.centroid = Vector::new(centroid)?;
                m.members.extend(c.members.iter().cloned());
            }
            None => merged.push(c.clone()),
        }
    }
    merged.truncate(l);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vectors(points: &[(&str, &[f64])]) -> BTreeMap<String, Vector> {
        points
            .iter()
            .map(|(id, x)| (id.to_string(), Vector::new(x.to_vec()).unwrap()))
            .collect()
    }

    fn partition(cs: &ClusterSet) -> Vec<Vec<String>> {
        let mut p: Vec<Vec<String>> = cs.clusters.iter().map(|c| c.members.clone()).collect();
        p.sort();
        p
    }

    fn four_points() -> BTreeMap<String, Vector> {
        vectors(&[
            ("a", &[1.0, 0.05, 0.0]),
            ("b", &[1.0, -0.05, 0.0]),
            ("c", &[0.0, 0.05, 1.0]),
            ("d", &[0.0, -0.05, 1.0]),
        ])
    }

    #[test]
    fn agglomerative_degenerate_thresholds() {
        let v = four_points();
        assert_eq!(cluster_agglomerative(&v, 0.0).unwrap().clusters.len(), 4);
        assert_eq!(cluster_agglomerative(&v, 2.0).unwrap().clusters.len(), 1);
    }

    #[test]
    fn agglomerative_two_tight_pairs() {
        let cs = cluster_agglomerative(&four_points(), 0.7).unwrap();
        assert_eq!(
            partition(&cs),
            vec![vec!["a".to_string(), "b".into()], vec!["c".into(), "d".into()]]
        );
    }

    #[test]
    fn agglomerative_rejects_bad_input() {
        let v = vectors(&[("a", &[1.0, 0.0]), ("b", &[1.0])]);
        assert!(cluster_agglomerative(&v, 0.7).is_err());
        assert!(cluster_agglomerative(&BTreeMap::new(), 0.7).is_err());
        assert!(cluster_agglomerative(&four_points(), 2.5).is_err());
    }

    #[test]
    fn coarsening_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let v: BTreeMap<String, Vector> = (0..8)
                .map(|i| {
                    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (format!("p{i}"), Vector::new(x).unwrap())
                })
                .collect();
            let mut last = usize::MAX;
            for t in [0.0, 0.2, 0.5, 0.7, 1.0, 1.5, 2.0] {
                let k = cluster_agglomerative(&v, t).unwrap().clusters.len();
                assert!(k <= last);
                last = k;
            }
        }
    }

    #[test]
    fn markov_identical_and_orthogonal() {
        let same = vectors(&[("a", &[1.0, 2.0]), ("b", &[1.0, 2.0]), ("c", &[1.0, 2.0])]);
        assert_eq!(cluster_markov(&same, 2.0, 100).unwrap().clusters.len(), 1);
        let blocks = vectors(&[("a", &[1.0, 0.0]), ("b", &[2.0, 0.0]), ("c", &[0.0, 1.0]), ("d", &[0.0, 3.0])]);
        let cs = cluster_markov(&blocks, 2.0, 100).unwrap();
        assert!(cs.converged);
        assert_eq!(
            partition(&cs),
            vec![vec!["a".to_string(), "b".into()], vec!["c".into(), "d".into()]]
        );
        assert!(cluster_markov(&blocks, 1.0, 100).is_err());
    }

    fn day(s: &str) -> DayStamp {
        s.parse().unwrap()
    }

    #[test]
    fn modal_date_with_earliest_tie() {
        let members = vec!["x".to_string(), "y".to_string()];
        let mut m = HashMap::new();
        m.insert("x".to_string(), vec![day("2011-03-02"), day("2011-03-02"), day("2011-03-05")]);
        m.insert("y".to_string(), vec![day("2011-03-02")]);
        assert_eq!(assign_cluster_date(&members, &m), Some(day("2011-03-02")));
        m.insert("y".to_string(), vec![day("2011-03-05")]);
        assert_eq!(assign_cluster_date(&members, &m), Some(day("2011-03-02")));
        m.insert("x".to_string(), vec![day("2011-03-05")]);
        m.insert("y".to_string(), vec![day("2011-03-02"), day("2011-03-05")]);
        assert_eq!(assign_cluster_date(&members, &m), Some(day("2011-03-05")));
        assert_eq!(assign_cluster_date(&["z".to_string()], &m), None);
    }

    fn dated(id: &str, date: &str, members: usize) -> EventCluster {
        EventCluster {
            id: id.into(),
            members: (0..members).map(|i| format!("{id}-{i}")).collect(),
            centroid: Vector::new(vec![1.0, 0.0]).unwrap(),
            assigned_date: Some(day(date)),
            mention_count: 0,
        }
    }

    fn set(clusters: Vec<EventCluster>) -> ClusterSet {
        ClusterSet {
            clusters,
            provider_name: "test".into(),
            converged: true,
        }
    }

    #[test]
    fn ranking_by_mentions_then_date() {
        let counts: BTreeMap<DayStamp, usize> =
            [(day("2011-03-01"), 5), (day("2011-03-02"), 9), (day("2011-03-03"), 1), (day("2011-03-04"), 5)]
                .into_iter()
                .collect();
        let cs = set(vec![
            dated("p", "2011-03-04", 1),
            dated("q", "2011-03-03", 1),
            dated("r", "2011-03-02", 1),
            dated("s", "2011-03-01", 1),
        ]);
        let ranked = rank_clusters(cs, &counts).unwrap();
        let order: Vec<&str> = ranked.clusters.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(order, vec!["r", "s", "p", "q"]);
        assert_eq!(ranked.clusters[0].mention_count, 9);
    }

    #[test]
    fn ranking_requires_dates() {
        let mut c = dated("p", "2011-03-04", 1);
        c.assigned_date = None;
        assert!(rank_clusters(set(vec![c]), &BTreeMap::new()).is_err());
    }

    #[test]
    fn top_l_prefix_and_merge() {
        let cs = set((0..7).map(|i| dated(&format!("c{i}"), &format!("2011-03-0{}", i + 1), 2)).collect());
        assert_eq!(select_top_l(&cs, 3).unwrap().len(), 3);
        assert_eq!(select_top_l(&cs, 30).unwrap().len(), 7);
        assert!(select_top_l(&cs, 0).is_err());

        let mut b = dated("b", "2011-03-02", 1);
        b.centroid = Vector::new(vec![0.0, 1.0]).unwrap();
        let shared = set(vec![dated("a", "2011-03-02", 3), b]);
        let top = select_top_l(&shared, 1).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].members.len(), 4);
        assert_eq!(top[0].centroid.as_slice(), &[0.75, 0.25]);
    }
}
