//! Gaussian-process preference learning.
//!
//! A latent quality function `f` over item embeddings has a zero-mean GP prior
//! with a squared-exponential kernel. Each label "winner beats loser" has
//! probit likelihood `Φ((f(w) - f(l)) / √(2σ²))`. The posterior is
//! approximated by Laplace's method: Newton iterations find the mode, and the
//! covariance is the inverse negative Hessian there.
//!
//! The Newton iteration is written in terms of `a = K⁻¹f` so that the prior
//! covariance is never inverted:
//!
//! ```text
//! W = -∇∇ log p(P | f)       (PSD, not diagonal: pairs couple items)
//! a' = (I + W K)⁻¹ (W f + ∇ log p(P | f)),   f' = K a'
//! Σ  = K (I + W K)⁻¹
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::Vector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: String,
    pub loser: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl PreferencePair {
    pub fn new(winner: impl Into<String>, loser: impl Into<String>) -> Self {
        PreferencePair {
            winner: winner.into(),
            loser: loser.into(),
            weight: 1.0,
        }
    }
}

/// Every ordered pair of a ranking, earlier-ranked item as winner.
pub fn pairs_from_ranking<S: AsRef<str>>(ranking: &[S]) -> Result<Vec<PreferencePair>> {
    let mut seen = HashSet::new();
    for id in ranking {
        if !seen.insert(id.as_ref()) {
            return Err(Error::validation(format!("duplicate id {:?} in ranking", id.as_ref())));
        }
    }
    if ranking.len() < 2 {
        return Err(Error::validation("a ranking needs at least two items"));
    }
    let mut pairs = Vec::with_capacity(ranking.len() * (ranking.len() - 1) / 2);
    for (i, w) in ranking.iter().enumerate() {
        for l in &ranking[i + 1..] {
            pairs.push(PreferencePair::new(w.as_ref(), l.as_ref()));
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferenceDataset {
    pub items: BTreeMap<String, Vector>,
    pub pairs: Vec<PreferencePair>,
}

impl PreferenceDataset {
    pub fn new(items: BTreeMap<String, Vector>, pairs: Vec<PreferencePair>) -> Result<Self> {
        let dim = items.values().next().map(Vector::dim);
        if let Some(dim) = dim {
            if let Some((id, _)) = items.iter().find(|(_, v)| v.dim() != dim) {
                return Err(Error::validation(format!("item {id} has a different embedding dimension")));
            }
        }
        for p in &pairs {
            if p.winner == p.loser {
                return Err(Error::validation(format!("pair compares {} with itself", p.winner)));
            }
            for id in [&p.winner, &p.loser] {
                if !items.contains_key(id) {
                    return Err(Error::validation(format!("pair refers to unknown item {id}")));
                }
            }
            if !(p.weight.is_finite() && p.weight > 0.0) {
                return Err(Error::validation("pair weight must be positive"));
            }
        }
        Ok(PreferenceDataset { items, pairs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub lengthscale: f64,
    pub variance: f64,
}

impl Kernel {
    pub fn eval(&self, x: &Vector, y: &Vector) -> f64 {
        self.variance * (-x.squared_distance(y) / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    fn matrix(&self, xs: &[Vector], jitter: f64) -> DMatrix<f64> {
        let n = xs.len();
        DMatrix::from_fn(n, n, |i, j| self.eval(&xs[i], &xs[j]) + if i == j { jitter } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpplConfig {
    /// `None` selects the median pairwise distance between items.
    pub lengthscale: Option<f64>,
    pub signal_variance: f64,
    pub noise: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub jitter: f64,
}

impl Default for GpplConfig {
    fn default() -> Self {
        GpplConfig {
            lengthscale: None,
            signal_variance: 1.0,
            noise: 1.0,
            max_iter: 100,
            tolerance: 1e-6,
            jitter: 1e-8,
        }
    }
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn log_normal_cdf(z: f64) -> f64 {
    if z > -30.0 {
        standard_normal_cdf(z).ln()
    } else {
        let z2 = z * z;
        -0.5 * z2 - 0.5 * (2.0 * std::f64::consts::PI).ln() - (-z).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// `φ(z) / Φ(z)`, using the asymptotic expansion deep in the lower tail.
fn inverse_mills(z: f64) -> f64 {
    if z > -30.0 {
        standard_normal_pdf(z) / standard_normal_cdf(z)
    } else {
        let z2 = z * z;
        -z / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2))
    }
}

/// Probability that an item with predictive `(mean_a, var_a)` beats one with
/// `(mean_b, var_b)`: `Φ((μa − μb) / √(2σ² + va + vb))`.
pub fn probit_preference(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64, noise: f64) -> f64 {
    standard_normal_cdf((mean_a - mean_b) / (2.0 * noise * noise + var_a + var_b).sqrt())
}

/// Median Euclidean distance over distinct item pairs; 1 when undefined.
pub fn median_heuristic(xs: &[Vector]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            d.push(xs[i].squared_distance(&xs[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

struct IndexedPair {
    winner: usize,
    loser: usize,
    weight: f64,
}

/// Log-likelihood, its gradient and the negative Hessian `W` at `f`.
fn likelihood_terms(pairs: &[IndexedPair], f: &DVector<f64>, noise: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = f.len();
    let scale = std::f64::consts::SQRT_2 * noise;
    let mut ll = 0.0;
    let mut grad = DVector::zeros(n);
    let mut w = DMatrix::zeros(n, n);
    for p in pairs {
        let z = (f[p.winner] - f[p.loser]) / scale;
        let lambda = inverse_mills(z);
        ll += p.weight * log_normal_cdf(z);
        let g = p.weight * lambda / scale;
        grad[p.winner] += g;
        grad[p.loser] -= g;
        let h = p.weight * lambda * (z + lambda) / (scale * scale);
        w[(p.winner, p.winner)] += h;
        w[(p.loser, p.loser)] += h;
        w[(p.winner, p.loser)] -= h;
        w[(p.loser, p.winner)] -= h;
    }
    (ll, grad, w)
}

/// Laplace-approximated GP posterior over item scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub item_ids: Vec<String>,
    pub training_embeddings: Vec<Vector>,
    pub posterior_mean: DVector<f64>,
    pub posterior_covariance: DMatrix<f64>,
    pub kernel: Kernel,
    pub noise: f64,
    /// `K⁻¹ f̂`, the predictive-mean weights.
    pub weights: DVector<f64>,
    /// `(I + W K)⁻¹ W`, the predictive-variance correction.
    pub variance_correction: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

pub fn fit_gppl(data: &PreferenceDataset, config: &GpplConfig) -> Result<ScoreModel> {
    if data.items.is_empty() {
        return Err(Error::validation("preference dataset has no items"));
    }
    if !(config.noise > 0.0 && config.signal_variance > 0.0) {
        return Err(Error::validation("noise scale and signal variance must be positive"));
    }
    let item_ids: Vec<String> = data.items.keys().cloned().collect();
    let xs: Vec<Vector> = data.items.values().cloned().collect();
    let index: BTreeMap<&str, usize> = item_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let pairs: Vec<IndexedPair> = data
        .pairs
        .iter()
        .map(|p| IndexedPair {
            winner: index[p.winner.as_str()],
            loser: index[p.loser.as_str()],
            weight: p.weight,
        })
        .collect();

    let lengthscale = match config.lengthscale {
        Some(l) if l > 0.0 => l,
        Some(_) => return Err(Error::validation("lengthscale must be positive")),
        None => median_heuristic(&xs),
    };
    let kernel = Kernel {
        lengthscale,
        variance: config.signal_variance,
    };
    let k = kernel.matrix(&xs, config.jitter);
    if k.clone().cholesky().is_none() {
        return Err(Error::Numerical("kernel matrix is not positive definite after jitter".into()));
    }
    let n = xs.len();
    let eye = DMatrix::<f64>::identity(n, n);
    let objective = |a: &DVector<f64>, f: &DVector<f64>| likelihood_terms(&pairs, f, config.noise).0 - 0.5 * a.dot(f);

    let mut a = DVector::<f64>::zeros(n);
    let mut f = DVector::<f64>::zeros(n);
    let mut psi = objective(&a, &f);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        let (_, grad, w) = likelihood_terms(&pairs, &f, config.noise);
        if (&grad - &a).amax() < config.tolerance {
            converged = true;
            iterations = it;
            break;
        }
        let b = &w * &f + &grad;
        let a_newton = (&eye + &w * &k)
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numerical("singular Newton system".into()))?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let a_try = &a + (&a_newton - &a) * step;
            let f_try = &k * &a_try;
            let psi_try = objective(&a_try, &f_try);
            if psi_try >= psi {
                a = a_try;
                f = f_try;
                psi = psi_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations = it + 1;
        if !accepted {
            // No ascent direction left at machine precision.
            let (_, grad, _) = likelihood_terms(&pairs, &f, config.noise);
            converged = (&grad - &a).amax() < config.tolerance.sqrt();
            break;
        }
    }
    if !converged {
        let (_, grad, _) = likelihood_terms(&pairs, &f, config.noise);
        converged = (&grad - &a).amax() < config.tolerance;
    }
    if !converged {
        log::warn!("GPPL Laplace iterations did not converge after {iterations} steps");
    }

    let (_, _, w) = likelihood_terms(&pairs, &f, config.noise);
    let inv = (&eye + &w * &k)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular posterior system".into()))?;
    let cov = &k * &inv;
    let cov = (&cov + cov.transpose()) * 0.5;
    let variance_correction = &inv * &w;

    Ok(ScoreModel {
        item_ids,
        training_embeddings: xs,
        posterior_mean: f,
        posterior_covariance: cov,
        kernel,
        noise: config.noise,
        weights: a,
        variance_correction,
        converged,
        iterations,
    })
}

/// Unnormalised log posterior `log p(P | f) − ½ fᵀK⁻¹f` at explicit scores.
pub fn log_posterior(data: &PreferenceDataset, kernel: Kernel, noise: f64, jitter: f64, f: &[f64]) -> Result<f64> {
    let xs: Vec<Vector> = data.items.values().cloned().collect();
    let index: BTreeMap<&str, usize> = data.items.keys().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let pairs: Vec<IndexedPair> = data
        .pairs
        .iter()
        .map(|p| IndexedPair {
            winner: index[p.winner.as_str()],
            loser: index[p.loser.as_str()],
            weight: p.weight,
        })
        .collect();
    let f = DVector::from_column_slice(f);
    let chol = kernel
        .matrix(&xs, jitter)
        .cholesky()
        .ok_or_else(|| Error::Numerical("kernel matrix is not positive definite".into()))?;
    let a = chol.solve(&f);
    Ok(likelihood_terms(&pairs, &f, noise).0 - 0.5 * f.dot(&a))
}

impl ScoreModel {
    pub fn dim(&self) -> usize {
        self.training_embeddings.first().map(Vector::dim).unwrap_or(0)
    }

    pub fn mean_of(&self, id: &str) -> Option<f64> {
        self.item_ids.iter().position(|i| i == id).map(|i| self.posterior_mean[i])
    }

    /// Posterior-predictive `(mean, variance)` of `f(x)`.
    pub fn predict(&self, x: &Vector) -> Result<(f64, f64)> {
        if x.dim() != self.dim() {
            return Err(Error::validation(format!(
                "score model expects dimension {}, got {}",
                self.dim(),
                x.dim()
            )));
        }
        let ks = DVector::from_iterator(
            self.training_embeddings.len(),
            self.training_embeddings.iter().map(|t| self.kernel.eval(x, t)),
        );
        let mean = ks.dot(&self.weights);
        let var = self.kernel.variance - ks.dot(&(&self.variance_correction * &ks));
        Ok((mean, var.max(0.0)))
    }

    /// `p(a ≻ b)` under the predictive distributions of both inputs.
    pub fn pairwise_probability(&self, a: &Vector, b: &Vector) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(Error::validation("pairwise inputs differ in dimension"));
        }
        let (ma, va) = self.predict(a)?;
        let (mb, vb) = self.predict(b)?;
        Ok(probit_preference(ma, va, mb, vb, self.noise))
    }

    /// Writes the model as a plain-text matrix dump with a parameter header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::new();
        let n = self.item_ids.len();
        writeln!(s, "chronoline-score-model 1").unwrap();
        writeln!(s, "dim {}", self.dim()).unwrap();
        writeln!(s, "n_items {n}").unwrap();
        writeln!(s, "lengthscale {}", self.kernel.lengthscale).unwrap();
        writeln!(s, "variance {}", self.kernel.variance).unwrap();
        writeln!(s, "noise {}", self.noise).unwrap();
        writeln!(s, "converged {}", self.converged).unwrap();
        writeln!(s, "iterations {}", self.iterations).unwrap();
        for id in &self.item_ids {
            writeln!(s, "item {id}").unwrap();
        }
        let row = |xs: &mut dyn Iterator<Item = f64>| xs.map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for e in &self.training_embeddings {
            writeln!(s, "{}", row(&mut e.as_slice().iter().copied())).unwrap();
        }
        writeln!(s, "{}", row(&mut self.posterior_mean.iter().copied())).unwrap();
        writeln!(s, "{}", row(&mut self.weights.iter().copied())).unwrap();
        for m in [&self.posterior_covariance, &self.variance_correction] {
            for i in 0..n {
                writeln!(s, "{}", row(&mut m.row(i).iter().copied())).unwrap();
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ScoreModel> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = content.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::Parse {
            path: path.to_owned(),
            line: line + 1,
            message: msg.to_owned(),
        };
        let mut next = |expect: &str| -> Result<(usize, String)> {
            let (i, l) = lines.next().ok_or_else(|| bad(usize::MAX - 1, "unexpected end of file"))?;
            if expect.is_empty() {
                return Ok((i, l.to_owned()));
            }
            l.strip_prefix(expect)
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| (i, r.to_owned()))
                .ok_or_else(|| bad(i, &format!("expected {expect:?}")))
        };
        let (i, magic) = next("chronoline-score-model")?;
        if magic != "1" {
            return Err(bad(i, "unsupported score model version"));
        }
        fn num<T: std::str::FromStr>(v: (usize, String), bad: &dyn Fn(usize, &str) -> Error) -> Result<T> {
            v.1.trim().parse().map_err(|_| bad(v.0, "malformed number"))
        }
        let dim: usize = num(next("dim")?, &bad)?;
        let n: usize = num(next("n_items")?, &bad)?;
        let lengthscale: f64 = num(next("lengthscale")?, &bad)?;
        let variance: f64 = num(next("variance")?, &bad)?;
        let noise: f64 = num(next("noise")?, &bad)?;
        let converged: bool = num(next("converged")?, &bad)?;
        let iterations: usize = num(next("iterations")?, &bad)?;
        let mut item_ids = Vec::with_capacity(n);
        for _ in 0..n {
            item_ids.push(next("item")?.1);
        }
        let mut row = |len: usize| -> Result<Vec<f64>> {
            let (i, l) = next("")?;
            let xs: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i, "malformed number"))?;
            if xs.len() != len {
                return Err(bad(i, &format!("expected {len} values, found {}", xs.len())));
            }
            Ok(xs)
        };
        let mut training_embeddings = Vec::with_capacity(n);
        for _ in 0..n {
            training_embeddings.push(Vector::new(row(dim)?)?);
        }
        let posterior_mean = DVector::from_vec(row(n)?);
        let weights = DVector::from_vec(row(n)?);
        let mut matrix = || -> Result<DMatrix<f64>> {
            let mut data = Vec::with_capacity(n * n);
            for _ in 0..n {
                data.extend(row(n)?);
            }
            Ok(DMatrix::from_row_slice(n, n, &data))
        };
        let posterior_covariance = matrix()?;
        let variance_correction = matrix()?;
        Ok(ScoreModel {
            item_ids,
            training_embeddings,
            posterior_mean,
            posterior_covariance,
            kernel: Kernel { lengthscale, variance },
            noise,
            weights,
            variance_correction,
            converged,
            iterations,
        })
    }
}
