//! Gaussian mixture fitted by EM, initialized with k-means++ and Lloyd.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::CovarianceKind;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
const REGULARIZATION: f64 = 1e-6;
const LLOYD_MAX_ITER: usize = 100;

#[derive(Debug, Clone)]
pub(crate) struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub covariance: CovarianceKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// Mean per-sample log-likelihood after each E-step.
    pub trace: Vec<f64>,
}

/// Lower-triangular Cholesky factor; `None` if not positive definite.
pub(crate) fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let d = a.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// A Gaussian component with its factorization cached for density evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    chol: Vec<Vec<f64>>,
    log_norm: f64,
}

impl Component {
    pub fn new(weight: f64, mean: &[f64], cov: &[Vec<f64>]) -> Result<Self> {
        let chol = cholesky(cov).ok_or_else(|| Error::NotPositiveDefinite {
            what: "mixture component covariance".to_string(),
        })?;
        let d = mean.len() as f64;
        let log_det: f64 = 2.0 * chol.iter().enumerate().map(|(i, r)| r[i].ln()).sum::<f64>();
        Ok(Self {
            log_weight: weight.ln(),
            mean: mean.to_vec(),
            chol,
            log_norm: -0.5 * (d * LOG_2PI + log_det),
        })
    }

    /// `log(w) + log N(x | mean, cov)`.
    pub fn weighted_log_density(&self, x: &[f64]) -> f64 {
        // Forward substitution L z = x - mean; Mahalanobis distance = |z|^2.
        let d = x.len();
        let mut z = vec![0.0; d];
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i][k] * z[k];
            }
            z[i] = s / self.chol[i][i];
            maha += z[i] * z[i];
        }
        self.log_weight + self.log_norm - 0.5 * maha
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties.
pub(crate) fn nearest(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

pub(crate) fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[next].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centers[centers.len() - 1]));
        }
    }
    centers
}

pub(crate) fn lloyd(data: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = data[0].len();
    let mut labels: Vec<usize> = data.iter().map(|x| nearest(x, &centers)).collect();
    for _ in 0..LLOYD_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x) {
                *s += v;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            if counts[j] > 0 {
                *c = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = data.iter().map(|x| nearest(x, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    (centers, labels)
}

fn data_trace(data: &[Vec<f64>]) -> f64 {
    let n = data.len() as f64;
    let dim = data[0].len();
    (0..dim)
        .map(|j| {
            let m = data.iter().map(|x| x[j]).sum::<f64>() / n;
            data.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n
        })
        .sum()
}

/// Weighted M-step for one component; `resp[i]` is the responsibility of
/// sample `i`.
fn m_step_component(
    data: &[Vec<f64>],
    resp: impl Iterator<Item = f64> + Clone,
    kind: CovarianceKind,
    fallback_trace: f64,
) -> Option<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let dim = data[0].len();
    let nk: f64 = resp.clone().sum();
    if !(nk > 1e-10) {
        return None;
    }
    let mut mean = vec![0.0; dim];
    for (x, r) in data.iter().zip(resp.clone()) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += r * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nk);
    let mut cov = vec![vec![0.0; dim]; dim];
    for (x, r) in data.iter().zip(resp) {
        for i in 0..dim {
            let di = x[i] - mean[i];
            for j in 0..=i {
                cov[i][j] += r * di * (x[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            cov[i][j] /= nk;
            cov[j][i] = cov[i][j];
        }
    }
    if kind == CovarianceKind::Diagonal {
        for (i, row) in cov.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                if i != j {
                    *c = 0.0;
                }
            }
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i][i]).sum();
    let base = if trace > 0.0 { trace } else { fallback_trace };
    let reg = REGULARIZATION * base / dim as f64;
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += reg;
    }
    Some((nk, mean, cov))
}

pub(crate) fn fit(data: &[Vec<f64>], k: usize, opts: &EmOptions) -> Result<Mixture> {
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (centers, labels) = lloyd(data, kmeans_plus_plus(data, k, &mut rng));
    let fallback_trace = data_trace(data);
    if !(fallback_trace > 0.0) {
        return Err(Error::NotPositiveDefinite {
            what: "environmental data covariance (all samples identical)".to_string(),
        });
    }

    let mut weights = vec![1.0 / k as f64; k];
    let mut means = centers;
    let mut covs = vec![vec![vec![0.0; data[0].len()]; data[0].len()]; k];
    for j in 0..k {
        let resp = labels.iter().map(move |&l| if l == j { 1.0 } else { 0.0 });
        match m_step_component(data, resp, opts.covariance, fallback_trace) {
            Some((nk, m, c)) => {
                weights[j] = nk / n as f64;
                means[j] = m;
                covs[j] = c;
            }
            None => {
                // Empty after Lloyd: keep the center, use a broad covariance.
                let dim = data[0].len();
                weights[j] = 1e-6;
                covs[j] = (0..dim)
                    .map(|a| (0..dim).map(|b| if a == b { fallback_trace / dim as f64 } else { 0.0 }).collect())
                    .collect();
            }
        }
    }
    normalize(&mut weights);

    let mut trace = Vec::new();
    let mut log_resp = vec![vec![0.0; k]; n];
    for _ in 0..opts.max_iter {
        let comps = (0..k)
            .map(|j| Component::new(weights[j], &means[j], &covs[j]))
            .collect::<Result<Vec<_>>>()?;
        let mut ll = 0.0;
        for (x, lr) in data.iter().zip(log_resp.iter_mut()) {
            for (j, c) in comps.iter().enumerate() {
                lr[j] = c.weighted_log_density(x);
            }
            let lse = log_sum_exp(lr);
            ll += lse;
            lr.iter_mut().for_each(|v| *v -= lse);
        }
        let ll = ll / n as f64;
        let converged = trace.last().is_some_and(|prev: &f64| ll - prev < opts.tol);
        trace.push(ll);
        if converged {
            break;
        }
        for j in 0..k {
            let resp = log_resp.iter().map(move |lr| lr[j].exp());
            if let Some((nk, m, c)) = m_step_component(data, resp, opts.covariance, fallback_trace) {
                weights[j] = nk / n as f64;
                means[j] = m;
                covs[j] = c;
            }
        }
        normalize(&mut weights);
    }

    Ok(Mixture {
        weights,
        means,
        covariances: covs,
        trace,
    })
}

fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
}
