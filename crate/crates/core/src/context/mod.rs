//! Clustering of the environmental variables into flight contexts.
//!
//! Training fits either a Gaussian mixture (EM) or a Ward hierarchy on the
//! environmental columns; test samples are assigned to the trained clusters.

mod gmm;
pub mod ward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use gmm::{Component, EmOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMethod {
    #[default]
    #[serde(alias = "gmm")]
    GmmEm,
    #[serde(alias = "hac")]
    WardHac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextOptions {
    pub k: usize,
    pub method: ContextMethod,
    pub covariance: CovarianceKind,
    pub max_iter: usize,
    /// Stop when the mean log-likelihood gains less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ContextOptions {
    fn default() -> Self {
        Self {
            k: 5,
            method: ContextMethod::GmmEm,
            covariance: CovarianceKind::Full,
            max_iter: 500,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextModel {
    pub method: ContextMethod,
    pub k: usize,
    pub variables: Vec<String>,
    /// Mixture weights (GMM) or cluster proportions (Ward).
    pub weights: Vec<f64>,
    /// Component means (GMM) or centroids (Ward).
    pub means: Vec<Vec<f64>>,
    /// Component covariances; empty for Ward.
    #[serde(default)]
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub covariance_kind: CovarianceKind,
    /// `1 - within SS / total SS` of the hard training partition.
    pub explained_variance: f64,
    /// Mean per-sample log-likelihood after each EM iteration.
    #[serde(default)]
    pub log_likelihood_trace: Vec<f64>,
}

/// A fitted model plus the hard labels of its training data.
#[derive(Debug, Clone)]
pub struct ContextFit {
    pub model: ContextModel,
    pub labels: Vec<usize>,
}

fn check_matrix(data: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("number of clusters must be positive"));
    }
    if data.len() < k {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {} samples",
            data.len()
        )));
    }
    let dim = data[0].len();
    if dim == 0 {
        return Err(Error::invalid("environmental matrix has no columns"));
    }
    for row in data {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "environmental matrix".to_string(),
            });
        }
    }
    Ok(dim)
}

/// Sum of squared distances of each sample to the mean of its cluster.
pub fn within_sum_of_squares(data: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = data[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    data.iter()
        .zip(labels)
        .map(|(x, &l)| gmm::sq_dist(x, &means[l]))
        .sum()
}

pub fn explained_variance(data: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let total = within_sum_of_squares(data, &vec![0; data.len()], 1);
    if total <= 0.0 {
        return 0.0;
    }
    (1.0 - within_sum_of_squares(data, labels, k) / total).clamp(0.0, 1.0)
}

pub fn fit_context(data: &[Vec<f64>], variables: &[&str], opts: &ContextOptions) -> Result<ContextFit> {
    let dim = check_matrix(data, opts.k)?;
    if variables.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: variables.len(),
        });
    }
    let k = opts.k;
    let variables: Vec<String> = variables.iter().map(|s| s.to_string()).collect();
    let model = match opts.method {
        ContextMethod::GmmEm => {
            let mix = gmm::fit(
                data,
                k,
                &EmOptions {
                    max_iter: opts.max_iter,
                    tol: opts.tol,
                    covariance: opts.covariance,
                    seed: opts.seed,
                },
            )?;
            ContextModel {
                method: ContextMethod::GmmEm,
                k,
                variables,
                weights: mix.weights,
                means: mix.means,
                covariances: mix.covariances,
                covariance_kind: opts.covariance,
                explained_variance: 0.0,
                log_likelihood_trace: mix.trace,
            }
        }
        ContextMethod::WardHac => {
            let labels = ward::ward_linkage(data)?.cut(k)?;
            let mut means = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (x, &l) in data.iter().zip(&labels) {
                counts[l] += 1;
                for (m, v) in means[l].iter_mut().zip(x) {
                    *m += v;
                }
            }
            for (m, &c) in means.iter_mut().zip(&counts) {
                m.iter_mut().for_each(|v| *v /= c as f64);
            }
            ContextModel {
                method: ContextMethod::WardHac,
                k,
                variables,
                weights: counts.iter().map(|&c| c as f64 / data.len() as f64).collect(),
                means,
                covariances: Vec::new(),
                covariance_kind: opts.covariance,
                explained_variance: 0.0,
                log_likelihood_trace: Vec::new(),
            }
        }
    };
    let labels = model.assign_all(data)?;
    let mut model = model;
    model.explained_variance = explained_variance(data, &labels, k);
    Ok(ContextFit { model, labels })
}

/// Explained variance for every `k` in `1..=max_k`.
pub fn explained_variance_scan(
    data: &[Vec<f64>],
    variables: &[&str],
    max_k: usize,
    opts: &ContextOptions,
) -> Result<Vec<(usize, f64)>> {
    let max_k = max_k.min(data.len());
    match opts.method {
        ContextMethod::WardHac => {
            check_matrix(data, 1)?;
            let tree = ward::ward_linkage(data)?;
            (1..=max_k)
                .map(|k| Ok((k, explained_variance(data, &tree.cut(k)?, k))))
                .collect()
        }
        ContextMethod::GmmEm => (1..=max_k)
            .map(|k| {
                let fit = fit_context(data, variables, &ContextOptions { k, ..opts.clone() })?;
                Ok((k, fit.model.explained_variance))
            })
            .collect(),
    }
}

/// Reusable assignment state; builds the component factorizations once.
pub struct Assigner<'a> {
    model: &'a ContextModel,
    components: Vec<Component>,
}

impl<'a> Assigner<'a> {
    pub fn new(model: &'a ContextModel) -> Result<Self> {
        let components = match model.method {
            ContextMethod::GmmEm => model
                .weights
                .iter()
                .zip(&model.means)
                .zip(&model.covariances)
                .map(|((w, m), c)| Component::new(*w, m, c))
                .collect::<Result<Vec<_>>>()?,
            ContextMethod::WardHac => Vec::new(),
        };
        Ok(Self { model, components })
    }

    /// Cluster of one environmental vector: highest posterior (GMM) or
    /// nearest centroid (Ward); lowest index on ties.
    pub fn assign(&self, sample: &[f64]) -> Result<usize> {
        let dim = self.model.variables.len();
        if sample.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: sample.len(),
            });
        }
        Ok(match self.model.method {
            ContextMethod::WardHac => gmm::nearest(sample, &self.model.means),
            ContextMethod::GmmEm => {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (j, c) in self.components.iter().enumerate() {
                    let v = c.weighted_log_density(sample);
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                best
            }
        })
    }

    /// Posterior responsibilities of each component (GMM only).
    pub fn posterior(&self, sample: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weighted_log_density(sample))
            .collect();
        let lse = gmm::log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }
}

impl ContextModel {
    pub fn assign_all(&self, data: &[Vec<f64>]) -> Result<Vec<usize>> {
        let a = Assigner::new(self)?;
        data.iter().map(|x| a.assign(x)).collect()
    }
}

pub fn assign_context(sample: &[f64], model: &ContextModel) -> Result<usize> {
    Assigner::new(model)?.assign(sample)
}
