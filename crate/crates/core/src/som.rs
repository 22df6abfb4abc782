//! Batch self-organizing map on a rectangular grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Units whose neighborhood mass falls below this keep their prototype.
const MIN_NEIGHBORHOOD_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Regular grid over the plane of the first two principal components.
    #[default]
    Pca,
    /// Prototypes drawn from the samples.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomParams {
    pub epochs: usize,
    /// Initial Gaussian neighborhood radius; `None` means `max(rows, cols) / 2`.
    pub sigma_start: Option<f64>,
    pub sigma_end: f64,
    pub init: InitMethod,
    pub seed: u64,
}

impl Default for SomParams {
    fn default() -> Self {
        Self {
            epochs: 50,
            sigma_start: None,
            sigma_end: 0.5,
            init: InitMethod::Pca,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomModel {
    pub rows: usize,
    pub cols: usize,
    /// Row-major: unit `r * cols + c`.
    pub prototypes: Vec<Vec<f64>>,
    pub params: SomParams,
}

impl SomModel {
    pub fn new(rows: usize, cols: usize, prototypes: Vec<Vec<f64>>) -> Result<Self> {
        if rows == 0 || cols == 0 || prototypes.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} prototypes do not fill a {rows}x{cols} grid",
                prototypes.len()
            )));
        }
        let dim = prototypes[0].len();
        if let Some(p) = prototypes.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            prototypes,
            params: SomParams::default(),
        })
    }

    pub fn units(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn coords(&self, unit: usize) -> (usize, usize) {
        (unit / self.cols, unit % self.cols)
    }

    /// Squared distance between two units on the grid.
    pub fn grid_dist2(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        let dr = ra as f64 - rb as f64;
        let dc = ca as f64 - cb as f64;
        dr * dr + dc * dc
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Nearest prototype under squared Euclidean distance; lowest index on ties.
fn best_matching(x: &[f64], prototypes: &[Vec<f64>]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (l, m) in prototypes.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.0 {
            best = (d, l);
        }
    }
    best
}

/// Distance to the map: `min_l |x - m_l|^2` and the minimizing unit.
pub fn distance_to_map(x: &[f64], model: &SomModel) -> Result<(f64, usize)> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x.len(),
        });
    }
    Ok(best_matching(x, &model.prototypes))
}

/// Mean distance to the map over `samples`.
pub fn quantization_error(samples: &[Vec<f64>], model: &SomModel) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("quantization error of an empty set"));
    }
    let mut total = 0.0;
    for x in samples {
        total += distance_to_map(x, model)?.0;
    }
    Ok(total / samples.len() as f64)
}

fn validate(samples: &[Vec<f64>]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot train a map on no samples"))?;
    let dim = first.len();
    for x in samples {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "SOM training sample".to_string(),
            });
        }
    }
    Ok(dim)
}

/// Prototypes on a regular grid spanning +-1 standard deviation along the
/// two leading principal axes.
pub fn pca_init(samples: &[Vec<f64>], rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    let dim = validate(samples)?;
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| samples.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for x in samples {
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1.0).max(1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |rank: usize| -> Vec<f64> {
        let Some(&j) = order.get(rank) else {
            return vec![0.0; dim];
        };
        let lambda = eig.eigenvalues[j].max(0.0);
        let v = eig.eigenvectors.column(j);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = (0..dim)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        v.iter().map(|c| sign * c * lambda.sqrt()).collect()
    };
    let (row_axis, col_axis) = if rows >= cols {
        (axis(0), axis(1))
    } else {
        (axis(1), axis(0))
    };
    let span = |i: usize, len: usize| {
        if len == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (len - 1) as f64
        }
    };
    Ok((0..rows * cols)
        .map(|u| {
            let (a, b) = (span(u / cols, rows), span(u % cols, cols));
            (0..dim)
                .map(|j| mean[j] + a * row_axis[j] + b * col_axis[j])
                .collect()
        })
        .collect())
}

fn random_init(samples: &[Vec<f64>], units: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..units)
        .map(|_| samples[rng.random_range(0..samples.len())].clone())
        .collect()
}

/// One batch update. Every prototype becomes the neighborhood-weighted mean
/// of all samples, weights `exp(-grid_dist^2 / (2 sigma^2))` around each
/// sample's best-matching unit. `sigma <= 0` restricts the neighborhood to
/// the BMU itself.
pub fn batch_epoch(model: &SomModel, samples: &[Vec<f64>], sigma: f64) -> SomModel {
    let units = model.units();
    let dim = model.dim();
    let mut sums = vec![vec![0.0; dim]; units];
    let mut counts = vec![0.0f64; units];
    for x in samples {
        let (_, b) = best_matching(x, &model.prototypes);
        counts[b] += 1.0;
        for (s, v) in sums[b].iter_mut().zip(x) {
            *s += v;
        }
    }
    let h = |u: usize, b: usize| -> f64 {
        if sigma <= 0.0 {
            f64::from(u8::from(u == b))
        } else {
            (-model.grid_dist2(u, b) / (2.0 * sigma * sigma)).exp()
        }
    };
    let mut next = model.clone();
    for (u, proto) in next.prototypes.iter_mut().enumerate() {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for b in 0..units {
            if counts[b] == 0.0 {
                continue;
            }
            let w = h(u, b);
            if w == 0.0 {
                continue;
            }
            den += w * counts[b];
            for (acc, s) in num.iter_mut().zip(&sums[b]) {
                *acc += w * s;
            }
        }
        if den >= MIN_NEIGHBORHOOD_MASS {
            *proto = num.into_iter().map(|v| v / den).collect();
        }
    }
    next
}

/// Radius used at `epoch` (0-based): linear from `start` to `end`.
pub fn sigma_at(epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
    if epochs <= 1 {
        return start;
    }
    start + (end - start) * epoch as f64 / (epochs - 1) as f64
}

pub fn initial_map(samples: &[Vec<f64>], rows: usize, cols: usize, params: &SomParams) -> Result<SomModel> {
    validate(samples)?;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("map dimensions must be positive"));
    }
    let prototypes = match params.init {
        InitMethod::Pca => pca_init(samples, rows, cols)?,
        InitMethod::Random => random_init(samples, rows * cols, params.seed),
    };
    let mut model = SomModel::new(rows, cols, prototypes)?;
    model.params = params.clone();
    Ok(model)
}

pub fn train_som(samples: &[Vec<f64>], rows: usize, cols: usize, params: &SomParams) -> Result<SomModel> {
    let mut model = initial_map(samples, rows, cols, params)?;
    if samples.len() < model.units() {
        log::warn!(
            "training a {rows}x{cols} map on only {} samples",
            samples.len()
        );
    }
    let start = params
        .sigma_start
        .unwrap_or(rows.max(cols) as f64 / 2.0);
    for epoch in 0..params.epochs {
        let sigma = sigma_at(epoch, params.epochs, start, params.sigma_end);
        model = batch_epoch(&model, samples, sigma);
    }
    Ok(model)
}
