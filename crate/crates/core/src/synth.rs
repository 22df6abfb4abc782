//! Synthetic cruise data with known ground truth.
//!
//! Environmental variables come from a Gaussian mixture over flight regimes;
//! operational variables follow the per-regime linear correction structure
//! plus Gaussian noise. Every draw is recorded so downstream stages can be
//! checked against the generator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::correction::{EquationCoefficients, SLOPE_VARIABLES};
use crate::error::{Error, Result};
use crate::schema::{DataTable, Schema, Snapshot, AGE_COLUMN, ENVIRONMENTAL, OPERATIONAL};

/// Seed of the stream that draws the default regression coefficients. Kept
/// separate from the data seed so fresh draws share one true model.
const COEFFICIENT_SEED: u64 = 0x00C0_FFEE;

const DEFAULT_MEANS: [[f64; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [7.0, -2.0, 1.0, 3.0],
    [-5.0, 5.0, 3.0, -2.0],
    [2.0, 6.0, -6.0, 4.0],
    [-3.0, -5.0, -4.0, -6.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_engines: usize,
    pub n_rows: usize,
    pub k_true: usize,
    /// Mixture weights of the regimes; normalized on use.
    pub regime_weights: Vec<f64>,
    /// Per-regime mean over the environmental variables (ALT, Temp3, SP, N1).
    pub context_means: Vec<Vec<f64>>,
    pub context_covariances: Vec<Vec<Vec<f64>>>,
    /// One coefficient set per operational variable.
    pub true_correction: Vec<EquationCoefficients>,
    /// AGE at the first flight of each engine.
    pub engine_base_age: Vec<f64>,
    /// AGE increment per flight.
    pub age_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Default regimes and coefficients for the given sizes.
    pub fn new(n_engines: usize, n_rows: usize, k_true: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(COEFFICIENT_SEED);
        let context_means: Vec<Vec<f64>> = (0..k_true)
            .map(|k| match DEFAULT_MEANS.get(k) {
                Some(m) => m.to_vec(),
                None => (0..4).map(|_| rng.random_range(-10.0..10.0)).collect(),
            })
            .collect();
        let variances = [1.0, 0.8, 0.6, 0.9];
        let cov: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..4)
                    .map(|j| {
                        let rho = match (i.min(j), i.max(j)) {
                            _ if i == j => 1.0,
                            (0, 1) | (2, 3) => 0.3,
                            _ => 0.0,
                        };
                        rho * (variances[i] * variances[j] as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        let engine_base_age = (0..n_engines).map(|_| rng.random_range(0.0..4.0)).collect();
        let true_correction = OPERATIONAL
            .iter()
            .map(|name| EquationCoefficients {
                variable: name.to_string(),
                mu: rng.random_range(-2.0..2.0),
                alpha: (0..n_engines).map(|_| 0.5 * gauss(&mut rng)).collect(),
                beta: (0..k_true).map(|_| gauss(&mut rng)).collect(),
                gamma: (0..SLOPE_VARIABLES.len())
                    .map(|_| (0..k_true).map(|_| rng.random_range(-1.5..1.5)).collect())
                    .collect(),
                gamma5: rng.random_range(-0.5..0.5),
            })
            .collect();
        Self {
            n_engines,
            n_rows,
            k_true,
            regime_weights: vec![1.0; k_true],
            context_means,
            context_covariances: vec![cov; k_true],
            true_correction,
            engine_base_age,
            age_rate: 0.005,
            noise_std: 0.1,
            seed,
        }
    }

    /// 16 engines, 2472 snapshots, five regimes.
    pub fn protocol_scale(seed: u64) -> Self {
        Self::new(16, 2472, 5, seed)
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn with_rows(mut self, n_rows: usize) -> Self {
        self.n_rows = n_rows;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_engines < 2 {
            return Err(Error::invalid("need at least two engines"));
        }
        if self.k_true == 0 || self.n_rows == 0 {
            return Err(Error::invalid("k_true and n_rows must be positive"));
        }
        let k = self.k_true;
        if self.regime_weights.len() != k
            || self.context_means.len() != k
            || self.context_covariances.len() != k
        {
            return Err(Error::invalid("regime parameter count differs from k_true"));
        }
        if self.regime_weights.iter().any(|w| !(*w >= 0.0)) || self.regime_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("regime weights must be non-negative with positive sum"));
        }
        if self.engine_base_age.len() != self.n_engines {
            return Err(Error::invalid("engine_base_age length differs from n_engines"));
        }
        if self.true_correction.len() != OPERATIONAL.len() {
            return Err(Error::invalid("need one coefficient set per operational variable"));
        }
        for c in &self.true_correction {
            if c.alpha.len() != self.n_engines
                || c.beta.len() != k
                || c.gamma.len() != SLOPE_VARIABLES.len()
                || c.gamma.iter().any(|g| g.len() != k)
            {
                return Err(Error::invalid(format!(
                    "coefficient shape mismatch for {}",
                    c.variable
                )));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Everything the generator drew, aligned with the rows of the output table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub engines: Vec<u32>,
    pub regime_labels: Vec<usize>,
    pub coefficients: Vec<EquationCoefficients>,
    /// Noise added to each operational variable, one row per snapshot.
    pub noise: Vec<Vec<f64>>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate(config: &GeneratorConfig) -> Result<(DataTable, GroundTruth)> {
    config.validate()?;
    let chols = config
        .context_covariances
        .iter()
        .enumerate()
        .map(|(k, c)| {
            if c.len() != 4 || c.iter().any(|r| r.len() != 4) {
                return Err(Error::DimensionMismatch {
                    expected: 4,
                    got: c.len(),
                });
            }
            let m = DMatrix::from_fn(4, 4, |i, j| c[i][j]);
            if (&m - m.transpose()).amax() > 1e-12 {
                return Err(Error::NotPositiveDefinite {
                    what: format!("covariance of regime {k} (asymmetric)"),
                });
            }
            m.cholesky()
                .map(|ch| ch.l())
                .ok_or_else(|| Error::NotPositiveDefinite {
                    what: format!("covariance of regime {k}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let total_w: f64 = config.regime_weights.iter().sum();
    let cum: Vec<f64> = config
        .regime_weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total_w;
            Some(*acc)
        })
        .collect();

    // Column positions inside the snapshot value vector.
    let schema = Schema::cruise();
    let op_idx: Vec<usize> = OPERATIONAL
        .iter()
        .map(|n| schema.value_index(n).unwrap())
        .collect();
    let env_idx: Vec<usize> = ENVIRONMENTAL
        .iter()
        .map(|n| schema.value_index(n).unwrap())
        .collect();
    let slope_pos: Vec<usize> = SLOPE_VARIABLES
        .iter()
        .map(|n| ENVIRONMENTAL.iter().position(|e| e == n).unwrap())
        .collect();
    let age_idx = schema.value_index(AGE_COLUMN).unwrap();
    let width = schema.numeric_names().len();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let engines: Vec<u32> = (1..=config.n_engines as u32).collect();
    let mut rows = Vec::with_capacity(config.n_rows);
    let mut labels = Vec::with_capacity(config.n_rows);
    let mut noise_rows = Vec::with_capacity(config.n_rows);

    let per = config.n_rows / config.n_engines;
    let extra = config.n_rows % config.n_engines;
    for (e, &engine_id) in engines.iter().enumerate() {
        let count = per + usize::from(e < extra);
        for t in 0..count {
            let u: f64 = rng.random();
            let k = cum.iter().position(|c| u < *c).unwrap_or(config.k_true - 1);
            let z = DVector::from_fn(4, |_, _| gauss(&mut rng));
            let env = DVector::from_column_slice(&config.context_means[k]) + &chols[k] * z;
            let age = config.engine_base_age[e] + config.age_rate * t as f64;

            let mut values = vec![0.0; width];
            for (j, &col) in env_idx.iter().enumerate() {
                values[col] = env[j];
            }
            values[age_idx] = age;
            let slopes: Vec<f64> = slope_pos.iter().map(|&p| env[p]).collect();
            let mut noise = Vec::with_capacity(OPERATIONAL.len());
            for (coef, &col) in config.true_correction.iter().zip(&op_idx) {
                let eps = config.noise_std * gauss(&mut rng);
                values[col] = coef.predict(e, k, &slopes, age) + eps;
                noise.push(eps);
            }
            rows.push(Snapshot {
                engine_id,
                timestamp: t as i64,
                values,
            });
            labels.push(k);
            noise_rows.push(noise);
        }
    }

    // Rows were produced in (engine, timestamp) order, so the truth stays
    // aligned after the table's own sort.
    let table = DataTable::new(schema, rows)?;
    Ok((
        table,
        GroundTruth {
            engines,
            regime_labels: labels,
            coefficients: config.true_correction.clone(),
            noise: noise_rows,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_rows_equal_linear_predictor() {
        let cfg = GeneratorConfig::new(4, 200, 3, 1).with_noise(0.0);
        let (t, truth) = generate(&cfg).unwrap();
        assert!(truth.noise.iter().flatten().all(|e| *e == 0.0));
        let schema = t.schema();
        let age = schema.value_index("AGE").unwrap();
        for (i, row) in t.rows().iter().enumerate() {
            let e = truth.engines.iter().position(|&x| x == row.engine_id).unwrap();
            let slopes: Vec<f64> = SLOPE_VARIABLES
                .iter()
                .map(|n| row.values[schema.value_index(n).unwrap()])
                .collect();
            for c in &truth.coefficients {
                let y = row.values[schema.value_index(&c.variable).unwrap()];
                let pred = c.predict(e, truth.regime_labels[i], &slopes, row.values[age]);
                assert_eq!(y, pred);
            }
        }
    }

    #[test]
    fn single_regime_labels() {
        let (_, truth) = generate(&GeneratorConfig::new(3, 90, 1, 2)).unwrap();
        assert!(truth.regime_labels.iter().all(|&k| k == 0));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = GeneratorConfig::new(5, 300, 5, 77);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&cfg.clone().with_seed(78)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn age_increases_within_engine() {
        let (t, _) = generate(&GeneratorConfig::new(4, 100, 2, 3)).unwrap();
        let age = t.column("AGE").unwrap();
        for (_, r) in t.engine_ranges() {
            assert!(age[r].windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn rejects_bad_covariance() {
        let mut cfg = GeneratorConfig::new(3, 50, 2, 0);
        cfg.context_covariances[1][0][0] = -1.0;
        assert!(matches!(
            generate(&cfg),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let mut cfg = GeneratorConfig::new(3, 50, 2, 0);
        cfg.n_engines = 1;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn regime_means_within_five_standard_errors() {
        let cfg = GeneratorConfig::new(16, 2000, 5, 11);
        let (t, truth) = generate(&cfg).unwrap();
        let env = t.columns(&ENVIRONMENTAL).unwrap();
        for k in 0..5 {
            let members: Vec<&Vec<f64>> = env
                .iter()
                .zip(&truth.regime_labels)
                .filter(|(_, &l)| l == k)
                .map(|(x, _)| x)
                .collect();
            let n = members.len() as f64;
            assert!(n > 100.0);
            for j in 0..4 {
                let mean = members.iter().map(|x| x[j]).sum::<f64>() / n;
                let se = (cfg.context_covariances[k][j][j] / n).sqrt();
                assert!((mean - cfg.context_means[k][j]).abs() < 5.0 * se);
            }
        }
        assert_eq!(truth.regime_labels.len(), t.len());
    }
}
