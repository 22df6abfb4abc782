//! Environmental correction of the operational variables.
//!
//! Each operational variable `Y` is regressed on
//!
//! ```text
//! Y = mu + alpha[engine] + beta[cluster]
//!       + sum_m gamma[m][cluster] * X_m + gamma5 * AGE + eps
//! ```
//!
//! with `X = (N1, Temp3, SP, ALT)`. The first engine and the first cluster
//! are reference levels (`alpha[0] = beta[0] = 0`). The residuals are the
//! corrected values fed to the SOM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{mean_std, DataTable, RowKey, AGE_COLUMN, OPERATIONAL};

/// Environmental regressors with a per-cluster slope, in coefficient order.
pub const SLOPE_VARIABLES: [&str; 4] = ["N1", "Temp3", "SP", "ALT"];

/// Relative threshold on `|R_jj|` below which a design column is aliased.
const RANK_TOLERANCE: f64 = 1e-9;

/// Residual spread below this, relative to the response, counts as zero.
const EXACT_FIT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationCoefficients {
    pub variable: String,
    pub mu: f64,
    /// Engine effects, indexed like [`CorrectionModel::engines`].
    pub alpha: Vec<f64>,
    /// Cluster effects.
    pub beta: Vec<f64>,
    /// `gamma[m][k]`: slope of `SLOPE_VARIABLES[m]` in cluster `k`.
    pub gamma: Vec<Vec<f64>>,
    pub gamma5: f64,
}

impl EquationCoefficients {
    /// Linear predictor for one observation. `slopes` follows
    /// [`SLOPE_VARIABLES`].
    pub fn predict(&self, engine: usize, cluster: usize, slopes: &[f64], age: f64) -> f64 {
        let mut y = self.mu + self.alpha[engine] + self.beta[cluster];
        for (m, x) in slopes.iter().enumerate() {
            y += self.gamma[m][cluster] * x;
        }
        y + self.gamma5 * age
    }

    /// Re-express with the first engine and cluster as reference levels.
    /// Predictions are unchanged.
    pub fn reference_aligned(&self) -> Self {
        let a0 = self.alpha.first().copied().unwrap_or(0.0);
        let b0 = self.beta.first().copied().unwrap_or(0.0);
        Self {
            variable: self.variable.clone(),
            mu: self.mu + a0 + b0,
            alpha: self.alpha.iter().map(|a| a - a0).collect(),
            beta: self.beta.iter().map(|b| b - b0).collect(),
            gamma: self.gamma.clone(),
            gamma5: self.gamma5,
        }
    }

    /// Flatten in a fixed order: mu, alpha, beta, gamma (row-major), gamma5.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![self.mu];
        out.extend(&self.alpha);
        out.extend(&self.beta);
        out.extend(self.gamma.iter().flatten());
        out.push(self.gamma5);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingScope {
    /// Average within each engine's series only.
    #[default]
    Engine,
    /// Average over the whole sorted table as one series.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionModel {
    /// Engine ids seen at fit time; `engines[0]` is the reference engine.
    pub engines: Vec<u32>,
    pub n_clusters: usize,
    pub slope_variables: Vec<String>,
    pub age_variable: String,
    /// One entry per operational variable.
    pub coefficients: Vec<EquationCoefficients>,
    /// Sample standard deviation of the training residuals per variable.
    pub residual_scale: Vec<f64>,
    pub smoothing_width: usize,
    #[serde(default)]
    pub smoothing_scope: SmoothingScope,
}

impl CorrectionModel {
    pub fn variables(&self) -> Vec<&str> {
        self.coefficients.iter().map(|c| c.variable.as_str()).collect()
    }

    fn engine_position(&self, engine: u32) -> Result<usize> {
        self.engines
            .binary_search(&engine)
            .map_err(|_| Error::UnseenEngine { engine })
    }
}

/// Coefficients plus their OLS standard errors, in the same layout.
#[derive(Debug, Clone)]
pub struct CorrectionFit {
    pub model: CorrectionModel,
    /// Standard error of every coefficient; reference levels carry 0.
    pub std_errors: Vec<EquationCoefficients>,
    /// Residual variance estimate `RSS / (n - p)` per variable.
    pub sigma2: Vec<f64>,
    pub column_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualStage {
    Raw,
    Rescaled,
    Smoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub key: RowKey,
    /// First and last source rows averaged into this row.
    pub span: (RowKey, RowKey),
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTable {
    pub variables: Vec<String>,
    pub stage: ResidualStage,
    pub rows: Vec<ResidualRow>,
}

impl ResidualTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.values.clone()).collect()
    }
}

/// Resolved column positions of the regressors inside a table.
struct Regressors {
    operational: Vec<usize>,
    slopes: Vec<usize>,
    age: usize,
}

impl Regressors {
    fn resolve(table: &DataTable, operational: &[&str]) -> Result<Self> {
        let idx = |n: &str| {
            table
                .schema()
                .value_index(n)
                .ok_or_else(|| Error::MissingColumn {
                    column: n.to_string(),
                })
        };
        Ok(Self {
            operational: operational.iter().map(|n| idx(n)).collect::<Result<_>>()?,
            slopes: SLOPE_VARIABLES.iter().map(|n| idx(n)).collect::<Result<_>>()?,
            age: idx(AGE_COLUMN)?,
        })
    }
}

struct DesignLayout {
    n_engines: usize,
    n_clusters: usize,
}

impl DesignLayout {
    fn width(&self) -> usize {
        1 + (self.n_engines - 1) + (self.n_clusters - 1) + SLOPE_VARIABLES.len() * self.n_clusters + 1
    }

    fn row(&self, engine: usize, cluster: usize, slopes: &[f64], age: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.width()];
        x[0] = 1.0;
        if engine > 0 {
            x[engine] = 1.0;
        }
        let cluster_base = self.n_engines;
        if cluster > 0 {
            x[cluster_base + cluster - 1] = 1.0;
        }
        let slope_base = cluster_base + self.n_clusters - 1;
        for (m, v) in slopes.iter().enumerate() {
            x[slope_base + m * self.n_clusters + cluster] = *v;
        }
        let last = x.len() - 1;
        x[last] = age;
        x
    }

    fn column_names(&self, engines: &[u32]) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        names.extend(engines[1..].iter().map(|e| format!("engine[{e}]")));
        names.extend((1..self.n_clusters).map(|k| format!("cluster[{k}]")));
        for v in SLOPE_VARIABLES {
            names.extend((0..self.n_clusters).map(|k| format!("{v}:cluster[{k}]")));
        }
        names.push(AGE_COLUMN.to_string());
        names
    }

    fn unpack(&self, variable: &str, b: &[f64]) -> EquationCoefficients {
        let (r, k) = (self.n_engines, self.n_clusters);
        let mut alpha = vec![0.0];
        alpha.extend(&b[1..r]);
        let mut beta = vec![0.0];
        beta.extend(&b[r..r + k - 1]);
        let slope_base = r + k - 1;
        let gamma = (0..SLOPE_VARIABLES.len())
            .map(|m| b[slope_base + m * k..slope_base + (m + 1) * k].to_vec())
            .collect();
        EquationCoefficients {
            variable: variable.to_string(),
            mu: b[0],
            alpha,
            beta,
            gamma,
            gamma5: b[b.len() - 1],
        }
    }
}

/// Fit the correction model on the six default operational variables.
pub fn fit_correction(
    table: &DataTable,
    cluster_labels: &[usize],
    n_clusters: usize,
) -> Result<CorrectionModel> {
    fit_correction_with_stats(table, cluster_labels, n_clusters).map(|f| f.model)
}

/// Least-squares fit via Householder QR of the shared design matrix, one
/// right-hand side per operational variable.
pub fn fit_correction_with_stats(
    table: &DataTable,
    cluster_labels: &[usize],
    n_clusters: usize,
) -> Result<CorrectionFit> {
    let operational: Vec<&str> = OPERATIONAL.to_vec();
    if cluster_labels.len() != table.len() {
        return Err(Error::DimensionMismatch {
            expected: table.len(),
            got: cluster_labels.len(),
        });
    }
    if n_clusters == 0 {
        return Err(Error::invalid("n_clusters must be positive"));
    }
    let mut counts = vec![0usize; n_clusters];
    for &k in cluster_labels {
        if k >= n_clusters {
            return Err(Error::invalid(format!(
                "cluster label {k} out of range 0..{n_clusters}"
            )));
        }
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCluster { cluster: k });
    }

    let reg = Regressors::resolve(table, &operational)?;
    let engines = table.engines();
    let layout = DesignLayout {
        n_engines: engines.len(),
        n_clusters,
    };
    let n = table.len();
    let p = layout.width();
    let names = layout.column_names(&engines);
    if n <= p {
        return Err(Error::invalid(format!(
            "{n} rows cannot identify {p} coefficients"
        )));
    }

    let mut x = nalgebra::DMatrix::<f64>::zeros(n, p);
    let mut y = nalgebra::DMatrix::<f64>::zeros(n, operational.len());
    let mut engine_pos = 0;
    for (i, row) in table.rows().iter().enumerate() {
        while engines[engine_pos] != row.engine_id {
            engine_pos += 1;
        }
        let slopes: Vec<f64> = reg.slopes.iter().map(|&j| row.values[j]).collect();
        let design = layout.row(engine_pos, cluster_labels[i], &slopes, row.values[reg.age]);
        for (j, v) in design.into_iter().enumerate() {
            x[(i, j)] = v;
        }
        for (v, &j) in reg.operational.iter().enumerate() {
            y[(i, v)] = row.values[j];
        }
    }

    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let aliased: Vec<String> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= RANK_TOLERANCE * max_diag)
        .map(|j| names[j].clone())
        .collect();
    if !aliased.is_empty() {
        return Err(Error::RankDeficient { columns: aliased });
    }

    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let top = qty.rows(0, p).into_owned();
    let beta = r
        .solve_upper_triangular(&top)
        .ok_or_else(|| Error::RankDeficient { columns: names.clone() })?;

    // diag((R^T R)^-1) = row sums of squares of R^-1.
    let r_inv = r
        .solve_upper_triangular(&nalgebra::DMatrix::identity(p, p))
        .ok_or_else(|| Error::RankDeficient { columns: names.clone() })?;
    let unscaled_var: Vec<f64> = (0..p).map(|j| r_inv.row(j).norm_squared()).collect();

    let fitted = &x * &beta;
    let mut coefficients = Vec::new();
    let mut std_errors = Vec::new();
    let mut residual_scale = Vec::new();
    let mut sigma2 = Vec::new();
    for (v, name) in operational.iter().enumerate() {
        let b: Vec<f64> = beta.column(v).iter().copied().collect();
        coefficients.push(layout.unpack(name, &b));
        let resid: Vec<f64> = (0..n).map(|i| y[(i, v)] - fitted[(i, v)]).collect();
        let rss: f64 = resid.iter().map(|e| e * e).sum();
        let s2 = rss / (n - p) as f64;
        let se: Vec<f64> = unscaled_var.iter().map(|u| (u * s2).sqrt()).collect();
        std_errors.push(layout.unpack(name, &se));
        // An exact fit leaves only rounding noise; record it as zero.
        let (y_mean, y_std) = mean_std(&y.column(v).iter().copied().collect::<Vec<_>>());
        let scale = mean_std(&resid).1;
        let floor = EXACT_FIT_TOLERANCE * (y_mean.abs() + y_std).max(1.0);
        residual_scale.push(if scale > floor { scale } else { 0.0 });
        sigma2.push(s2);
    }

    Ok(CorrectionFit {
        model: CorrectionModel {
            engines,
            n_clusters,
            slope_variables: SLOPE_VARIABLES.iter().map(|s| s.to_string()).collect(),
            age_variable: AGE_COLUMN.to_string(),
            coefficients,
            residual_scale,
            smoothing_width: 7,
            smoothing_scope: SmoothingScope::Engine,
        },
        std_errors,
        sigma2,
        column_names: names,
    })
}

/// Linear predictor of every operational variable for each row.
pub fn predict(table: &DataTable, labels: &[usize], model: &CorrectionModel) -> Result<Vec<Vec<f64>>> {
    if labels.len() != table.len() {
        return Err(Error::DimensionMismatch {
            expected: table.len(),
            got: labels.len(),
        });
    }
    let reg = Regressors::resolve(table, &model.variables())?;
    table
        .rows()
        .iter()
        .zip(labels)
        .map(|(row, &k)| {
            if k >= model.n_clusters {
                return Err(Error::invalid(format!(
                    "cluster label {k} out of range 0..{}",
                    model.n_clusters
                )));
            }
            let e = model.engine_position(row.engine_id)?;
            let slopes: Vec<f64> = reg.slopes.iter().map(|&j| row.values[j]).collect();
            let age = row.values[reg.age];
            Ok(model
                .coefficients
                .iter()
                .map(|c| c.predict(e, k, &slopes, age))
                .collect())
        })
        .collect()
}

/// Observed minus predicted, per operational variable.
pub fn compute_residuals(
    table: &DataTable,
    labels: &[usize],
    model: &CorrectionModel,
) -> Result<ResidualTable> {
    let preds = predict(table, labels, model)?;
    let reg = Regressors::resolve(table, &model.variables())?;
    let rows = table
        .rows()
        .iter()
        .zip(preds)
        .map(|(row, pred)| ResidualRow {
            key: row.key(),
            span: (row.key(), row.key()),
            values: reg
                .operational
                .iter()
                .zip(&pred)
                .map(|(&j, p)| row.values[j] - p)
                .collect(),
        })
        .collect();
    Ok(ResidualTable {
        variables: model.variables().iter().map(|s| s.to_string()).collect(),
        stage: ResidualStage::Raw,
        rows,
    })
}

/// Divide each variable by the training residual scale stored in `model`.
pub fn rescale_residuals(rt: &ResidualTable, model: &CorrectionModel) -> Result<ResidualTable> {
    if rt.variables.len() != model.residual_scale.len() {
        return Err(Error::DimensionMismatch {
            expected: model.residual_scale.len(),
            got: rt.variables.len(),
        });
    }
    if let Some(v) = model.residual_scale.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::ZeroResidualScale {
            variable: rt.variables[v].clone(),
        });
    }
    let mut out = rt.clone();
    for row in &mut out.rows {
        for (x, s) in row.values.iter_mut().zip(&model.residual_scale) {
            *x /= s;
        }
    }
    out.stage = ResidualStage::Rescaled;
    Ok(out)
}

/// Centered moving average of odd width `w`. Each series loses `w / 2` rows
/// at both ends; series shorter than `w` are dropped entirely.
pub fn smooth_residuals(rt: &ResidualTable, w: usize, scope: SmoothingScope) -> Result<ResidualTable> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::invalid(format!(
            "smoothing width must be odd and positive, got {w}"
        )));
    }
    let series = match scope {
        SmoothingScope::Engine => crate::schema::engine_ranges(rt.rows.iter().map(|r| r.key.engine_id)),
        SmoothingScope::Global => vec![(0, 0..rt.rows.len())],
    };
    let half = w / 2;
    let dim = rt.variables.len();
    let mut rows = Vec::with_capacity(rt.rows.len());
    for (engine, range) in series {
        let src = &rt.rows[range];
        if src.len() < w {
            if !src.is_empty() {
                log::warn!(
                    "series of engine {engine} has {} rows, fewer than the smoothing width {w}; dropped",
                    src.len()
                );
            }
            continue;
        }
        for c in half..src.len() - half {
            let window = &src[c - half..=c + half];
            let mut acc = vec![0.0; dim];
            for r in window {
                for (a, v) in acc.iter_mut().zip(&r.values) {
                    *a += v;
                }
            }
            rows.push(ResidualRow {
                key: src[c].key,
                span: (window[0].span.0, window[w - 1].span.1),
                values: acc.into_iter().map(|a| a / w as f64).collect(),
            });
        }
    }
    Ok(ResidualTable {
        variables: rt.variables.clone(),
        stage: ResidualStage::Smoothed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Schema, Snapshot};
    use crate::synth::{generate, GeneratorConfig};

    fn residual_table(series: &[(u32, Vec<f64>)]) -> ResidualTable {
        let mut rows = Vec::new();
        for (engine, vals) in series {
            for (t, v) in vals.iter().enumerate() {
                let key = RowKey {
                    engine_id: *engine,
                    timestamp: t as i64,
                };
                rows.push(ResidualRow {
                    key,
                    span: (key, key),
                    values: vec![*v, -2.0 * v],
                });
            }
        }
        ResidualTable {
            variables: vec!["a".into(), "b".into()],
            stage: ResidualStage::Raw,
            rows,
        }
    }

    #[test]
    fn smoothing_counts() {
        let rt = residual_table(&[(1, (0..2000).map(|i| i as f64).collect())]);
        assert_eq!(smooth_residuals(&rt, 7, SmoothingScope::Engine).unwrap().len(), 1994);
        let rt = residual_table(&[(1, vec![0.0; 472])]);
        assert_eq!(smooth_residuals(&rt, 7, SmoothingScope::Engine).unwrap().len(), 466);

        let rt = residual_table(&[(1, vec![1.0; 10]), (2, vec![1.0; 5]), (3, vec![1.0; 7])]);
        let s = smooth_residuals(&rt, 7, SmoothingScope::Engine).unwrap();
        assert_eq!(s.len(), 4 + 1);
        assert!(s.rows.iter().all(|r| r.key.engine_id != 2));
        let g = smooth_residuals(&rt, 7, SmoothingScope::Global).unwrap();
        assert_eq!(g.len(), 22 - 6);
        assert_eq!(g.rows[0].span.0.engine_id, 1);
    }

    #[test]
    fn smoothing_width_one_is_identity() {
        let rt = residual_table(&[(1, vec![3.0, 1.0, 4.0]), (2, vec![1.0, 5.0])]);
        let s = smooth_residuals(&rt, 1, SmoothingScope::Engine).unwrap();
        assert_eq!(s.rows, rt.rows);
        assert!(smooth_residuals(&rt, 4, SmoothingScope::Engine).is_err());
        assert!(smooth_residuals(&rt, 0, SmoothingScope::Engine).is_err());
    }

    #[test]
    fn smoothing_constant_and_window_oracle() {
        let rt = residual_table(&[(1, vec![2.5; 20])]);
        let s = smooth_residuals(&rt, 7, SmoothingScope::Engine).unwrap();
        assert!(s.rows.iter().all(|r| r.values == vec![2.5, -5.0]));

        let vals: Vec<f64> = (0..50).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.37).collect();
        let rt = residual_table(&[(4, vals.clone())]);
        let s = smooth_residuals(&rt, 5, SmoothingScope::Engine).unwrap();
        for (i, row) in s.rows.iter().enumerate() {
            let c = i + 2;
            let oracle: f64 = (c - 2..=c + 2).map(|j| vals[j]).sum::<f64>() / 5.0;
            assert!((row.values[0] - oracle).abs() < 1e-12);
            assert_eq!(row.key.timestamp, c as i64);
            assert_eq!(row.span.0.timestamp, c as i64 - 2);
            assert_eq!(row.span.1.timestamp, c as i64 + 2);
        }
    }

    #[test]
    fn smoothing_is_linear() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 1.3).cos()).collect();
        let (a, b) = (1.7, -0.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let sx = smooth_residuals(&residual_table(&[(1, x)]), 7, SmoothingScope::Engine).unwrap();
        let sy = smooth_residuals(&residual_table(&[(1, y)]), 7, SmoothingScope::Engine).unwrap();
        let sc = smooth_residuals(&residual_table(&[(1, combo)]), 7, SmoothingScope::Engine).unwrap();
        for ((rx, ry), rc) in sx.rows.iter().zip(&sy.rows).zip(&sc.rows) {
            assert!((a * rx.values[0] + b * ry.values[0] - rc.values[0]).abs() < 1e-12);
        }
    }

    fn fixture(noise: f64, seed: u64) -> (DataTable, Vec<usize>, crate::synth::GroundTruth) {
        let (t, truth) = generate(&GeneratorConfig::new(6, 600, 3, seed).with_noise(noise)).unwrap();
        let labels = truth.regime_labels.clone();
        (t, labels, truth)
    }

    #[test]
    fn noiseless_recovery() {
        let (t, labels, truth) = fixture(0.0, 5);
        let model = fit_correction(&t, &labels, 3).unwrap();
        for (fit, tru) in model.coefficients.iter().zip(&truth.coefficients) {
            let tru = tru.reference_aligned();
            for (a, b) in fit.flatten().iter().zip(tru.flatten()) {
                assert!((a - b).abs() < 1e-6, "{} {a} vs {b}", fit.variable);
            }
        }
        let res = compute_residuals(&t, &labels, &model).unwrap();
        assert!(res.rows.iter().flat_map(|r| &r.values).all(|e| e.abs() < 1e-8));
    }

    #[test]
    fn constant_response_gives_zero_effects() {
        let (t, labels, _) = fixture(0.1, 6);
        let schema = t.schema().clone();
        let ops: Vec<usize> = OPERATIONAL.iter().map(|n| schema.value_index(n).unwrap()).collect();
        let rows = t
            .rows()
            .iter()
            .map(|r| {
                let mut values = r.values.clone();
                for &j in &ops {
                    values[j] = 3.25;
                }
                Snapshot { values, ..r.clone() }
            })
            .collect();
        let t = DataTable::new(schema, rows).unwrap();
        let model = fit_correction(&t, &labels, 3).unwrap();
        for c in &model.coefficients {
            assert!((c.mu - 3.25).abs() < 1e-8);
            assert!(c.flatten()[1..].iter().all(|v| v.abs() < 1e-8));
        }
        let res = compute_residuals(&t, &labels, &model).unwrap();
        assert!(res.rows.iter().flat_map(|r| &r.values).all(|e| e.abs() < 1e-8));
        assert!(matches!(
            rescale_residuals(&res, &model),
            Err(Error::ZeroResidualScale { .. })
        ));
    }

    #[test]
    fn residuals_are_orthogonal_and_centered() {
        let (t, labels, _) = fixture(0.2, 7);
        let model = fit_correction(&t, &labels, 3).unwrap();
        let res = compute_residuals(&t, &labels, &model).unwrap();
        let engines = t.engines();
        for v in 0..6 {
            let col: Vec<f64> = res.rows.iter().map(|r| r.values[v]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-10);
            for &e in &engines {
                let sum: f64 = res
                    .rows
                    .iter()
                    .filter(|r| r.key.engine_id == e)
                    .map(|r| r.values[v])
                    .sum();
                assert!(sum.abs() < 1e-8);
            }
            for k in 0..3 {
                let sum: f64 = col.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(e, _)| e).sum();
                assert!(sum.abs() < 1e-8);
                // Slope columns: X_m within cluster k.
                for name in SLOPE_VARIABLES {
                    let x = t.column(name).unwrap();
                    let dot: f64 = (0..col.len()).filter(|&i| labels[i] == k).map(|i| x[i] * col[i]).sum();
                    let scale: f64 = x.iter().map(|v| v.abs()).sum::<f64>();
                    assert!((dot / scale).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn rescale_uses_model_scale() {
        let (t, labels, _) = fixture(0.2, 8);
        let model = fit_correction(&t, &labels, 3).unwrap();
        let res = rescale_residuals(&compute_residuals(&t, &labels, &model).unwrap(), &model).unwrap();
        for v in 0..6 {
            let col: Vec<f64> = res.rows.iter().map(|r| r.values[v]).collect();
            assert!((mean_std(&col).1 - 1.0).abs() < 1e-9);
        }
        // Inflated test noise keeps its larger spread after rescaling.
        let (t2, labels2, _) = {
            let mut cfg = GeneratorConfig::new(6, 600, 3, 9).with_noise(0.6);
            cfg.seed = 9;
            let (t, truth) = generate(&cfg).unwrap();
            (t, truth.regime_labels.clone(), truth)
        };
        let res2 = rescale_residuals(&compute_residuals(&t2, &labels2, &model).unwrap(), &model).unwrap();
        let col: Vec<f64> = res2.rows.iter().map(|r| r.values[0]).collect();
        assert!(mean_std(&col).1 > 2.0);

        let zero = ResidualTable {
            rows: res.rows.iter().map(|r| ResidualRow { values: vec![0.0; 6], ..r.clone() }).collect(),
            ..res.clone()
        };
        let z = rescale_residuals(&zero, &model).unwrap();
        assert!(z.rows.iter().flat_map(|r| &r.values).all(|v| *v == 0.0));
    }

    #[test]
    fn reference_coding_does_not_change_predictions() {
        let (t, labels, truth) = fixture(0.0, 10);
        let model = fit_correction(&t, &labels, 3).unwrap();
        let mut shifted = model.clone();
        shifted.coefficients = truth.coefficients.clone();
        let p1 = predict(&t, &labels, &model).unwrap();
        let p2 = predict(&t, &labels, &shifted).unwrap();
        for (a, b) in p1.iter().flatten().zip(p2.iter().flatten()) {
            assert!((a - b).abs() < 1e-8);
        }
        let aligned: Vec<_> = truth.coefficients.iter().map(|c| c.reference_aligned()).collect();
        shifted.coefficients = aligned;
        let p3 = predict(&t, &labels, &shifted).unwrap();
        for (a, b) in p2.iter().flatten().zip(p3.iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn residual_plus_prediction_restores_observation() {
        let (t, labels, _) = fixture(0.3, 12);
        let model = fit_correction(&t, &labels, 3).unwrap();
        let pred = predict(&t, &labels, &model).unwrap();
        let res = compute_residuals(&t, &labels, &model).unwrap();
        let ops: Vec<usize> = OPERATIONAL.iter().map(|n| t.schema().value_index(n).unwrap()).collect();
        for ((row, p), r) in t.rows().iter().zip(&pred).zip(&res.rows) {
            for (v, &j) in ops.iter().enumerate() {
                let y = row.values[j];
                assert!((r.values[v] + p[v] - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn errors() {
        let (t, labels, _) = fixture(0.1, 13);
        // Cluster 2 declared but never used.
        let collapsed: Vec<usize> = labels.iter().map(|&k| k.min(1)).collect();
        assert!(matches!(
            fit_correction(&t, &collapsed, 3),
            Err(Error::EmptyCluster { cluster: 2 })
        ));

        // AGE duplicated into N1 makes N1:cluster columns alias AGE only if
        // constant per cluster; use an exact copy of SP instead.
        let schema = t.schema().clone();
        let (n1, sp) = (schema.value_index("N1").unwrap(), schema.value_index("SP").unwrap());
        let rows = t
            .rows()
            .iter()
            .map(|r| {
                let mut values = r.values.clone();
                values[n1] = 2.0 * values[sp];
                Snapshot { values, ..r.clone() }
            })
            .collect();
        let aliased = DataTable::new(schema, rows).unwrap();
        match fit_correction(&aliased, &labels, 3) {
            Err(Error::RankDeficient { columns }) => {
                assert!(columns.iter().all(|c| c.starts_with("SP:")), "{columns:?}");
                assert_eq!(columns.len(), 3);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }

        let model = fit_correction(&t, &labels, 3).unwrap();
        let mut stranger = t.rows().to_vec();
        stranger[0].engine_id = 99;
        let t2 = DataTable::new(Schema::cruise(), stranger).unwrap();
        assert!(matches!(
            compute_residuals(&t2, &labels, &model),
            Err(Error::UnseenEngine { engine: 99 })
        ));
    }
}
