//! Training and test phases wired end to end, and the model bundle that
//! carries every trained statistic from one phase to the other.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{fit_context, ContextMethod, ContextModel, ContextOptions, CovarianceKind};
use crate::correction::{
    compute_residuals, fit_correction, rescale_residuals, smooth_residuals, CorrectionModel, ResidualTable,
    SmoothingScope,
};
use crate::detect::{calibrate, decide_distance, DetectionMode, DetectorThresholds, RowVerdict};
use crate::error::{Error, Result, StageContext};
use crate::inject::Signature;
use crate::schema::{DataTable, NormalizationCoefficients, RowKey, Schema, ENVIRONMENTAL};
use crate::som::{distance_to_map, quantization_error, train_som, InitMethod, SomModel, SomParams};

pub const FORMAT_VERSION: &str = "engine-health-bundle/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    pub context_method: ContextMethod,
    pub covariance: CovarianceKind,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub som_rows: usize,
    pub som_cols: usize,
    pub som_epochs: usize,
    pub som_init: InitMethod,
    pub sigma_end: f64,
    pub percentile: f64,
    pub min_local_count: usize,
    pub smoothing_width: usize,
    pub smoothing_scope: SmoothingScope,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ctx = ContextOptions::default();
        let som = SomParams::default();
        Self {
            k: ctx.k,
            context_method: ctx.method,
            covariance: ctx.covariance,
            em_max_iter: ctx.max_iter,
            em_tol: ctx.tol,
            som_rows: 7,
            som_cols: 7,
            som_epochs: som.epochs,
            som_init: som.init,
            sigma_end: som.sigma_end,
            percentile: 99.0,
            min_local_count: 10,
            smoothing_width: 7,
            smoothing_scope: SmoothingScope::Engine,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    fn context_options(&self) -> ContextOptions {
        ContextOptions {
            k: self.k,
            method: self.context_method,
            covariance: self.covariance,
            max_iter: self.em_max_iter,
            tol: self.em_tol,
            seed: self.seed,
        }
    }

    fn som_params(&self) -> SomParams {
        SomParams {
            epochs: self.som_epochs,
            sigma_start: None,
            sigma_end: self.sigma_end,
            init: self.som_init,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub training_rows: usize,
    pub smoothed_rows: usize,
    pub explained_variance: f64,
    pub quantization_error: f64,
    pub global_upper: f64,
    pub local_range: Option<(f64, f64)>,
    pub fallback_units: usize,
}

impl std::fmt::Display for TrainingSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "training rows:        {}", self.training_rows)?;
        writeln!(f, "smoothed residuals:   {}", self.smoothed_rows)?;
        writeln!(f, "explained variance:   {:.4}", self.explained_variance)?;
        writeln!(f, "quantization error:   {:.4}", self.quantization_error)?;
        writeln!(f, "global interval:      [0, {:.4}]", self.global_upper)?;
        match self.local_range {
            Some((lo, hi)) => writeln!(f, "local upper bounds:   {lo:.4} .. {hi:.4}")?,
            None => writeln!(f, "local upper bounds:   none")?,
        }
        write!(f, "units on fallback:    {}", self.fallback_units)
    }
}

/// Everything needed to run the test phase, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: String,
    pub config: PipelineConfig,
    pub schema: Schema,
    pub normalization: NormalizationCoefficients,
    pub context: ContextModel,
    pub correction: CorrectionModel,
    pub som: SomModel,
    pub thresholds: DetectorThresholds,
    pub summary: TrainingSummary,
}

impl ModelBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>");
        if found != FORMAT_VERSION {
            return Err(Error::BundleVersion {
                found: found.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Convert a signature given in residual standard deviations into the
    /// units of the raw table.
    pub fn raw_signature(&self, sig: &Signature) -> Result<Signature> {
        let vars = self.correction.variables();
        sig.scaled(|name| {
            let k = vars.iter().position(|v| *v == name)?;
            Some(self.correction.residual_scale[k] * self.normalization.scale_of(name)?)
        })
    }
}

fn environmental_matrix(table: &DataTable) -> Result<Vec<Vec<f64>>> {
    table.columns(&ENVIRONMENTAL)
}

/// Smoothed, rescaled residuals of a normalized table.
fn residual_features(table: &DataTable, labels: &[usize], correction: &CorrectionModel) -> Result<ResidualTable> {
    let raw = compute_residuals(table, labels, correction).stage("residuals")?;
    let scaled = rescale_residuals(&raw, correction).stage("rescale")?;
    smooth_residuals(&scaled, correction.smoothing_width, correction.smoothing_scope).stage("smoothing")
}

pub fn train_pipeline(train: &DataTable, config: &PipelineConfig) -> Result<ModelBundle> {
    let normalization = NormalizationCoefficients::fit(train).stage("normalization")?;
    let table = normalization.apply(train).stage("normalization")?;

    let env = environmental_matrix(&table).stage("context")?;
    let ctx = fit_context(&env, &ENVIRONMENTAL, &config.context_options()).stage("context")?;
    log::info!(
        "context: {} clusters, explained variance {:.4}",
        ctx.model.k,
        ctx.model.explained_variance
    );

    let mut correction = fit_correction(&table, &ctx.labels, ctx.model.k).stage("correction")?;
    correction.smoothing_width = config.smoothing_width;
    correction.smoothing_scope = config.smoothing_scope;
    let features = residual_features(&table, &ctx.labels, &correction)?;
    if features.is_empty() {
        return Err(Error::invalid("no residuals left after smoothing")).stage("smoothing");
    }
    let samples = features.vectors();

    let som = train_som(&samples, config.som_rows, config.som_cols, &config.som_params()).stage("som")?;
    let distances = samples
        .iter()
        .map(|x| distance_to_map(x, &som))
        .collect::<Result<Vec<_>>>()
        .stage("calibration")?;
    let thresholds = calibrate(&distances, som.units(), config.percentile, config.min_local_count)
        .stage("calibration")?;

    let summary = TrainingSummary {
        training_rows: train.len(),
        smoothed_rows: samples.len(),
        explained_variance: ctx.model.explained_variance,
        quantization_error: quantization_error(&samples, &som)?,
        global_upper: thresholds.global_upper,
        local_range: thresholds.local_range(),
        fallback_units: thresholds.fallback_count(),
    };
    Ok(ModelBundle {
        format_version: FORMAT_VERSION.to_string(),
        config: config.clone(),
        schema: train.schema().clone(),
        normalization,
        context: ctx.model,
        correction,
        som,
        thresholds,
        summary,
    })
}

/// Distance to the map of one smoothed test residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub key: RowKey,
    pub span: (RowKey, RowKey),
    pub distance: f64,
    pub bmu: usize,
}

/// Every test-phase step up to the distance to the map, using only trained
/// statistics from the bundle.
pub fn project(test: &DataTable, bundle: &ModelBundle) -> Result<Vec<Projection>> {
    if test.schema().variables() != bundle.schema.variables() {
        return Err(Error::invalid("test table schema differs from the training schema"));
    }
    let table = bundle.normalization.apply(test).stage("normalization")?;
    let env = environmental_matrix(&table).stage("context")?;
    let labels = bundle.context.assign_all(&env).stage("context")?;
    let features = residual_features(&table, &labels, &bundle.correction)?;
    features
        .rows
        .iter()
        .map(|r| {
            let (distance, bmu) = distance_to_map(&r.values, &bundle.som)?;
            Ok(Projection {
                key: r.key,
                span: r.span,
                distance,
                bmu,
            })
        })
        .collect::<Result<_>>()
        .stage("projection")
}

pub fn verdicts(projections: &[Projection], thresholds: &DetectorThresholds, mode: DetectionMode) -> Vec<RowVerdict> {
    projections
        .iter()
        .map(|p| RowVerdict {
            key: p.key,
            span: p.span,
            verdict: decide_distance(p.distance, p.bmu, thresholds, mode),
        })
        .collect()
}

pub fn test_pipeline(test: &DataTable, bundle: &ModelBundle, mode: DetectionMode) -> Result<Vec<RowVerdict>> {
    Ok(verdicts(&project(test, bundle)?, &bundle.thresholds, mode))
}
