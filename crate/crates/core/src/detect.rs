//! Percentile confidence intervals on distances to the map, and the
//! healthy/anomaly decision rules built on them.
//!
//! Intervals are `[0, upper]`; the lower limit is always 0 because distances
//! are non-negative. Both limits are inclusive.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::RowKey;
use crate::som::{distance_to_map, SomModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    /// One interval for the whole map.
    #[default]
    Global,
    /// One interval per map unit.
    Local,
}

/// Nearest-rank percentile: the `ceil(p n / 100)`-th smallest value.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty list"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 100]")));
    }
    let n = values.len();
    let rank = ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    let mut buf = values.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub percentile: f64,
    pub min_local_count: usize,
    pub global_upper: f64,
    /// Per-unit upper limit; `None` marks a unit with too few training
    /// samples, which falls back to `global_upper`.
    pub local_upper: Vec<Option<f64>>,
    /// Training samples captured by each unit.
    pub local_counts: Vec<usize>,
}

impl DetectorThresholds {
    pub fn units(&self) -> usize {
        self.local_upper.len()
    }

    pub fn fallback_count(&self) -> usize {
        self.local_upper.iter().filter(|u| u.is_none()).count()
    }

    pub fn local_threshold(&self, unit: usize) -> f64 {
        self.local_upper[unit].unwrap_or(self.global_upper)
    }

    pub fn threshold(&self, mode: DetectionMode, unit: usize) -> f64 {
        match mode {
            DetectionMode::Global => self.global_upper,
            DetectionMode::Local => self.local_threshold(unit),
        }
    }

    /// Resolved local limits with their range, for reporting.
    pub fn local_range(&self) -> Option<(f64, f64)> {
        let resolved: Vec<f64> = self.local_upper.iter().flatten().copied().collect();
        if resolved.is_empty() {
            return None;
        }
        Some((
            resolved.iter().copied().fold(f64::INFINITY, f64::min),
            resolved.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ))
    }
}

/// Calibrate the global interval on all training distances and one interval
/// per unit on the distances it captured.
pub fn calibrate(
    distances: &[(f64, usize)],
    units: usize,
    p: f64,
    min_local_count: usize,
) -> Result<DetectorThresholds> {
    let all: Vec<f64> = distances.iter().map(|d| d.0).collect();
    if all.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::invalid("distances must be non-negative"));
    }
    let global_upper = percentile(&all, p)?;
    let mut per_unit: Vec<Vec<f64>> = vec![Vec::new(); units];
    for &(d, bmu) in distances {
        per_unit
            .get_mut(bmu)
            .ok_or_else(|| Error::invalid(format!("unit {bmu} out of range 0..{units}")))?
            .push(d);
    }
    let local_counts: Vec<usize> = per_unit.iter().map(Vec::len).collect();
    let local_upper = per_unit
        .iter()
        .map(|ds| {
            if ds.len() >= min_local_count.max(1) {
                percentile(ds, p).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let t = DetectorThresholds {
        percentile: p,
        min_local_count,
        global_upper,
        local_upper,
        local_counts,
    };
    log::info!(
        "calibrated global upper {:.4}; {} of {} units fall back to it",
        t.global_upper,
        t.fallback_count(),
        units
    );
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub distance: f64,
    pub bmu: usize,
    pub healthy: bool,
    pub rule: DetectionMode,
    pub threshold_used: f64,
}

/// Apply the decision rule to a known distance.
pub fn decide_distance(distance: f64, bmu: usize, thresholds: &DetectorThresholds, mode: DetectionMode) -> Verdict {
    let threshold_used = thresholds.threshold(mode, bmu);
    Verdict {
        distance,
        bmu,
        healthy: (0.0..=threshold_used).contains(&distance),
        rule: mode,
        threshold_used,
    }
}

pub fn decide(x: &[f64], som: &SomModel, thresholds: &DetectorThresholds, mode: DetectionMode) -> Result<Verdict> {
    if thresholds.units() != som.units() {
        return Err(Error::invalid(format!(
            "thresholds calibrated for {} units, map has {}",
            thresholds.units(),
            som.units()
        )));
    }
    let (d, bmu) = distance_to_map(x, som)?;
    Ok(decide_distance(d, bmu, thresholds, mode))
}

/// A verdict tied to the snapshot it was computed for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowVerdict {
    pub key: RowKey,
    /// Source rows averaged into the smoothed residual.
    pub span: (RowKey, RowKey),
    pub verdict: Verdict,
}

#[derive(Debug, Serialize, Deserialize)]
struct VerdictRecord {
    engine: u32,
    timestamp: i64,
    distance: f64,
    bmu: usize,
    threshold: f64,
    healthy: bool,
    rule: DetectionMode,
    span_start_engine: u32,
    span_start_timestamp: i64,
    span_end_engine: u32,
    span_end_timestamp: i64,
}

pub fn write_verdicts<W: Write>(writer: W, verdicts: &[RowVerdict]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for v in verdicts {
        w.serialize(VerdictRecord {
            engine: v.key.engine_id,
            timestamp: v.key.timestamp,
            distance: v.verdict.distance,
            bmu: v.verdict.bmu,
            threshold: v.verdict.threshold_used,
            healthy: v.verdict.healthy,
            rule: v.verdict.rule,
            span_start_engine: v.span.0.engine_id,
            span_start_timestamp: v.span.0.timestamp,
            span_end_engine: v.span.1.engine_id,
            span_end_timestamp: v.span.1.timestamp,
        })?;
    }
    w.flush().map_err(|e| Error::io("<verdict output>", e))?;
    Ok(())
}

pub fn read_verdicts<R: Read>(reader: R) -> Result<Vec<RowVerdict>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<VerdictRecord>()
        .map(|r| {
            let r = r?;
            Ok(RowVerdict {
                key: RowKey {
                    engine_id: r.engine,
                    timestamp: r.timestamp,
                },
                span: (
                    RowKey {
                        engine_id: r.span_start_engine,
                        timestamp: r.span_start_timestamp,
                    },
                    RowKey {
                        engine_id: r.span_end_engine,
                        timestamp: r.span_end_timestamp,
                    },
                ),
                verdict: Verdict {
                    distance: r.distance,
                    bmu: r.bmu,
                    healthy: r.healthy,
                    rule: r.rule,
                    threshold_used: r.threshold,
                },
            })
        })
        .collect()
}
