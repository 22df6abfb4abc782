//! Detection rate and false-alarm rate against injection ground truth.
//!
//! `pfa` is the share of detections that hit healthy rows, not the usual
//! false-positive rate: its denominator is the number of detections.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detect::RowVerdict;
use crate::error::{Error, Result};
use crate::inject::InjectionRecord;
use crate::schema::RowKey;

/// How a smoothed row is matched to injected source rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthLabeling {
    /// Anomalous if its averaging window contains any injected row.
    #[default]
    Overlap,
    /// Anomalous if the row it is centered on was injected.
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub anomalous_rows: usize,
    pub detections: usize,
    pub true_detections: usize,
    /// Detections on healthy rows.
    pub false_detections: usize,
    pub tpr: f64,
    pub pfa: f64,
}

impl DetectionScore {
    pub fn from_counts(anomalous_rows: usize, true_detections: usize, false_detections: usize) -> Self {
        let detections = true_detections + false_detections;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            anomalous_rows,
            detections,
            true_detections,
            false_detections,
            tpr: ratio(true_detections, anomalous_rows),
            pfa: ratio(false_detections, detections),
        }
    }

    fn merge(scores: impl Iterator<Item = Self>) -> Self {
        let (a, t, f) = scores.fold((0, 0, 0), |(a, t, f), s| {
            (a + s.anomalous_rows, t + s.true_detections, f + s.false_detections)
        });
        Self::from_counts(a, t, f)
    }
}

fn injected_keys(records: &[InjectionRecord]) -> Vec<RowKey> {
    let mut keys: Vec<RowKey> = records
        .iter()
        .flat_map(|r| {
            r.timestamps.iter().map(|&t| RowKey {
                engine_id: r.engine_id,
                timestamp: t,
            })
        })
        .collect();
    keys.sort_unstable();
    keys
}

fn is_anomalous(v: &RowVerdict, injected: &[RowKey], labeling: TruthLabeling) -> bool {
    match labeling {
        TruthLabeling::Center => injected.binary_search(&v.key).is_ok(),
        TruthLabeling::Overlap => {
            let i = injected.partition_point(|k| *k < v.span.0);
            injected.get(i).is_some_and(|k| *k <= v.span.1)
        }
    }
}

/// Ground-truth label of every verdict row.
pub fn truth_labels(verdicts: &[RowVerdict], records: &[InjectionRecord], labeling: TruthLabeling) -> Result<Vec<bool>> {
    let mut seen = HashSet::with_capacity(verdicts.len());
    for v in verdicts {
        if !seen.insert(v.key) {
            return Err(Error::invalid(format!(
                "duplicate verdict for engine {} at timestamp {}",
                v.key.engine_id, v.key.timestamp
            )));
        }
    }
    let injected = injected_keys(records);
    let labels: Vec<bool> = verdicts
        .iter()
        .map(|v| is_anomalous(v, &injected, labeling))
        .collect();
    for r in records {
        let own = injected_keys(std::slice::from_ref(r));
        if !verdicts.iter().any(|v| is_anomalous(v, &own, labeling)) {
            return Err(Error::Misaligned {
                record: r.signature.clone(),
            });
        }
    }
    Ok(labels)
}

pub fn score(verdicts: &[RowVerdict], records: &[InjectionRecord], labeling: TruthLabeling) -> Result<DetectionScore> {
    let labels = truth_labels(verdicts, records, labeling)?;
    let (mut anomalous, mut hit, mut false_alarm) = (0, 0, 0);
    for (v, &bad) in verdicts.iter().zip(&labels) {
        anomalous += bad as usize;
        if !v.verdict.healthy {
            if bad {
                hit += 1;
            } else {
                false_alarm += 1;
            }
        }
    }
    Ok(DetectionScore::from_counts(anomalous, hit, false_alarm))
}

/// Verdicts of one injected defect under the global and optionally the
/// local rule.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub record: InjectionRecord,
    pub global: Vec<RowVerdict>,
    pub local: Option<Vec<RowVerdict>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectScore {
    pub defect: String,
    pub global: DetectionScore,
    pub local: Option<DetectionScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labeling: TruthLabeling,
    pub defects: Vec<DefectScore>,
    pub overall_global: DetectionScore,
    pub overall_local: Option<DetectionScore>,
}

pub fn evaluate(cases: &[EvalCase], labeling: TruthLabeling) -> Result<EvalReport> {
    let defects = cases
        .iter()
        .map(|c| {
            let rec = std::slice::from_ref(&c.record);
            Ok(DefectScore {
                defect: c.record.signature.clone(),
                global: score(&c.global, rec, labeling)?,
                local: c.local.as_ref().map(|l| score(l, rec, labeling)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let overall_global = DetectionScore::merge(defects.iter().map(|d| d.global));
    let overall_local = if !defects.is_empty() && defects.iter().all(|d| d.local.is_some()) {
        Some(DetectionScore::merge(defects.iter().filter_map(|d| d.local)))
    } else {
        None
    };
    Ok(EvalReport {
        labeling,
        defects,
        overall_global,
        overall_local,
    })
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "defect",
            "anomalous_rows",
            "global_detections",
            "global_false_detections",
            "global_tpr",
            "global_pfa",
            "local_detections",
            "local_false_detections",
            "local_tpr",
            "local_pfa",
        ])?;
        let rows = self
            .defects
            .iter()
            .map(|d| (d.defect.as_str(), d.global, d.local))
            .chain(std::iter::once(("overall", self.overall_global, self.overall_local)));
        for (name, g, l) in rows {
            let local = match l {
                Some(l) => [
                    l.detections.to_string(),
                    l.false_detections.to_string(),
                    format!("{:?}", l.tpr),
                    format!("{:?}", l.pfa),
                ],
                None => Default::default(),
            };
            let mut rec = vec![
                name.to_string(),
                g.anomalous_rows.to_string(),
                g.detections.to_string(),
                g.false_detections.to_string(),
                format!("{:?}", g.tpr),
                format!("{:?}", g.pfa),
            ];
            rec.extend(local);
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<report output>", e))?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let pct = |x: f64| format!("{:.1}%", 100.0 * x);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>9} | {:>8} {:>8} | {:>8} {:>8}",
            "", "anomalies", "tpr", "pfa", "tpr", "pfa"
        );
        let _ = writeln!(out, "{:<12} {:>9} | {:^17} | {:^17}", "", "", "global", "local");
        let rows = self
            .defects
            .iter()
            .map(|d| (d.defect.as_str(), d.global, d.local))
            .chain(std::iter::once(("overall", self.overall_global, self.overall_local)));
        for (name, g, l) in rows {
            let (lt, lp) = l.map_or(("-".into(), "-".into()), |l| (pct(l.tpr), pct(l.pfa)));
            let _ = writeln!(
                out,
                "{:<12} {:>9} | {:>8} {:>8} | {:>8} {:>8}",
                name,
                g.anomalous_rows,
                pct(g.tpr),
                pct(g.pfa),
                lt,
                lp
            );
        }
        out
    }
}
