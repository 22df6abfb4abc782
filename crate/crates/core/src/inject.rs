//! Defect signatures and their injection into healthy data.
//!
//! A signature is a per-variable offset added to the operational values of a
//! run of consecutive snapshots of one engine.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{DataTable, VariableRole, OPERATIONAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub name: String,
    pub offsets: BTreeMap<String, f64>,
}

impl Signature {
    pub fn new(name: impl Into<String>, offsets: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let sig = Self {
            name: name.into(),
            offsets: offsets.into_iter().collect(),
        };
        sig.validate()?;
        Ok(sig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() || self.offsets.values().all(|v| *v == 0.0) {
            return Err(Error::invalid(format!(
                "signature \"{}\" has no nonzero offset",
                self.name
            )));
        }
        if self.offsets.len() > OPERATIONAL.len() {
            return Err(Error::invalid(format!(
                "signature \"{}\" has {} offsets, at most {} allowed",
                self.name,
                self.offsets.len(),
                OPERATIONAL.len()
            )));
        }
        if let Some(v) = self.offsets.values().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "signature \"{}\" has non-finite offset {v}",
                self.name
            )));
        }
        Ok(())
    }

    /// Multiply each offset by the scale of its variable, e.g. to turn
    /// offsets in residual standard deviations into table units.
    pub fn scaled(&self, scale: impl Fn(&str) -> Option<f64>) -> Result<Self> {
        let offsets = self
            .offsets
            .iter()
            .map(|(k, v)| {
                scale(k)
                    .map(|s| (k.clone(), v * s))
                    .ok_or_else(|| Error::MissingColumn { column: k.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Signature::new(self.name.clone(), offsets)
    }

    /// Largest absolute offset.
    pub fn amplitude(&self) -> f64 {
        self.offsets.values().fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectProfile {
    /// Full offset on every row of the window.
    #[default]
    Step,
    /// Offset grows linearly, reaching the full value on the last row.
    Ramp,
}

impl DefectProfile {
    fn factor(self, i: usize, len: usize) -> f64 {
        match self {
            DefectProfile::Step => 1.0,
            DefectProfile::Ramp => (i + 1) as f64 / len as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub signature: String,
    pub engine_id: u32,
    pub start_timestamp: i64,
    pub window_len: usize,
    /// Timestamps of the corrupted rows, consecutive within the engine.
    pub timestamps: Vec<i64>,
    pub offsets: BTreeMap<String, f64>,
    pub profile: DefectProfile,
    /// Pre-injection values, `[row][variable]` in `offsets` order.
    pub original: Vec<Vec<f64>>,
}

fn offset_columns(table: &DataTable, sig: &Signature) -> Result<Vec<usize>> {
    let schema = table.schema();
    sig.offsets
        .keys()
        .map(|name| {
            let is_operational = schema
                .variables()
                .iter()
                .any(|v| v.name == *name && v.role == VariableRole::Operational);
            if !is_operational {
                return Err(Error::invalid(format!(
                    "signature variable \"{name}\" is not an operational variable"
                )));
            }
            Ok(schema.value_index(name).expect("operational variables are numeric"))
        })
        .collect()
}

pub fn inject(table: &DataTable, sig: &Signature, window_len: usize, seed: u64) -> Result<(DataTable, InjectionRecord)> {
    inject_with_profile(table, sig, window_len, seed, DefectProfile::Step)
}

/// Pick an engine with at least `window_len` rows and a start position, both
/// uniformly at random, and add the signature over that window.
pub fn inject_with_profile(
    table: &DataTable,
    sig: &Signature,
    window_len: usize,
    seed: u64,
    profile: DefectProfile,
) -> Result<(DataTable, InjectionRecord)> {
    sig.validate()?;
    if window_len == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    let cols = offset_columns(table, sig)?;
    let eligible: Vec<_> = table
        .engine_ranges()
        .into_iter()
        .filter(|(_, r)| r.len() >= window_len)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!(
            "no engine series has {window_len} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (engine_id, range) = eligible[rng.random_range(0..eligible.len())].clone();
    let start = range.start + rng.random_range(0..=range.len() - window_len);
    let window = start..start + window_len;

    let offsets: Vec<f64> = sig.offsets.values().copied().collect();
    let mut original = Vec::with_capacity(window_len);
    let mut out = table.clone();
    for (i, row) in out.rows_mut()[window.clone()].iter_mut().enumerate() {
        original.push(cols.iter().map(|&j| row.values[j]).collect());
        let f = profile.factor(i, window_len);
        for (&j, off) in cols.iter().zip(&offsets) {
            row.values[j] += f * off;
        }
    }
    let timestamps: Vec<i64> = table.rows()[window].iter().map(|r| r.timestamp).collect();
    let record = InjectionRecord {
        signature: sig.name.clone(),
        engine_id,
        start_timestamp: timestamps[0],
        window_len,
        timestamps,
        offsets: sig.offsets.clone(),
        profile,
        original,
    };
    Ok((out, record))
}

/// Restore the recorded rows to their pre-injection values.
pub fn revert(table: &DataTable, record: &InjectionRecord) -> Result<DataTable> {
    let sig = Signature {
        name: record.signature.clone(),
        offsets: record.offsets.clone(),
    };
    let cols = offset_columns(table, &sig)?;
    let mut out = table.clone();
    let mut restored = 0;
    for row in out.rows_mut() {
        if row.engine_id != record.engine_id {
            continue;
        }
        if let Some(i) = record.timestamps.iter().position(|t| *t == row.timestamp) {
            for (&j, v) in cols.iter().zip(&record.original[i]) {
                row.values[j] = *v;
            }
            restored += 1;
        }
    }
    if restored != record.timestamps.len() {
        return Err(Error::Misaligned {
            record: record.signature.clone(),
        });
    }
    Ok(out)
}

/// Amplitude range of the default signatures, in residual standard
/// deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeRange {
    pub min: f64,
    pub max: f64,
}

impl Default for AmplitudeRange {
    fn default() -> Self {
        Self { min: 2.0, max: 4.0 }
    }
}

/// Twelve synthetic defects, offsets in residual standard deviations.
pub fn default_signature_set() -> Vec<Signature> {
    signature_set(AmplitudeRange::default())
}

pub fn signature_set(range: AmplitudeRange) -> Vec<Signature> {
    // (variables with sign, position of the amplitude inside the range)
    let recipes: [(&[(&str, f64)], f64); 12] = [
        (&[("EXH", 1.0)], 0.5),
        (&[("N2", 1.0)], 0.0),
        (&[("Temp1", -1.0)], 0.5),
        (&[("Pres", 1.0)], 1.0),
        (&[("Temp2", -1.0)], 0.25),
        (&[("FF", 1.0)], 0.75),
        (&[("EXH", 1.0), ("FF", 1.0)], 0.5),
        (&[("N2", -1.0), ("Pres", -1.0)], 0.25),
        (&[("EXH", 1.0), ("Temp2", 1.0)], 0.0),
        (&[("Temp1", 1.0), ("FF", -1.0)], 1.0),
        (&[("N2", 1.0), ("EXH", 1.0), ("FF", 1.0)], 0.5),
        (&[("Pres", -1.0), ("Temp2", 1.0), ("Temp1", 1.0)], 0.75),
    ];
    recipes
        .iter()
        .enumerate()
        .map(|(i, (vars, level))| {
            let amp = range.min + level * (range.max - range.min);
            Signature::new(
                format!("Defect {}", i + 1),
                vars.iter().map(|(v, s)| (v.to_string(), s * amp)),
            )
            .expect("recipes have nonzero offsets")
        })
        .collect()
}
