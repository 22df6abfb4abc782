//! Cruise snapshot data model, CSV ingestion and normalization.
//!
//! A [`DataTable`] is always kept sorted by `(engine_id, timestamp)`; the
//! smoothing stage downstream relies on that ordering.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OPERATIONAL: [&str; 6] = ["EXH", "N2", "Temp1", "Pres", "Temp2", "FF"];
pub const ENVIRONMENTAL: [&str; 4] = ["ALT", "Temp3", "SP", "N1"];
pub const ENGINE_COLUMN: &str = "ENG";
pub const AGE_COLUMN: &str = "AGE";
pub const TIMESTAMP_COLUMN: &str = "timestamp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableRole {
    /// Engine-internal measurement; the detection target.
    Operational,
    /// Flight-context measurement used for clustering and correction.
    Environmental,
    /// Numeric regressor that is neither operational nor environmental (AGE).
    Covariate,
    /// Non-numeric key. The single categorical variable is the engine index.
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub role: VariableRole,
}

impl Variable {
    pub fn new(name: impl Into<String>, role: VariableRole) -> Self {
        Self {
            name: name.into(),
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    variables: Vec<Variable>,
    /// Declared engine set; `None` accepts any engine id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    engines: Option<BTreeSet<u32>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self::cruise()
    }
}

impl Schema {
    /// Build a schema. Exactly one variable must be categorical; it is the
    /// engine key column.
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        let categorical = variables
            .iter()
            .filter(|v| v.role == VariableRole::Categorical)
            .count();
        if categorical != 1 {
            return Err(Error::invalid(format!(
                "schema needs exactly one categorical (engine key) variable, found {categorical}"
            )));
        }
        let mut seen = BTreeSet::new();
        for v in &variables {
            if v.name == TIMESTAMP_COLUMN || !seen.insert(v.name.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate or reserved variable name \"{}\"",
                    v.name
                )));
            }
        }
        Ok(Self {
            variables,
            engines: None,
        })
    }

    /// The cruise-phase variable set: six operational, four environmental,
    /// the engine index and the engine age.
    pub fn cruise() -> Self {
        let mut variables: Vec<Variable> = OPERATIONAL
            .iter()
            .map(|n| Variable::new(*n, VariableRole::Operational))
            .collect();
        variables.extend(
            ENVIRONMENTAL
                .iter()
                .map(|n| Variable::new(*n, VariableRole::Environmental)),
        );
        variables.push(Variable::new(ENGINE_COLUMN, VariableRole::Categorical));
        variables.push(Variable::new(AGE_COLUMN, VariableRole::Covariate));
        Self::new(variables).expect("cruise schema is well formed")
    }

    pub fn with_engines(mut self, engines: impl IntoIterator<Item = u32>) -> Self {
        self.engines = Some(engines.into_iter().collect());
        self
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn declared_engines(&self) -> Option<&BTreeSet<u32>> {
        self.engines.as_ref()
    }

    pub fn engine_column(&self) -> &str {
        self.variables
            .iter()
            .find(|v| v.role == VariableRole::Categorical)
            .map(|v| v.name.as_str())
            .expect("validated at construction")
    }

    /// Names of the numeric (non-categorical) variables, in snapshot order.
    pub fn numeric_names(&self) -> Vec<&str> {
        self.variables
            .iter()
            .filter(|v| v.role != VariableRole::Categorical)
            .map(|v| v.name.as_str())
            .collect()
    }

    pub fn names_with_role(&self, role: VariableRole) -> Vec<&str> {
        self.variables
            .iter()
            .filter(|v| v.role == role)
            .map(|v| v.name.as_str())
            .collect()
    }

    /// Position of `name` inside [`Snapshot::values`].
    pub fn value_index(&self, name: &str) -> Option<usize> {
        self.numeric_names().iter().position(|n| *n == name)
    }

    fn require_index(&self, name: &str) -> Result<usize> {
        self.value_index(name).ok_or_else(|| Error::MissingColumn {
            column: name.to_string(),
        })
    }
}

/// Sort key of a snapshot; unique within a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub engine_id: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub engine_id: u32,
    pub timestamp: i64,
    /// Numeric variables in [`Schema::numeric_names`] order.
    pub values: Vec<f64>,
}

impl Snapshot {
    pub fn key(&self) -> RowKey {
        RowKey {
            engine_id: self.engine_id,
            timestamp: self.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    schema: Schema,
    rows: Vec<Snapshot>,
}

impl DataTable {
    /// Validate and sort `rows`. Fails on width mismatch, non-finite values,
    /// undeclared engines and duplicate keys.
    pub fn new(schema: Schema, mut rows: Vec<Snapshot>) -> Result<Self> {
        let width = schema.numeric_names().len();
        for (i, row) in rows.iter().enumerate() {
            if row.values.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    got: row.values.len(),
                });
            }
            if let Some(j) = row.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCell {
                    row: i + 1,
                    column: schema.numeric_names()[j].to_string(),
                });
            }
            if let Some(engines) = schema.declared_engines() {
                if !engines.contains(&row.engine_id) {
                    return Err(Error::UnknownEngine {
                        row: i + 1,
                        engine: row.engine_id,
                    });
                }
            }
        }
        rows.sort_by_key(Snapshot::key);
        if let Some(w) = rows.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(Error::DuplicateKey {
                engine: w[0].engine_id,
                timestamp: w[0].timestamp,
            });
        }
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Snapshot] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn into_rows(self) -> Vec<Snapshot> {
        self.rows
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.schema.require_index(name)?;
        Ok(self.rows.iter().map(|r| r.values[j]).collect())
    }

    /// Row-major matrix of the named columns.
    pub fn columns(&self, names: &[&str]) -> Result<Vec<Vec<f64>>> {
        let idx = names
            .iter()
            .map(|n| self.schema.require_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&j| r.values[j]).collect())
            .collect())
    }

    /// Distinct engine ids, ascending.
    pub fn engines(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.rows.iter().map(|r| r.engine_id).collect();
        out.dedup();
        out
    }

    /// Contiguous row range of each engine's series.
    pub fn engine_ranges(&self) -> Vec<(u32, Range<usize>)> {
        engine_ranges(self.rows.iter().map(|r| r.engine_id))
    }

    /// Apply `f` to every row's values, keeping keys. Used by normalization
    /// and injection, which never reorder rows.
    pub(crate) fn map_values(&self, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut rows = self.rows.clone();
        for (i, row) in rows.iter_mut().enumerate() {
            f(i, &mut row.values);
        }
        Self {
            schema: self.schema.clone(),
            rows,
        }
    }

    pub(crate) fn rows_mut(&mut self) -> &mut [Snapshot] {
        &mut self.rows
    }
}

pub(crate) fn engine_ranges(ids: impl Iterator<Item = u32>) -> Vec<(u32, Range<usize>)> {
    let mut out: Vec<(u32, Range<usize>)> = Vec::new();
    for (i, id) in ids.enumerate() {
        match out.last_mut() {
            Some((last, range)) if *last == id => range.end = i + 1,
            _ => out.push((id, i..i + 1)),
        }
    }
    out
}

pub fn load_table(path: impl AsRef<Path>, schema: &Schema) -> Result<DataTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let table = read_table(file, schema)?;
    log::info!("loaded {} rows from {}", table.len(), path.display());
    Ok(table)
}

/// Parse a comma-separated table with a mandatory header row. Columns not in
/// the schema are ignored.
pub fn read_table<R: Read>(reader: R, schema: &Schema) -> Result<DataTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let engine_col = find(schema.engine_column())?;
    let ts_col = find(TIMESTAMP_COLUMN)?;
    let names = schema.numeric_names();
    let value_cols = names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |col: usize| record.get(col).unwrap_or("").trim();
        let engine_id = cell(engine_col)
            .parse::<u32>()
            .map_err(|_| Error::ParseCell {
                row,
                column: schema.engine_column().to_string(),
                value: cell(engine_col).to_string(),
            })?;
        let timestamp = cell(ts_col).parse::<i64>().map_err(|_| Error::ParseCell {
            row,
            column: TIMESTAMP_COLUMN.to_string(),
            value: cell(ts_col).to_string(),
        })?;
        let mut values = Vec::with_capacity(value_cols.len());
        for (name, &col) in names.iter().zip(&value_cols) {
            let raw = cell(col);
            let v = raw.parse::<f64>().map_err(|_| Error::ParseCell {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteCell {
                    row,
                    column: name.to_string(),
                });
            }
            values.push(v);
        }
        if let Some(engines) = schema.declared_engines() {
            if !engines.contains(&engine_id) {
                return Err(Error::UnknownEngine {
                    row,
                    engine: engine_id,
                });
            }
        }
        rows.push(Snapshot {
            engine_id,
            timestamp,
            values,
        });
    }
    DataTable::new(schema.clone(), rows)
}

pub fn save_table(path: impl AsRef<Path>, table: &DataTable) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table(std::io::BufWriter::new(file), table)
}

/// Write the table as CSV. Floats use the shortest representation that
/// parses back to the same bits.
pub fn write_table<W: Write>(writer: W, table: &DataTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names = table.schema.numeric_names();
    let mut header = vec![table.schema.engine_column(), TIMESTAMP_COLUMN];
    header.extend(names.iter().copied());
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.engine_id.to_string(), row.timestamp.to_string()];
        rec.extend(row.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Random disjoint train/test partition; both halves come back sorted.
pub fn split_train_test(
    table: &DataTable,
    n_train: usize,
    seed: u64,
) -> Result<(DataTable, DataTable)> {
    let n = table.len();
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "n_train must lie in 1..{n}, got {n_train}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = idx[..n_train].to_vec();
    let mut test_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |ids: &[usize]| DataTable {
        schema: table.schema.clone(),
        rows: ids.iter().map(|&i| table.rows[i].clone()).collect(),
    };
    let (train, test) = (pick(&train_idx), pick(&test_idx));

    let all: BTreeSet<u32> = table.engines().into_iter().collect();
    for (label, part) in [("training", &train), ("test", &test)] {
        let have: BTreeSet<u32> = part.engines().into_iter().collect();
        let missing: Vec<_> = all.difference(&have).collect();
        if !missing.is_empty() {
            log::warn!("engines {missing:?} are absent from the {label} set");
        }
    }
    Ok((train, test))
}

/// Per-variable centering and scaling coefficients, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationCoefficients {
    pub variables: Vec<String>,
    pub mean: Vec<f64>,
    /// Sample standard deviation (n - 1 denominator).
    pub std: Vec<f64>,
}

impl NormalizationCoefficients {
    /// Fit on every numeric variable of the table.
    pub fn fit(table: &DataTable) -> Result<Self> {
        let names = table.schema.numeric_names();
        Self::fit_columns(table, &names)
    }

    pub fn fit_columns(table: &DataTable, names: &[&str]) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::invalid(
                "normalization needs at least two rows".to_string(),
            ));
        }
        let mut mean = Vec::with_capacity(names.len());
        let mut std = Vec::with_capacity(names.len());
        for name in names {
            let col = table.column(name)?;
            let (m, s) = mean_std(&col);
            if !(s > 0.0) {
                return Err(Error::ZeroVariance {
                    variable: name.to_string(),
                });
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self {
            variables: names.iter().map(|s| s.to_string()).collect(),
            mean,
            std,
        })
    }

    /// `(x - mean) / std` on each fitted variable; other columns are untouched.
    pub fn apply(&self, table: &DataTable) -> Result<DataTable> {
        let idx = self.indices(table)?;
        Ok(table.map_values(|_, values| {
            for (k, &j) in idx.iter().enumerate() {
                values[j] = (values[j] - self.mean[k]) / self.std[k];
            }
        }))
    }

    pub fn invert(&self, table: &DataTable) -> Result<DataTable> {
        let idx = self.indices(table)?;
        Ok(table.map_values(|_, values| {
            for (k, &j) in idx.iter().enumerate() {
                values[j] = values[j] * self.std[k] + self.mean[k];
            }
        }))
    }

    /// Standard deviation of `name`, if it was fitted.
    pub fn scale_of(&self, name: &str) -> Option<f64> {
        self.variables
            .iter()
            .position(|v| v == name)
            .map(|k| self.std[k])
    }

    fn indices(&self, table: &DataTable) -> Result<Vec<usize>> {
        self.variables
            .iter()
            .map(|n| table.schema.require_index(n))
            .collect()
    }
}

/// Mean and sample standard deviation.
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}
