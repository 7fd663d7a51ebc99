//! Stimuli, feature tables, representation matrices and the elementary
//! distances from which every dissimilarity entry is computed on demand.
//!
//! Feature distances follow the usual encoding-model conventions:
//!
//! ```text
//! ordinal:  D^k_ij = |f_k(s_i) - f_k(s_j)|
//! nominal:  D^k_ij = 1[f_k(s_i) != f_k(s_j)]
//! missing:  D^k_ij = 0 if either side is missing
//! ```
//!
//! Neural distances are Euclidean distances between representation rows.
//! Neither matrix is ever materialized by this module.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Literal CSV tokens that denote a missing value.
pub const MISSING_TOKENS: [&str; 2] = ["NaN", ""];

/// Magic prefix of the binary representation format.
pub const REPR_MAGIC: &[u8; 8] = b"MLEMREPR";
pub const REPR_VERSION: u32 = 1;
const REPR_HEADER_LEN: usize = 8 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Nominal,
    Ordinal,
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(FeatureKind::Nominal),
            "ordinal" => Ok(FeatureKind::Ordinal),
            other => Err(Error::InvalidConfig(format!(
                "unknown feature kind `{other}` (expected nominal or ordinal)"
            ))),
        }
    }
}

/// A single cell used when building a table programmatically.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Label(String),
    Number(f64),
    Missing,
}

impl FeatureValue {
    pub fn label(s: impl Into<String>) -> Self {
        FeatureValue::Label(s.into())
    }
}

/// Column storage. Nominal labels are interned to integer codes so that the
/// hot distance loop only compares integers.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureColumn {
    Nominal {
        labels: Vec<String>,
        codes: Vec<Option<u32>>,
    },
    Ordinal(Vec<Option<f64>>),
}

impl FeatureColumn {
    pub fn len(&self) -> usize {
        match self {
            FeatureColumn::Nominal { codes, .. } => codes.len(),
            FeatureColumn::Ordinal(values) => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureColumn::Nominal { .. } => FeatureKind::Nominal,
            FeatureColumn::Ordinal(_) => FeatureKind::Ordinal,
        }
    }

    fn nominal_from_labels(values: &[Option<String>]) -> Self {
        let mut labels: Vec<String> = Vec::new();
        let mut lookup: HashMap<&str, u32> = HashMap::new();
        let mut codes = Vec::with_capacity(values.len());
        for value in values {
            let code = value.as_deref().map(|label| {
                *lookup.entry(label).or_insert_with(|| {
                    labels.push(label.to_string());
                    (labels.len() - 1) as u32
                })
            });
            codes.push(code);
        }
        FeatureColumn::Nominal { labels, codes }
    }

    #[inline]
    fn distance(&self, i: usize, j: usize) -> f64 {
        match self {
            FeatureColumn::Nominal { codes, .. } => match (codes[i], codes[j]) {
                (Some(a), Some(b)) => {
                    if a == b {
                        0.0
                    } else {
                        1.0
                    }
                }
                _ => 0.0,
            },
            FeatureColumn::Ordinal(values) => match (values[i], values[j]) {
                (Some(a), Some(b)) => (a - b).abs(),
                _ => 0.0,
            },
        }
    }

    fn cell_string(&self, i: usize) -> String {
        match self {
            FeatureColumn::Nominal { labels, codes } => match codes[i] {
                Some(c) => labels[c as usize].clone(),
                None => "NaN".to_string(),
            },
            FeatureColumn::Ordinal(values) => match values[i] {
                Some(v) => v.to_string(),
                None => "NaN".to_string(),
            },
        }
    }

    fn select(&self, indices: &[usize]) -> Self {
        match self {
            FeatureColumn::Nominal { labels, codes } => FeatureColumn::Nominal {
                labels: labels.clone(),
                codes: indices.iter().map(|&i| codes[i]).collect(),
            },
            FeatureColumn::Ordinal(values) => {
                FeatureColumn::Ordinal(indices.iter().map(|&i| values[i]).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub name: String,
    pub column: FeatureColumn,
}

impl Feature {
    pub fn kind(&self) -> FeatureKind {
        self.column.kind()
    }
}

/// n stimuli by m features. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    stimulus_ids: Vec<String>,
    features: Vec<Feature>,
}

impl FeatureTable {
    pub fn new(stimulus_ids: Vec<String>, features: Vec<Feature>) -> Result<Self> {
        let n = stimulus_ids.len();
        if n < 2 {
            return Err(Error::InvalidConfig(format!(
                "a feature table needs at least 2 stimuli, got {n}"
            )));
        }
        if features.is_empty() {
            return Err(Error::InvalidConfig(
                "a feature table needs at least 1 feature".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for feature in &features {
            if !seen.insert(feature.name.as_str()) {
                return Err(Error::DuplicateFeature(feature.name.clone()));
            }
            if feature.column.len() != n {
                return Err(Error::ColumnLength {
                    feature: feature.name.clone(),
                    expected: n,
                    found: feature.column.len(),
                });
            }
            if let FeatureColumn::Ordinal(values) = &feature.column {
                if let Some(bad) = values.iter().flatten().find(|v| !v.is_finite()) {
                    return Err(Error::NonNumericOrdinal {
                        feature: feature.name.clone(),
                        value: bad.to_string(),
                    });
                }
            }
        }
        Ok(FeatureTable {
            stimulus_ids,
            features,
        })
    }

    /// Builds a table from typed cells. Ordinal columns accept numbers and
    /// `Missing`; nominal columns accept labels, numbers (stringified) and
    /// `Missing`.
    pub fn from_columns(
        stimulus_ids: Vec<String>,
        columns: Vec<(String, FeatureKind, Vec<FeatureValue>)>,
    ) -> Result<Self> {
        let mut features = Vec::with_capacity(columns.len());
        for (name, kind, values) in columns {
            let column = match kind {
                FeatureKind::Ordinal => {
                    let mut out = Vec::with_capacity(values.len());
                    for value in values {
                        out.push(match value {
                            FeatureValue::Number(x) => Some(x),
                            FeatureValue::Missing => None,
                            FeatureValue::Label(label) => {
                                return Err(Error::NonNumericOrdinal {
                                    feature: name,
                                    value: label,
                                })
                            }
                        });
                    }
                    FeatureColumn::Ordinal(out)
                }
                FeatureKind::Nominal => {
                    let labels: Vec<Option<String>> = values
                        .into_iter()
                        .map(|v| match v {
                            FeatureValue::Label(s) => Some(s),
                            FeatureValue::Number(x) => Some(x.to_string()),
                            FeatureValue::Missing => None,
                        })
                        .collect();
                    FeatureColumn::nominal_from_labels(&labels)
                }
            };
            features.push(Feature { name, column });
        }
        FeatureTable::new(stimulus_ids, features)
    }

    pub fn n(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn m(&self) -> usize {
        self.features.len()
    }

    pub fn stimulus_ids(&self) -> &[String] {
        &self.stimulus_ids
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.features.iter().map(Feature::kind).collect()
    }

    /// Distance between stimuli `i` and `j` along feature `k`.
    pub fn feature_distance(&self, k: usize, i: usize, j: usize) -> Result<f64> {
        self.check_feature(k)?;
        self.check_stimulus(i)?;
        self.check_stimulus(j)?;
        Ok(self.features[k].column.distance(i, j))
    }

    /// Writes the full feature-distance vector D^F_ij into `out` (length m).
    /// Indices are trusted; callers validate them once per batch.
    #[inline]
    pub fn distance_vector_into(&self, i: usize, j: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.m());
        for (slot, feature) in out.iter_mut().zip(&self.features) {
            *slot = feature.column.distance(i, j);
        }
    }

    pub fn distance_vector(&self, i: usize, j: usize) -> Result<Vec<f64>> {
        self.check_stimulus(i)?;
        self.check_stimulus(j)?;
        let mut out = vec![0.0; self.m()];
        self.distance_vector_into(i, j, &mut out);
        Ok(out)
    }

    /// Restricts the table to the given stimuli, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            self.check_stimulus(i)?;
        }
        FeatureTable::new(
            indices.iter().map(|&i| self.stimulus_ids[i].clone()).collect(),
            self.features
                .iter()
                .map(|f| Feature {
                    name: f.name.clone(),
                    column: f.column.select(indices),
                })
                .collect(),
        )
    }

    fn check_feature(&self, k: usize) -> Result<()> {
        if k >= self.m() {
            return Err(Error::IndexOutOfBounds {
                index: k,
                len: self.m(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_stimulus(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::IndexOutOfBounds {
                index: i,
                len: self.n(),
            });
        }
        Ok(())
    }

    /// Serializes to the feature CSV format (missing cells as `NaN`).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("stimulus_id");
        for f in &self.features {
            out.push(',');
            out.push_str(&f.name);
        }
        out.push('\n');
        for (i, id) in self.stimulus_ids.iter().enumerate() {
            out.push_str(id);
            for f in &self.features {
                out.push(',');
                out.push_str(&f.column.cell_string(i));
            }
            out.push('\n');
        }
        out
    }

    /// Writes the CSV plus its `<stem>.schema.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())?;
        let schema: serde_json::Map<String, serde_json::Value> = self
            .features
            .iter()
            .map(|f| {
                (
                    f.name.clone(),
                    serde_json::to_value(f.kind()).expect("kind serializes"),
                )
            })
            .collect();
        let body = serde_json::to_string_pretty(&schema)?;
        write_atomic(&schema_sidecar_path(path), body.as_bytes())
    }
}

/// `dir/features.csv` -> `dir/features.schema.json`.
pub fn schema_sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.schema.json"))
}

fn is_missing(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell)
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Loads a feature CSV. Kinds resolve as: `overrides` first, then the JSON
/// sidecar next to the file, then inference (every non-missing cell numeric
/// means ordinal, anything else nominal).
pub fn load_feature_table(
    path: &Path,
    overrides: &HashMap<String, FeatureKind>,
) -> Result<FeatureTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar = schema_sidecar_path(path);
    let declared: HashMap<String, FeatureKind> = if sidecar.exists() {
        let raw = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::malformed(&sidecar, format!("bad schema sidecar: {e}")))?
    } else {
        HashMap::new()
    };
    parse_feature_csv(&text, path, &declared, overrides)
}

pub(crate) fn parse_feature_csv(
    text: &str,
    path: &Path,
    declared: &HashMap<String, FeatureKind>,
    overrides: &HashMap<String, FeatureKind>,
) -> Result<FeatureTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::malformed(path, e.to_string()))?
        .clone();
    if header.len() < 2 {
        return Err(Error::malformed(
            path,
            "header needs `stimulus_id` and at least one feature column",
        ));
    }
    if &header[0] != "stimulus_id" {
        return Err(Error::malformed(
            path,
            format!("first header cell must be `stimulus_id`, found `{}`", &header[0]),
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    {
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateFeature(name.clone()));
            }
        }
    }
    for key in declared.keys().chain(overrides.keys()) {
        if !names.contains(key) {
            return Err(Error::InvalidConfig(format!(
                "schema names unknown feature `{key}`"
            )));
        }
    }

    let mut ids = Vec::new();
    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); names.len()];
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::malformed(path, e.to_string()))?;
        if record.len() != header.len() {
            return Err(Error::malformed(
                path,
                format!(
                    "column length mismatch: row {} has {} fields, header has {}",
                    row_no + 2,
                    record.len(),
                    header.len()
                ),
            ));
        }
        ids.push(record[0].to_string());
        for (c, cell) in record.iter().skip(1).enumerate() {
            cells[c].push(if is_missing(cell) {
                None
            } else {
                Some(cell.to_string())
            });
        }
    }

    let mut features = Vec::with_capacity(names.len());
    for (name, column) in names.into_iter().zip(cells) {
        let kind = overrides
            .get(&name)
            .or_else(|| declared.get(&name))
            .copied()
            .unwrap_or_else(|| infer_kind(&column));
        let column = match kind {
            FeatureKind::Nominal => FeatureColumn::nominal_from_labels(&column),
            FeatureKind::Ordinal => {
                let mut values = Vec::with_capacity(column.len());
                for cell in column {
                    values.push(match cell {
                        None => None,
                        Some(text) => Some(parse_number(&text).ok_or_else(|| {
                            Error::NonNumericOrdinal {
                                feature: name.clone(),
                                value: text.clone(),
                            }
                        })?),
                    });
                }
                FeatureColumn::Ordinal(values)
            }
        };
        features.push(Feature { name, column });
    }
    FeatureTable::new(ids, features)
}

fn infer_kind(column: &[Option<String>]) -> FeatureKind {
    let mut any = false;
    for cell in column.iter().flatten() {
        any = true;
        if parse_number(cell).is_none() {
            return FeatureKind::Nominal;
        }
    }
    if any {
        FeatureKind::Ordinal
    } else {
        FeatureKind::Nominal
    }
}

/// n x d real matrix, row-major, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl RepresentationSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig(
                "representations need at least one column".into(),
            ));
        }
        if data.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "expected {n}x{d} = {} values, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite representation entry at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(RepresentationSet { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("ragged representation rows".into()));
        }
        RepresentationSet::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Euclidean distance between rows `i` and `j`.
    pub fn neural_distance(&self, i: usize, j: usize) -> Result<f64> {
        for idx in [i, j] {
            if idx >= self.n {
                return Err(Error::IndexOutOfBounds {
                    index: idx,
                    len: self.n,
                });
            }
        }
        Ok(self.distance_unchecked(i, j))
    }

    #[inline]
    pub(crate) fn distance_unchecked(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// The n x 1 representation made of column `u`.
    pub fn univariate_slice(&self, u: usize) -> Result<Self> {
        if u >= self.d {
            return Err(Error::IndexOutOfBounds {
                index: u,
                len: self.d,
            });
        }
        let data = (0..self.n).map(|i| self.data[i * self.d + u]).collect();
        RepresentationSet::new(self.n, 1, data)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::IndexOutOfBounds {
                    index: i,
                    len: self.n,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        RepresentationSet::new(indices.len(), self.d, data)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(REPR_HEADER_LEN + self.data.len() * 8);
        out.extend_from_slice(REPR_MAGIC);
        out.extend_from_slice(&REPR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < REPR_HEADER_LEN || &bytes[..8] != REPR_MAGIC {
            return Err(Error::malformed(path, "missing MLEMREPR header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != REPR_VERSION {
            return Err(Error::malformed(
                path,
                format!("unsupported representation version {version}"),
            ));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(REPR_HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::malformed(
                path,
                format!(
                    "payload length {} does not match header n={n}, d={d}",
                    bytes.len()
                ),
            ));
        }
        let data = bytes[REPR_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        RepresentationSet::new(n, d, data)
    }

    pub fn from_csv_str(text: &str, path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (row_no, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::malformed(path, e.to_string()))?;
            let row = record
                .iter()
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|_| {
                        Error::malformed(
                            path,
                            format!("row {}: non-numeric value `{cell}`", row_no + 1),
                        )
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        RepresentationSet::from_rows(&rows).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Loads either the binary format (detected by its magic) or a headerless CSV.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(REPR_MAGIC) {
            RepresentationSet::from_binary(&bytes, path)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::malformed(path, "neither MLEMREPR binary nor UTF-8 CSV"))?;
            RepresentationSet::from_csv_str(&text, path)
        }
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_binary())
    }
}

/// Checks that a table and a representation set describe the same stimuli.
pub fn check_aligned(table: &FeatureTable, reps: &RepresentationSet) -> Result<()> {
    if table.n() != reps.n() {
        return Err(Error::DimensionMismatch(format!(
            "feature table has {} stimuli, representations have {} rows",
            table.n(),
            reps.n()
        )));
    }
    Ok(())
}
