//! Observed-data container: `O = (W, R, RA, Δ, ΔY)` with optional sampling weights.
//!
//! Absent values stay absent: an unmeasured biomarker is `None`, an unobserved
//! outcome is `None`. Nothing downstream has to guess what an empty cell meant.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of measured observations required at or above the largest threshold.
pub const DEFAULT_MIN_ABOVE: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed row {row}: column `{column}` has non-numeric value `{value}`")]
    MalformedRow { row: usize, column: String, value: String },
    #[error("inconsistent record at row {row}: {reason}")]
    InconsistentRecord { row: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no observation has a measured biomarker")]
    NoMeasuredBiomarker,
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("covariate dimension mismatch at row {row}: expected {expected}, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("degenerate threshold grid: {0}")]
    DegenerateGrid(String),
    #[error("invalid threshold grid: {0}")]
    InvalidGrid(String),
    #[error("outcome {value} at row {row} outside [{lo}, {hi}]")]
    OutOfRangeOutcome { row: usize, value: f64, lo: f64, hi: f64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    BoundedContinuous { lo: f64, hi: f64 },
}

impl OutcomeKind {
    pub fn range(&self) -> (f64, f64) {
        match *self {
            OutcomeKind::Binary => (0.0, 1.0),
            OutcomeKind::BoundedContinuous { lo, hi } => (lo, hi),
        }
    }
}

/// One subject's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub w: Vec<f64>,
    /// Biomarker value; `Some` iff the biomarker was measured (`R = 1`).
    pub a: Option<f64>,
    /// Outcome value; `Some` iff the outcome was observed (`Δ = 1`).
    pub y: Option<f64>,
    pub weight: f64,
}

impl Observation {
    pub fn new(w: Vec<f64>, a: Option<f64>, y: Option<f64>) -> Self {
        Observation { w, a, y, weight: 1.0 }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    #[inline]
    pub fn measured(&self) -> bool {
        self.a.is_some()
    }

    #[inline]
    pub fn observed(&self) -> bool {
        self.y.is_some()
    }

    /// `1(A ≥ v)` for measured rows, `false` otherwise.
    #[inline]
    pub fn above(&self, v: f64) -> bool {
        matches!(self.a, Some(a) if a >= v)
    }

    /// `ΔY` (zero when the outcome is missing).
    #[inline]
    pub fn delta_y(&self) -> f64 {
        self.y.unwrap_or(0.0)
    }
}

/// Validated column store of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    covariate_names: Vec<String>,
    outcome_kind: OutcomeKind,
}

impl Dataset {
    pub fn new(
        observations: Vec<Observation>,
        covariate_names: Vec<String>,
        outcome_kind: OutcomeKind,
    ) -> Result<Self, DataError> {
        if observations.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let d = covariate_names.len();
        let (lo, hi) = outcome_kind.range();
        for (row, obs) in observations.iter().enumerate() {
            if obs.w.len() != d {
                return Err(DataError::DimensionMismatch { row, expected: d, found: obs.w.len() });
            }
            if !(obs.weight.is_finite() && obs.weight > 0.0) {
                return Err(DataError::InconsistentRecord {
                    row,
                    reason: format!("weight must be positive, got {}", obs.weight),
                });
            }
            if obs.w.iter().any(|x| !x.is_finite()) || obs.a.is_some_and(|a| !a.is_finite()) {
                return Err(DataError::InconsistentRecord { row, reason: "non-finite value".into() });
            }
            if let Some(y) = obs.y {
                match outcome_kind {
                    OutcomeKind::Binary if y != 0.0 && y != 1.0 => {
                        return Err(DataError::InconsistentRecord {
                            row,
                            reason: format!("binary outcome must be 0 or 1, got {y}"),
                        })
                    }
                    _ if !(lo..=hi).contains(&y) => {
                        return Err(DataError::OutOfRangeOutcome { row, value: y, lo, hi })
                    }
                    _ => {}
                }
            }
        }
        if !observations.iter().any(Observation::measured) {
            return Err(DataError::NoMeasuredBiomarker);
        }
        Ok(Dataset { observations, covariate_names, outcome_kind })
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.observations.iter()
    }

    /// External weights times `R`: the weight each row carries into a fit that
    /// only uses measured rows.
    pub fn measured_weights(&self) -> Vec<f64> {
        self.iter().map(|o| if o.measured() { o.weight } else { 0.0 }).collect()
    }

    pub fn measured_biomarkers(&self) -> Vec<f64> {
        self.iter().filter_map(|o| o.a).collect()
    }

    /// Number of measured observations with `a ≥ v`.
    pub fn count_above(&self, v: f64) -> usize {
        self.iter().filter(|o| o.above(v)).count()
    }

    /// Replaces the outcome kind without touching values. Used by the outcome transform.
    pub(crate) fn with_outcomes(&self, ys: Vec<Option<f64>>, kind: OutcomeKind) -> Dataset {
        let observations = self
            .observations
            .iter()
            .zip(ys)
            .map(|(o, y)| Observation { y, ..o.clone() })
            .collect();
        Dataset { observations, covariate_names: self.covariate_names.clone(), outcome_kind: kind }
    }

    /// Structured key-value summary.
    pub fn summary(&self) -> String {
        let n = self.n();
        let measured = self.iter().filter(|o| o.measured()).count();
        let observed = self.iter().filter(|o| o.observed()).count();
        let events = self.iter().filter(|o| o.y == Some(1.0)).count();
        let a = self.measured_biomarkers();
        let (amin, amax) = a
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let mut s = String::new();
        let _ = writeln!(s, "n={n}");
        let _ = writeln!(s, "covariates={}", self.covariate_names.join(","));
        let _ = writeln!(s, "measured={measured}");
        let _ = writeln!(s, "outcome_observed={observed}");
        let _ = writeln!(s, "events={events}");
        let _ = writeln!(s, "biomarker_min={amin}");
        let _ = writeln!(s, "biomarker_max={amax}");
        let _ = writeln!(s, "weight_sum={}", self.iter().map(|o| o.weight).sum::<f64>());
        match self.outcome_kind {
            OutcomeKind::Binary => {
                let _ = writeln!(s, "outcome_kind=binary");
            }
            OutcomeKind::BoundedContinuous { lo, hi } => {
                let _ = writeln!(s, "outcome_kind=bounded_continuous({lo},{hi})");
            }
        }
        s
    }
}

/// Which CSV columns hold which variables.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub biomarker: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    /// `Δ` column; absent means every outcome is observed.
    pub missingness: Option<String>,
    /// `R` column; absent means measured wherever the biomarker cell is non-empty.
    pub measured: Option<String>,
    pub weight: Option<String>,
    pub delimiter: u8,
    pub outcome_kind: OutcomeKind,
}

impl CsvSchema {
    pub fn new(biomarker: impl Into<String>, outcome: impl Into<String>) -> Self {
        CsvSchema {
            biomarker: biomarker.into(),
            outcome: outcome.into(),
            covariates: Vec::new(),
            missingness: None,
            measured: None,
            weight: None,
            delimiter: b',',
            outcome_kind: OutcomeKind::Binary,
        }
    }

    pub fn covariates<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.covariates = names.into_iter().map(Into::into).collect();
        self
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

fn parse_cell(row: usize, column: &str, cell: &str) -> Result<Option<f64>, DataError> {
    if is_missing(cell) {
        return Ok(None);
    }
    cell.trim().parse::<f64>().map(Some).map_err(|_| DataError::MalformedRow {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })
}

fn parse_indicator(row: usize, column: &str, cell: &str) -> Result<bool, DataError> {
    match parse_cell(row, column, cell)? {
        Some(0.0) => Ok(false),
        Some(1.0) => Ok(true),
        _ => Err(DataError::InconsistentRecord {
            row,
            reason: format!("indicator `{column}` must be 0 or 1, got `{cell}`"),
        }),
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Parses CSV from any reader. Rows are numbered from 1 (the first data row).
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let a_idx = col(&schema.biomarker)?;
    let y_idx = col(&schema.outcome)?;
    let w_idx = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
    let delta_idx = schema.missingness.as_deref().map(col).transpose()?;
    let r_idx = schema.measured.as_deref().map(col).transpose()?;
    let wt_idx = schema.weight.as_deref().map(col).transpose()?;

    let mut observations = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        let mut w = Vec::with_capacity(w_idx.len());
        for (&idx, name) in w_idx.iter().zip(&schema.covariates) {
            match parse_cell(row, name, cell(idx))? {
                Some(x) => w.push(x),
                None => {
                    return Err(DataError::InconsistentRecord {
                        row,
                        reason: format!("covariate `{name}` is missing"),
                    })
                }
            }
        }
        let a = parse_cell(row, &schema.biomarker, cell(a_idx))?;
        let y = parse_cell(row, &schema.outcome, cell(y_idx))?;
        let r = match r_idx {
            Some(idx) => parse_indicator(row, schema.measured.as_deref().unwrap_or(""), cell(idx))?,
            None => a.is_some(),
        };
        let delta = match delta_idx {
            Some(idx) => {
                parse_indicator(row, schema.missingness.as_deref().unwrap_or(""), cell(idx))?
            }
            None => true,
        };
        match (r, a) {
            (false, Some(v)) => {
                return Err(DataError::InconsistentRecord {
                    row,
                    reason: format!("biomarker value {v} present with measured indicator 0"),
                })
            }
            (true, None) => {
                return Err(DataError::InconsistentRecord {
                    row,
                    reason: "biomarker marked measured but cell is empty".into(),
                })
            }
            _ => {}
        }
        match (delta, y) {
            (false, Some(v)) => {
                return Err(DataError::InconsistentRecord {
                    row,
                    reason: format!("outcome value {v} present with missingness indicator 0"),
                })
            }
            (true, None) => {
                return Err(DataError::InconsistentRecord {
                    row,
                    reason: "outcome marked observed but cell is empty".into(),
                })
            }
            _ => {}
        }
        let weight = match wt_idx {
            Some(idx) => match parse_cell(row, schema.weight.as_deref().unwrap_or(""), cell(idx))? {
                Some(x) => x,
                None => {
                    return Err(DataError::InconsistentRecord { row, reason: "weight is missing".into() })
                }
            },
            None => 1.0,
        };
        observations.push(Observation { w, a, y, weight });
    }
    if observations.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Dataset::new(observations, schema.covariates.clone(), schema.outcome_kind).map_err(|e| match e {
        // row numbers from Dataset::new are zero-based
        DataError::InconsistentRecord { row, reason } => {
            DataError::InconsistentRecord { row: row + 1, reason }
        }
        other => other,
    })
}

/// Writes the dataset in the canonical layout read back by [`canonical_schema`]:
/// covariates, then `a,r,y,delta,weight`. Absent values are empty cells.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = data.covariate_names.clone();
    header.extend(["a", "r", "y", "delta", "weight"].map(String::from));
    wtr.write_record(&header)?;
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    for o in data.iter() {
        let mut rec: Vec<String> = o.w.iter().map(|x| format!("{x:?}")).collect();
        rec.push(fmt(o.a));
        rec.push(if o.measured() { "1" } else { "0" }.into());
        rec.push(fmt(o.y));
        rec.push(if o.observed() { "1" } else { "0" }.into());
        rec.push(format!("{:?}", o.weight));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Schema matching the layout produced by [`write_csv`].
pub fn canonical_schema(data: &Dataset) -> CsvSchema {
    CsvSchema {
        biomarker: "a".into(),
        outcome: "y".into(),
        covariates: data.covariate_names.clone(),
        missingness: Some("delta".into()),
        measured: Some("r".into()),
        weight: Some("weight".into()),
        delimiter: b',',
        outcome_kind: data.outcome_kind,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "probs", rename_all = "snake_case")]
pub enum GridProvenance {
    Explicit,
    Quantile(Vec<f64>),
}

/// Strictly increasing set of thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    values: Vec<f64>,
    provenance: GridProvenance,
}

impl ThresholdGrid {
    pub fn explicit(values: Vec<f64>) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::InvalidGrid("no thresholds".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(DataError::InvalidGrid("NaN threshold".into()));
        }
        if values.windows(2).any(|p| p[1] <= p[0]) {
            return Err(DataError::InvalidGrid("thresholds must be strictly increasing".into()));
        }
        Ok(ThresholdGrid { values, provenance: GridProvenance::Explicit })
    }

    /// `k` equispaced thresholds starting at `lo` with spacing `step`.
    pub fn equispaced(lo: f64, step: f64, k: usize) -> Result<Self, DataError> {
        Self::explicit((0..k).map(|j| lo + step * j as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn provenance(&self) -> &GridProvenance {
        &self.provenance
    }

    /// Rejects the grid unless at least `min_above` measured observations lie at
    /// or above its largest threshold.
    pub fn check_support(&self, data: &Dataset, min_above: usize) -> Result<(), DataError> {
        let top = *self.values.last().expect("grid is non-empty");
        let count = data.count_above(top);
        if count < min_above {
            return Err(DataError::InvalidGrid(format!(
                "only {count} measured observations at or above threshold {top}; need {min_above}"
            )));
        }
        Ok(())
    }
}

/// Lower-nearest-rank (type 1) empirical quantile of a sorted sample.
pub fn type1_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.saturating_sub(1).min(n - 1)]
}

/// Empirical quantiles of the measured biomarker values, deduplicated.
pub fn quantile_grid(data: &Dataset, probs: &[f64]) -> Result<ThresholdGrid, DataError> {
    if probs.is_empty() {
        return Err(DataError::InvalidGrid("no quantile probabilities".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(DataError::InvalidGrid(format!("probability {p} outside [0, 1]")));
    }
    let mut a = data.measured_biomarkers();
    a.sort_by(f64::total_cmp);
    let mut values: Vec<f64> = probs.iter().map(|&p| type1_quantile(&a, p)).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if probs.len() > 1 && values.len() == 1 {
        return Err(DataError::DegenerateGrid(format!("all quantiles equal {}", values[0])));
    }
    Ok(ThresholdGrid { values, provenance: GridProvenance::Quantile(probs.to_vec()) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, schema: &CsvSchema) -> Result<Dataset, DataError> {
        read_csv(text.as_bytes(), schema)
    }

    #[test]
    fn default_fill_without_indicator_columns() {
        let schema = CsvSchema::new("a", "y").covariates(["w1"]);
        let data = parse("w1,a,y\n0.1,1.0,1\n0.2,2.0,0\n0.3,3.0,1\n", &schema).unwrap();
        assert_eq!(data.n(), 3);
        assert!(data.iter().all(|o| o.measured() && o.observed() && o.weight == 1.0));
    }

    #[test]
    fn missing_outcome_is_recorded_absent() {
        let mut schema = CsvSchema::new("a", "y").covariates(["w1"]);
        schema.missingness = Some("delta".into());
        let data = parse("w1,a,y,delta\n0.1,1.0,,0\n0.2,2.0,1,1\n", &schema).unwrap();
        assert_eq!(data.observations()[0].y, None);
        let data = parse("w1,a,y,delta\n0.1,1.0,NA,0\n0.2,2.0,1,1\n", &schema).unwrap();
        assert_eq!(data.observations()[0].y, None);
    }

    #[test]
    fn biomarker_with_unmeasured_flag_is_rejected() {
        let mut schema = CsvSchema::new("a", "y");
        schema.measured = Some("r".into());
        let err = parse("a,y,r\n1.2,1,0\n2.0,0,1\n", &schema).unwrap_err();
        assert!(matches!(err, DataError::InconsistentRecord { row: 1, .. }), "{err}");
    }

    #[test]
    fn outcome_with_zero_delta_is_rejected() {
        let mut schema = CsvSchema::new("a", "y");
        schema.missingness = Some("d".into());
        let err = parse("a,y,d\n1.0,1,0\n", &schema).unwrap_err();
        assert!(matches!(err, DataError::InconsistentRecord { .. }));
    }

    #[test]
    fn non_numeric_cell_is_malformed() {
        let schema = CsvSchema::new("a", "y");
        let err = parse("a,y\nfoo,1\n", &schema).unwrap_err();
        assert!(matches!(err, DataError::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let schema = CsvSchema::new("a", "y");
        assert!(matches!(parse("a,y\n", &schema), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn unmeasured_rows_without_indicator_column() {
        let schema = CsvSchema::new("a", "y");
        let data = parse("a,y\n,1\n2.0,0\n", &schema).unwrap();
        assert!(!data.observations()[0].measured());
        assert!(data.observations()[1].measured());
    }

    #[test]
    fn semicolon_delimiter() {
        let mut schema = CsvSchema::new("a", "y");
        schema.delimiter = b';';
        let data = parse("a;y\n1.5;1\n", &schema).unwrap();
        assert_eq!(data.observations()[0].a, Some(1.5));
    }

    #[test]
    fn binary_outcome_must_be_zero_or_one() {
        let schema = CsvSchema::new("a", "y");
        assert!(parse("a,y\n1.0,0.5\n", &schema).is_err());
    }

    #[test]
    fn quantile_grid_lower_nearest_rank() {
        let obs = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&a| Observation::new(vec![], Some(a), Some(0.0)))
            .collect();
        let data = Dataset::new(obs, vec![], OutcomeKind::Binary).unwrap();
        let grid = quantile_grid(&data, &[0.0, 0.5]).unwrap();
        assert_eq!(grid.values(), &[1.0, 2.0]);
    }

    #[test]
    fn quantile_grid_all_equal_is_degenerate() {
        let obs = (0..3).map(|_| Observation::new(vec![], Some(5.0), Some(1.0))).collect();
        let data = Dataset::new(obs, vec![], OutcomeKind::Binary).unwrap();
        assert!(matches!(quantile_grid(&data, &[0.0, 0.5]), Err(DataError::DegenerateGrid(_))));
    }

    #[test]
    fn grid_support_floor() {
        let obs = (0..20).map(|i| Observation::new(vec![], Some(i as f64), Some(0.0))).collect();
        let data = Dataset::new(obs, vec![], OutcomeKind::Binary).unwrap();
        let grid = ThresholdGrid::explicit(vec![0.0, 10.0]).unwrap();
        assert!(grid.check_support(&data, 10).is_ok());
        let grid = ThresholdGrid::explicit(vec![0.0, 11.0]).unwrap();
        assert!(grid.check_support(&data, 10).is_err());
        assert!(ThresholdGrid::explicit(vec![1.0, 1.0]).is_err());
    }
}
