//! Dataset representation, CSV ingestion, temporal splitting, and the
//! naive missing-data strategies (zero imputation, case deletion).
//!
//! A dataset is a sequence of snapshots over one fixed node set. Each
//! snapshot holds a feature matrix whose first `P` columns (purchase
//! behavior) are always observed and whose remaining `D` columns
//! (demographics) may be masked, plus a fully observed response vector.
//! Masked cells are canonically stored as 0.0; the mask is the source
//! of truth for observedness.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: cannot parse {column} value {text:?} as a number")]
    BadNumber { line: u64, column: String, text: String },
    #[error("line {line}: {column} is empty but may not be missing")]
    SchemaViolation { line: u64, column: String },
    #[error("header problem: {reason}")]
    BadHeader { reason: String },
    #[error("line {line}: node {node} appears twice at time {time}")]
    DuplicateNode { line: u64, node: String, time: i64 },
    #[error("time {time}: node set differs from the first snapshot")]
    InconsistentNodes { time: i64 },
    #[error("dataset needs at least {needed} time steps, found {found}")]
    TooFewSteps { needed: usize, found: usize },
    #[error("split step {t} out of range; need 1 <= t < {steps}")]
    SplitOutOfRange { t: usize, steps: usize },
    #[error("missingness fraction {fraction} outside [0, 0.8]")]
    BadFraction { fraction: f64 },
    #[error("dataset has no demographic columns to mask")]
    NothingToMask,
    #[error("dataset already has masked demographics")]
    AlreadyMasked,
    #[error("no node has complete demographics in every snapshot")]
    NoCompleteNodes,
    #[error("{what} at row {row}, column {col} is not finite")]
    NonFinite { what: &'static str, row: usize, col: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("node ids are not unique: {id} repeats")]
    DuplicateNodeId { id: String },
}

/// Expected column counts of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub purchase_dims: usize,
    pub demographic_dims: usize,
}

/// Per-snapshot features: `n x (P + D)` values with an observedness
/// mask. Purchase columns (the first `P`) are always observed; masked
/// demographic cells are stored as 0.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    purchase_dims: usize,
    demographic_dims: usize,
}

impl FeatureMatrix {
    pub fn new(
        mut values: DMatrix<f64>,
        mask: DMatrix<bool>,
        purchase_dims: usize,
        demographic_dims: usize,
    ) -> Result<Self, DataError> {
        if purchase_dims == 0 {
            return Err(DataError::Shape { what: "purchase columns", expected: 1, got: 0 });
        }
        if values.ncols() != purchase_dims + demographic_dims {
            return Err(DataError::Shape {
                what: "feature columns",
                expected: purchase_dims + demographic_dims,
                got: values.ncols(),
            });
        }
        if mask.nrows() != values.nrows() || mask.ncols() != values.ncols() {
            return Err(DataError::Shape {
                what: "mask entries",
                expected: values.nrows() * values.ncols(),
                got: mask.nrows() * mask.ncols(),
            });
        }
        if values.nrows() == 0 {
            return Err(DataError::Shape { what: "rows", expected: 1, got: 0 });
        }
        for i in 0..values.nrows() {
            for j in 0..values.ncols() {
                if mask[(i, j)] {
                    if !values[(i, j)].is_finite() {
                        return Err(DataError::NonFinite { what: "feature", row: i, col: j });
                    }
                } else {
                    if j < purchase_dims {
                        return Err(DataError::Shape {
                            what: "observed purchase cells in column",
                            expected: values.nrows(),
                            got: i,
                        });
                    }
                    values[(i, j)] = 0.0;
                }
            }
        }
        Ok(Self { values, mask, purchase_dims, demographic_dims })
    }

    pub fn fully_observed(
        values: DMatrix<f64>,
        purchase_dims: usize,
        demographic_dims: usize,
    ) -> Result<Self, DataError> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask, purchase_dims, demographic_dims)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn purchase_dims(&self) -> usize {
        self.purchase_dims
    }

    pub fn demographic_dims(&self) -> usize {
        self.demographic_dims
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[(row, col)]
    }

    /// True when every demographic cell of the node is observed.
    pub fn is_node_complete(&self, row: usize) -> bool {
        (self.purchase_dims..self.m()).all(|j| self.mask[(row, j)])
    }

    fn restricted_to(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(rows),
            mask: self.mask.select_rows(rows),
            purchase_dims: self.purchase_dims,
            demographic_dims: self.demographic_dims,
        }
    }

    fn mask_node_demographics(&mut self, row: usize) {
        for j in self.purchase_dims..self.m() {
            self.mask[(row, j)] = false;
            self.values[(row, j)] = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    time: i64,
    features: FeatureMatrix,
    response: DVector<f64>,
}

impl Snapshot {
    pub fn new(time: i64, features: FeatureMatrix, response: DVector<f64>) -> Result<Self, DataError> {
        if response.len() != features.n() {
            return Err(DataError::Shape {
                what: "response length",
                expected: features.n(),
                got: response.len(),
            });
        }
        if let Some(row) = response.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { what: "response", row, col: 0 });
        }
        Ok(Self { time, features, response })
    }

    pub fn time(&self) -> i64 {
        self.time
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }
}

/// Snapshots over one node set, ordered by strictly increasing time.
///
/// Ingested and generated datasets always have at least two steps (one
/// to train on, one to test on); the halves produced by
/// [`temporal_split`] may hold a single snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalDataset {
    node_ids: Vec<String>,
    snapshots: Vec<Snapshot>,
}

impl TemporalDataset {
    pub fn new(node_ids: Vec<String>, snapshots: Vec<Snapshot>) -> Result<Self, DataError> {
        if snapshots.is_empty() {
            return Err(DataError::TooFewSteps { needed: 1, found: 0 });
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &node_ids {
            if !seen.insert(id) {
                return Err(DataError::DuplicateNodeId { id: id.clone() });
            }
        }
        let first = &snapshots[0];
        let (n, p, d) = (
            first.features.n(),
            first.features.purchase_dims(),
            first.features.demographic_dims(),
        );
        if node_ids.len() != n {
            return Err(DataError::Shape { what: "node ids", expected: n, got: node_ids.len() });
        }
        for pair in snapshots.windows(2) {
            if pair[1].time <= pair[0].time {
                return Err(DataError::InconsistentNodes { time: pair[1].time });
            }
        }
        for snap in &snapshots {
            if snap.features.n() != n {
                return Err(DataError::Shape { what: "nodes", expected: n, got: snap.features.n() });
            }
            if snap.features.purchase_dims() != p || snap.features.demographic_dims() != d {
                return Err(DataError::Shape {
                    what: "feature columns",
                    expected: p + d,
                    got: snap.features.m(),
                });
            }
        }
        Ok(Self { node_ids, snapshots })
    }

    pub fn n(&self) -> usize {
        self.snapshots[0].features.n()
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn m(&self) -> usize {
        self.snapshots[0].features.m()
    }

    pub fn purchase_dims(&self) -> usize {
        self.snapshots[0].features.purchase_dims()
    }

    pub fn demographic_dims(&self) -> usize {
        self.snapshots[0].features.demographic_dims()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    /// Nodes whose demographics are observed in every snapshot.
    pub fn complete_nodes(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.snapshots.iter().all(|s| s.features.is_node_complete(i)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    AtRandom,
    LowestResponse,
    HighestResponse,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Mechanism::AtRandom => "at_random",
            Mechanism::LowestResponse => "lowest_response",
            Mechanism::HighestResponse => "highest_response",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    pub fraction: f64,
    pub seed: u64,
}

impl MissingnessSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !self.fraction.is_finite() || !(0.0..=0.8).contains(&self.fraction) {
            return Err(DataError::BadFraction { fraction: self.fraction });
        }
        Ok(())
    }
}

fn header_name(kind: &str, index: usize) -> String {
    format!("{kind}{}", index + 1)
}

fn parse_header(header: &csv::StringRecord, schema: Option<&CsvSchema>) -> Result<CsvSchema, DataError> {
    let fields: Vec<&str> = header.iter().collect();
    if fields.len() < 4 {
        return Err(DataError::BadHeader {
            reason: "need at least node_id,time,p1,target".into(),
        });
    }
    if fields[0] != "node_id" || fields[1] != "time" {
        return Err(DataError::BadHeader {
            reason: format!("expected node_id,time leading columns, got {},{}", fields[0], fields[1]),
        });
    }
    if *fields.last().unwrap() != "target" {
        return Err(DataError::BadHeader {
            reason: format!("expected trailing target column, got {}", fields.last().unwrap()),
        });
    }
    let middle = &fields[2..fields.len() - 1];
    let p = middle.iter().take_while(|f| f.starts_with('p')).count();
    let d = middle.len() - p;
    for (i, field) in middle.iter().enumerate() {
        let want = if i < p { header_name("p", i) } else { header_name("d", i - p) };
        if *field != want {
            return Err(DataError::BadHeader {
                reason: format!("feature column {} named {field:?}, expected {want:?}", i + 3),
            });
        }
    }
    if p == 0 {
        return Err(DataError::BadHeader { reason: "no purchase columns".into() });
    }
    if let Some(s) = schema {
        if s.purchase_dims != p || s.demographic_dims != d {
            return Err(DataError::BadHeader {
                reason: format!(
                    "schema expects {}+{} feature columns, file has {}+{}",
                    s.purchase_dims, s.demographic_dims, p, d
                ),
            });
        }
    }
    Ok(CsvSchema { purchase_dims: p, demographic_dims: d })
}

struct RawRow {
    line: u64,
    node: String,
    purchase: Vec<f64>,
    demographic: Vec<(f64, bool)>,
    target: f64,
}

/// Reads the dataset format: header `node_id,time,p1..pP,d1..dD,target`,
/// one row per node per time step, empty demographic cells = missing.
/// When `schema` is given the file's column counts must match it;
/// otherwise they are inferred from the header.
pub fn load_dataset(path: &Path, schema: Option<&CsvSchema>) -> Result<TemporalDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let schema = parse_header(reader.headers()?, schema)?;
    let (p, d) = (schema.purchase_dims, schema.demographic_dims);

    let mut by_time: BTreeMap<i64, Vec<RawRow>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |pos| pos.line());
        let expected = 3 + p + d;
        if record.len() != expected {
            return Err(DataError::BadHeader {
                reason: format!("line {line}: {} fields, expected {expected}", record.len()),
            });
        }
        let node = record[0].to_string();
        if node.is_empty() {
            return Err(DataError::SchemaViolation { line, column: "node_id".into() });
        }
        let time: i64 = record[1].parse().map_err(|_| DataError::BadNumber {
            line,
            column: "time".into(),
            text: record[1].to_string(),
        })?;
        let parse_cell = |idx: usize, column: String| -> Result<f64, DataError> {
            let text = &record[idx];
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::BadNumber { line, column, text: text.to_string() })
        };
        let mut purchase = Vec::with_capacity(p);
        for j in 0..p {
            let column = header_name("p", j);
            if record[2 + j].is_empty() {
                return Err(DataError::SchemaViolation { line, column });
            }
            purchase.push(parse_cell(2 + j, column)?);
        }
        let mut demographic = Vec::with_capacity(d);
        for j in 0..d {
            let idx = 2 + p + j;
            if record[idx].is_empty() {
                demographic.push((0.0, false));
            } else {
                demographic.push((parse_cell(idx, header_name("d", j))?, true));
            }
        }
        if record[2 + p + d].is_empty() {
            return Err(DataError::SchemaViolation { line, column: "target".into() });
        }
        let target = parse_cell(2 + p + d, "target".into())?;
        by_time.entry(time).or_default().push(RawRow { line, node, purchase, demographic, target });
    }

    if by_time.len() < 2 {
        return Err(DataError::TooFewSteps { needed: 2, found: by_time.len() });
    }
    let node_ids: Vec<String> = by_time
        .values()
        .next()
        .expect("nonempty map")
        .iter()
        .map(|r| r.node.clone())
        .collect();
    let order: BTreeMap<&str, usize> =
        node_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let n = node_ids.len();

    let mut snapshots = Vec::with_capacity(by_time.len());
    for (&time, rows) in &by_time {
        if rows.len() != n {
            return Err(DataError::InconsistentNodes { time });
        }
        let mut values = DMatrix::zeros(n, p + d);
        let mut mask = DMatrix::from_element(n, p + d, true);
        let mut response = DVector::zeros(n);
        let mut seen = vec![false; n];
        for row in rows {
            let Some(&i) = order.get(row.node.as_str()) else {
                return Err(DataError::InconsistentNodes { time });
            };
            if seen[i] {
                return Err(DataError::DuplicateNode { line: row.line, node: row.node.clone(), time });
            }
            seen[i] = true;
            for (j, &v) in row.purchase.iter().enumerate() {
                values[(i, j)] = v;
            }
            for (j, &(v, observed)) in row.demographic.iter().enumerate() {
                values[(i, p + j)] = v;
                mask[(i, p + j)] = observed;
            }
            response[i] = row.target;
        }
        let features = FeatureMatrix::new(values, mask, p, d)?;
        snapshots.push(Snapshot::new(time, features, response)?);
    }
    TemporalDataset::new(node_ids, snapshots)
}

/// Writes the dataset in the same format [`load_dataset`] reads. Masked
/// demographic cells are emitted as empty fields; numbers use the
/// shortest decimal form that parses back to the same value, so a
/// write/read cycle is lossless.
pub fn write_dataset(ds: &TemporalDataset, path: &Path) -> Result<(), DataError> {
    let (p, d) = (ds.purchase_dims(), ds.demographic_dims());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["node_id".to_string(), "time".to_string()];
    header.extend((0..p).map(|j| header_name("p", j)));
    header.extend((0..d).map(|j| header_name("d", j)));
    header.push("target".to_string());
    writer.write_record(&header)?;
    for snap in ds.snapshots() {
        for (i, id) in ds.node_ids().iter().enumerate() {
            let mut record = vec![id.clone(), snap.time().to_string()];
            for j in 0..p + d {
                if snap.features().is_observed(i, j) {
                    record.push(format!("{}", snap.features().values()[(i, j)]));
                } else {
                    record.push(String::new());
                }
            }
            record.push(format!("{}", snap.response()[i]));
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Writes the observedness masks as a parallel CSV of 0/1 cells.
pub fn write_mask(ds: &TemporalDataset, path: &Path) -> Result<(), DataError> {
    let (p, d) = (ds.purchase_dims(), ds.demographic_dims());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["node_id".to_string(), "time".to_string()];
    header.extend((0..p).map(|j| header_name("p", j)));
    header.extend((0..d).map(|j| header_name("d", j)));
    writer.write_record(&header)?;
    for snap in ds.snapshots() {
        for (i, id) in ds.node_ids().iter().enumerate() {
            let mut record = vec![id.clone(), snap.time().to_string()];
            for j in 0..p + d {
                record.push(if snap.features().is_observed(i, j) { "1" } else { "0" }.to_string());
            }
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Splits off the first `t` snapshots for training; the test half is
/// the single following snapshot. Later snapshots, if any, are unused.
pub fn temporal_split(
    ds: &TemporalDataset,
    t: usize,
) -> Result<(TemporalDataset, TemporalDataset), DataError> {
    if t == 0 || t >= ds.steps() {
        return Err(DataError::SplitOutOfRange { t, steps: ds.steps() });
    }
    let train = TemporalDataset::new(ds.node_ids().to_vec(), ds.snapshots()[..t].to_vec())?;
    let test = TemporalDataset::new(ds.node_ids().to_vec(), vec![ds.snapshots()[t].clone()])?;
    Ok((train, test))
}

/// Masks all demographic columns of `round(fraction * N)` nodes in
/// every snapshot. Node selection is by the spec'd mechanism; the
/// response-ranked mechanisms average the response over the first
/// `train_steps` snapshots only, so selection never looks at test-step
/// responses. Deterministic given the spec.
pub fn induce_missingness(
    ds: &TemporalDataset,
    spec: &MissingnessSpec,
    train_steps: usize,
) -> Result<TemporalDataset, DataError> {
    spec.validate()?;
    if ds.demographic_dims() == 0 {
        return Err(DataError::NothingToMask);
    }
    if ds.snapshots().iter().any(|s| (0..ds.n()).any(|i| !s.features().is_node_complete(i))) {
        return Err(DataError::AlreadyMasked);
    }
    if train_steps == 0 || train_steps > ds.steps() {
        return Err(DataError::SplitOutOfRange { t: train_steps, steps: ds.steps() });
    }
    let n = ds.n();
    let count = (spec.fraction * n as f64).round() as usize;
    let chosen: Vec<usize> = match spec.mechanism {
        Mechanism::AtRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rand::seq::index::sample(&mut rng, n, count).into_vec()
        }
        Mechanism::LowestResponse | Mechanism::HighestResponse => {
            let means: Vec<f64> = (0..n)
                .map(|i| {
                    ds.snapshots()[..train_steps]
                        .iter()
                        .map(|s| s.response()[i])
                        .sum::<f64>()
                        / train_steps as f64
                })
                .collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                let by_mean = match spec.mechanism {
                    Mechanism::LowestResponse => means[a].total_cmp(&means[b]),
                    _ => means[b].total_cmp(&means[a]),
                };
                by_mean.then_with(|| ds.node_ids()[a].cmp(&ds.node_ids()[b]))
            });
            idx.truncate(count);
            idx
        }
    };
    let mut out = ds.clone();
    for snap in &mut out.snapshots {
        for &i in &chosen {
            snap.features.mask_node_demographics(i);
        }
    }
    Ok(out)
}

/// Replaces masked cells by 0.0 and marks everything observed.
/// Masked cells are already stored as zero, so applying this twice is
/// the same as applying it once.
pub fn zero_impute(fm: &FeatureMatrix) -> FeatureMatrix {
    FeatureMatrix {
        values: fm.values.clone(),
        mask: DMatrix::from_element(fm.n(), fm.m(), true),
        purchase_dims: fm.purchase_dims,
        demographic_dims: fm.demographic_dims,
    }
}

/// [`zero_impute`] applied to every snapshot.
pub fn zero_impute_dataset(ds: &TemporalDataset) -> TemporalDataset {
    let snapshots = ds
        .snapshots()
        .iter()
        .map(|s| Snapshot {
            time: s.time,
            features: zero_impute(&s.features),
            response: s.response.clone(),
        })
        .collect();
    TemporalDataset { node_ids: ds.node_ids.clone(), snapshots }
}

/// Restricts the dataset to nodes with complete demographics in every
/// snapshot, preserving node order.
pub fn drop_incomplete(ds: &TemporalDataset) -> Result<TemporalDataset, DataError> {
    let keep = ds.complete_nodes();
    if keep.is_empty() {
        return Err(DataError::NoCompleteNodes);
    }
    let node_ids = keep.iter().map(|&i| ds.node_ids[i].clone()).collect();
    let snapshots = ds
        .snapshots()
        .iter()
        .map(|s| Snapshot {
            time: s.time,
            features: s.features.restricted_to(&keep),
            response: s.response.select_rows(&keep),
        })
        .collect();
    TemporalDataset::new(node_ids, snapshots)
}
