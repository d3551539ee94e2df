//! QoS matrix ingestion, density-controlled sampling and batching.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Token stored for attribute cells that are empty or unknown.
pub const UNKNOWN: &str = "unknown";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    /// Whitespace-separated dense rows, one user per line, negative = missing.
    WsdreamDense,
    /// `user,service,value` header followed by one observation per line.
    TripleCsv,
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsdream_dense" | "wsdream-dense" | "dense" => Ok(MatrixFormat::WsdreamDense),
            "triple_csv" | "triple-csv" | "csv" => Ok(MatrixFormat::TripleCsv),
            other => Err(Error::Config(format!("unknown matrix format `{other}`"))),
        }
    }
}

/// Dense user x service matrix with an observation mask.
#[derive(Clone, Debug)]
pub struct QoSMatrix {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    pub metric_name: String,
    /// Number of negative cells treated as missing.
    pub negative_count: usize,
}

impl QoSMatrix {
    /// Build from raw values; any negative or non-finite cell is missing.
    pub fn from_dense(values: Array2<f64>, metric_name: impl Into<String>) -> Self {
        let mut negative_count = 0;
        let mask = values.mapv(|v| {
            if v < 0.0 {
                negative_count += 1;
            }
            v.is_finite() && v >= 0.0
        });
        let values = ndarray::Zip::from(&values)
            .and(&mask)
            .map_collect(|&v, &m| if m { v } else { 0.0 });
        QoSMatrix {
            values,
            mask,
            metric_name: metric_name.into(),
            negative_count,
        }
    }

    pub fn num_users(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_services(&self) -> usize {
        self.values.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, user: usize, service: usize) -> Option<f64> {
        match self.mask.get((user, service)) {
            Some(true) => Some(self.values[(user, service)]),
            _ => None,
        }
    }

    /// All observed cells in row-major order.
    pub fn observed(&self) -> Vec<Interaction> {
        let mut out = Vec::with_capacity(self.observed_count());
        for ((user, service), &m) in self.mask.indexed_iter() {
            if m {
                out.push(Interaction {
                    user,
                    service,
                    value: self.values[(user, service)],
                });
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub service: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSet {
    pub triples: Vec<Interaction>,
    /// Fraction of the source observation set this set was drawn from.
    pub source_density: f64,
}

impl InteractionSet {
    pub fn new(triples: Vec<Interaction>, source_density: f64) -> Self {
        InteractionSet {
            triples,
            source_density,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn mean_value(&self) -> Option<f64> {
        if self.triples.is_empty() {
            return None;
        }
        Some(self.triples.iter().map(|t| t.value).sum::<f64>() / self.triples.len() as f64)
    }
}

pub fn load_qos_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<QoSMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let metric = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        MatrixFormat::WsdreamDense => parse_dense(&text, path, metric),
        MatrixFormat::TripleCsv => parse_triples(&text, path, metric),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn parse_dense(text: &str, path: &Path, metric: impl Into<String>) -> Result<QoSMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("invalid number `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Shape(format!(
                    "{}: line {} has {} columns, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Shape(format!("{}: empty matrix", path.display())));
    }
    let (n, m) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, m), flat).expect("rectangular rows");
    let matrix = QoSMatrix::from_dense(values, metric);
    if matrix.negative_count > 0 {
        log::info!(
            "{}: {} negative cells treated as missing",
            path.display(),
            matrix.negative_count
        );
    }
    Ok(matrix)
}

pub fn parse_triples(text: &str, path: &Path, metric: impl Into<String>) -> Result<QoSMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) => {
            let cols: Vec<String> = header.split(',').map(|c| c.trim().to_lowercase()).collect();
            if cols != ["user", "service", "value"] {
                return Err(parse_err(path, 1, "expected header `user,service,value`"));
            }
        }
        None => return Err(Error::Shape(format!("{}: empty file", path.display()))),
    }
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    let mut order = Vec::new();
    let (mut n, mut m) = (0usize, 0usize);
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(path, i + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let user: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("invalid user id `{}`", fields[0])))?;
        let service: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("invalid service id `{}`", fields[1])))?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("invalid value `{}`", fields[2])))?;
        if cells.insert((user, service), value).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate pair ({user}, {service})")));
        }
        order.push((user, service));
        n = n.max(user + 1);
        m = m.max(service + 1);
    }
    if cells.is_empty() {
        return Err(Error::Shape(format!("{}: no observations", path.display())));
    }
    let mut values = Array2::from_elem((n, m), -1.0);
    for (key, v) in cells {
        values[key] = v;
    }
    Ok(QoSMatrix::from_dense(values, metric))
}

/// floor(frac * n) for decimal fractions such as 0.075 whose binary
/// representation falls a hair below the intended product.
fn floor_fraction(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor() as usize
}

/// Random density-controlled split of the observed set.
///
/// Returns `(train, holdout)` where `train` holds the first
/// `floor(rho * |observed|)` cells of a seeded permutation.
pub fn sample_sparse(
    matrix: &QoSMatrix,
    rho: f64,
    seed: u64,
) -> Result<(InteractionSet, InteractionSet)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("density must lie in (0, 1), got {rho}")));
    }
    let mut observed = matrix.observed();
    if observed.is_empty() {
        return Err(Error::Shape("matrix has no observed entries".into()));
    }
    let keep = floor_fraction(rho, observed.len());
    observed.shuffle(&mut rng::stream(seed, 0x5A3D));
    let holdout = observed.split_off(keep);
    Ok((
        InteractionSet::new(observed, rho),
        InteractionSet::new(holdout, 1.0 - rho),
    ))
}

/// Carve a validation set out of `train`. Both outputs keep source order.
pub fn split_validation(
    train: &InteractionSet,
    frac: f64,
    seed: u64,
) -> Result<(InteractionSet, InteractionSet)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Domain(format!("validation fraction must lie in [0, 1), got {frac}")));
    }
    let n = train.len();
    let n_val = floor_fraction(frac, n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, 0x7A11));
    let mut is_val = vec![false; n];
    for &i in &perm[..n_val] {
        is_val[i] = true;
    }
    let (mut fit, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (t, v) in train.triples.iter().zip(is_val) {
        if v {
            val.push(*t);
        } else {
            fit.push(*t);
        }
    }
    let d = train.source_density;
    Ok((
        InteractionSet::new(fit, d * (1.0 - frac)),
        InteractionSet::new(val, d * frac),
    ))
}

/// One epoch of batches over an interaction set.
pub struct BatchIter<'a> {
    triples: &'a [Interaction],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<Interaction>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| self.triples[i])
            .collect();
        self.pos = end;
        Some(batch)
    }
}

pub fn batch_iter(
    set: &InteractionSet,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<BatchIter<'_>> {
    if batch_size < 1 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, 0xBA7C));
    }
    Ok(BatchIter {
        triples: &set.triples,
        order,
        batch_size,
        pos: 0,
    })
}

/// Per-entity categorical attributes, indexed by entity id.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTable {
    pub columns: Vec<String>,
    /// `rows[id][k]` is the value of `columns[k]` for entity `id`.
    pub rows: Vec<Vec<String>>,
}

impl AttributeTable {
    /// Table with every entity present and every attribute unknown.
    pub fn empty(num_entities: usize, columns: Vec<String>) -> Self {
        let rows = vec![vec![UNKNOWN.to_string(); columns.len()]; num_entities];
        AttributeTable { columns, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        let key = normalize_column(name);
        self.columns.iter().position(|c| normalize_column(c) == key)
    }

    pub fn value(&self, entity: usize, column: usize) -> &str {
        &self.rows[entity][column]
    }
}

fn normalize_column(name: &str) -> String {
    name.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

fn normalize_value(raw: Option<&str>) -> String {
    match raw.map(str::trim) {
        None | Some("") => UNKNOWN.to_string(),
        Some(v) if v.eq_ignore_ascii_case("null") || v.eq_ignore_ascii_case(UNKNOWN) => {
            UNKNOWN.to_string()
        }
        Some(v) => v.to_string(),
    }
}

/// Load an entity attribute file.
///
/// The first non-empty line is a header; the first column holds the entity
/// id. The delimiter is tab when the header contains one, comma otherwise.
/// Lines made only of `=` (the WSDream separator) are skipped. Entities
/// missing from the file get an all-unknown row.
pub fn load_entity_attributes(
    path: impl AsRef<Path>,
    schema: &[String],
    num_entities: usize,
) -> Result<AttributeTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_entity_attributes(&text, path, schema, num_entities)
}

pub fn parse_entity_attributes(
    text: &str,
    path: &Path,
    schema: &[String],
    num_entities: usize,
) -> Result<AttributeTable> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('='));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Shape(format!("{}: empty attribute file", path.display())))?;
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let header: Vec<String> = header.split(delim).map(normalize_column).collect();
    let picks = schema
        .iter()
        .map(|name| {
            let key = normalize_column(name);
            header.iter().position(|h| *h == key).ok_or_else(|| {
                Error::Config(format!("{}: no column named `{name}`", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<Option<Vec<String>>> = vec![None; num_entities];
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(delim).collect();
        let id: usize = fields[0].trim().parse().map_err(|_| {
            parse_err(path, i + 1, format!("invalid entity id `{}`", fields[0].trim()))
        })?;
        if id >= num_entities {
            return Err(Error::Index(format!(
                "{}: line {}: entity id {id} out of range [0, {num_entities})",
                path.display(),
                i + 1
            )));
        }
        if rows[id].is_some() {
            return Err(Error::Conflict(format!(
                "{}: line {}: duplicate entity id {id}",
                path.display(),
                i + 1
            )));
        }
        rows[id] = Some(
            picks
                .iter()
                .map(|&c| normalize_value(fields.get(c).copied()))
                .collect(),
        );
    }
    let missing = rows.iter().filter(|r| r.is_none()).count();
    if missing > 0 {
        log::warn!("{}: {missing} entities absent, attributes set to unknown", path.display());
    }
    Ok(AttributeTable {
        columns: schema.to_vec(),
        rows: rows
            .into_iter()
            .map(|r| r.unwrap_or_else(|| vec![UNKNOWN.to_string(); schema.len()]))
            .collect(),
    })
}

/// Locations of the WSDream dataset #1 files inside a directory.
#[derive(Clone, Debug)]
pub struct WsdreamFiles {
    pub rt_matrix: PathBuf,
    pub tp_matrix: PathBuf,
    pub user_list: PathBuf,
    pub service_list: PathBuf,
}

impl WsdreamFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        WsdreamFiles {
            rt_matrix: dir.join("rtMatrix.txt"),
            tp_matrix: dir.join("tpMatrix.txt"),
            user_list: dir.join("userlist.txt"),
            service_list: dir.join("wslist.txt"),
        }
    }

    pub fn exist(&self) -> bool {
        [&self.rt_matrix, &self.user_list, &self.service_list]
            .iter()
            .all(|p| p.is_file())
    }
}

pub fn default_user_schema() -> Vec<String> {
    vec!["Country".into(), "AS".into()]
}

pub fn default_service_schema() -> Vec<String> {
    vec!["Country".into(), "AS".into(), "Service Provider".into()]
}
