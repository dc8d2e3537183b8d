//! Records, datasets, delimited-file ingestion and oracle budget accounting.
//!
//! A [`Dataset`] is stored column-wise: one statistic column, one boolean
//! column per oracle predicate and one score column per proxy. [`Record`] is
//! the row view used at API boundaries.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AbaeError, Result};
use crate::predicate::{BoundPredicate, PredicateExpr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub statistic: f64,
    pub oracle_labels: BTreeMap<String, bool>,
    pub proxy_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Column<T> {
    name: String,
    values: Vec<T>,
}

/// Immutable table of records with dense ids `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    statistics: Vec<f64>,
    labels: Vec<Column<bool>>,
    proxies: Vec<Column<f64>>,
    label_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from columns, validating every record invariant.
    pub fn new(
        name: impl Into<String>,
        statistics: Vec<f64>,
        labels: Vec<(String, Vec<bool>)>,
        proxies: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let n = statistics.len();
        if let Some(row) = statistics.iter().position(|v| !v.is_finite()) {
            return Err(AbaeError::Validation {
                row,
                message: format!("statistic is not finite: {}", statistics[row]),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for (col, len) in labels
            .iter()
            .map(|(c, v)| (c, v.len()))
            .chain(proxies.iter().map(|(c, v)| (c, v.len())))
        {
            if len != n {
                return Err(AbaeError::Schema(format!(
                    "column `{col}` has {len} values but the statistic column has {n}"
                )));
            }
        }
        for (name, _) in &labels {
            if !seen.insert(("label", name.clone())) {
                return Err(AbaeError::Schema(format!("duplicate label `{name}`")));
            }
        }
        for (name, values) in &proxies {
            if !seen.insert(("proxy", name.clone())) {
                return Err(AbaeError::Schema(format!("duplicate proxy `{name}`")));
            }
            validate_scores(name, values)?;
        }
        let label_names = labels.iter().map(|(n, _)| n.clone()).collect();
        Ok(Dataset {
            name: name.into(),
            statistics,
            labels: labels
                .into_iter()
                .map(|(name, values)| Column { name, values })
                .collect(),
            proxies: proxies
                .into_iter()
                .map(|(name, values)| Column { name, values })
                .collect(),
            label_names,
        })
    }

    /// Builds a dataset from row records. Ids must be `0..n` in order and every
    /// record must carry the same label and proxy keys.
    pub fn from_records(name: impl Into<String>, records: Vec<Record>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Dataset::new(name, Vec::new(), Vec::new(), Vec::new());
        };
        let label_keys: Vec<String> = first.oracle_labels.keys().cloned().collect();
        let proxy_keys: Vec<String> = first.proxy_scores.keys().cloned().collect();
        let mut statistics = Vec::with_capacity(records.len());
        let mut labels = vec![Vec::with_capacity(records.len()); label_keys.len()];
        let mut proxies = vec![Vec::with_capacity(records.len()); proxy_keys.len()];
        for (row, r) in records.iter().enumerate() {
            if r.id != row {
                return Err(AbaeError::Validation {
                    row,
                    message: format!("record id {} is not dense (expected {row})", r.id),
                });
            }
            if !r.oracle_labels.keys().eq(label_keys.iter())
                || !r.proxy_scores.keys().eq(proxy_keys.iter())
            {
                return Err(AbaeError::Validation {
                    row,
                    message: "label or proxy keys differ from the first record".into(),
                });
            }
            statistics.push(r.statistic);
            for (col, v) in labels.iter_mut().zip(r.oracle_labels.values()) {
                col.push(*v);
            }
            for (col, v) in proxies.iter_mut().zip(r.proxy_scores.values()) {
                col.push(*v);
            }
        }
        Dataset::new(
            name,
            statistics,
            label_keys.into_iter().zip(labels).collect(),
            proxy_keys.into_iter().zip(proxies).collect(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.statistics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statistics.is_empty()
    }

    /// Ground-truth statistic. Estimators read this only after a positive
    /// oracle result for the same record.
    pub fn statistic(&self, id: usize) -> f64 {
        self.statistics[id]
    }

    pub fn statistics(&self) -> &[f64] {
        &self.statistics
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn proxy_names(&self) -> Vec<String> {
        self.proxies.iter().map(|c| c.name.clone()).collect()
    }

    pub fn label_column(&self, name: &str) -> Option<&[bool]> {
        self.labels
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.label_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| AbaeError::Unbound(name.to_owned()))
    }

    pub(crate) fn label_at(&self, column: usize, id: usize) -> bool {
        self.labels[column].values[id]
    }

    pub fn proxy_column(&self, name: &str) -> Option<&[f64]> {
        self.proxies
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn proxy(&self, name: &str) -> Result<&[f64]> {
        self.proxy_column(name)
            .ok_or_else(|| AbaeError::Unbound(name.to_owned()))
    }

    /// Returns a copy with an extra proxy column (for combined scores).
    pub fn with_proxy(&self, name: impl Into<String>, scores: Vec<f64>) -> Result<Dataset> {
        let name = name.into();
        if scores.len() != self.len() {
            return Err(AbaeError::DimensionMismatch {
                expected: self.len(),
                got: scores.len(),
            });
        }
        if self.proxy_column(&name).is_some() {
            return Err(AbaeError::Schema(format!("duplicate proxy `{name}`")));
        }
        validate_scores(&name, &scores)?;
        let mut out = self.clone();
        out.proxies.push(Column {
            name,
            values: scores,
        });
        Ok(out)
    }

    pub fn record(&self, id: usize) -> Record {
        Record {
            id,
            statistic: self.statistics[id],
            oracle_labels: self
                .labels
                .iter()
                .map(|c| (c.name.clone(), c.values[id]))
                .collect(),
            proxy_scores: self
                .proxies
                .iter()
                .map(|c| (c.name.clone(), c.values[id]))
                .collect(),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Resolves a predicate's base names against the oracle label columns.
    pub fn bind_predicate(&self, expr: &PredicateExpr) -> Result<BoundPredicate> {
        expr.bind(&self.label_names)
    }

    /// Per-record score of `expr` under the proxy-score calculus, with each
    /// base name resolved to the proxy column of the same name.
    pub fn expression_scores(&self, expr: &PredicateExpr) -> Result<Vec<f64>> {
        let names: Vec<String> = self.proxy_names();
        let bound = expr.bind(&names)?;
        Ok((0..self.len())
            .map(|i| bound.score(|c| self.proxies[c].values[i]).clamp(0.0, 1.0))
            .collect())
    }

    /// Exhaustive evaluation of the oracle over the whole table, bypassing the
    /// ledger. Used for ground truth only.
    pub fn matches(&self, expr: &PredicateExpr) -> Result<Vec<bool>> {
        let bound = self.bind_predicate(expr)?;
        Ok((0..self.len())
            .map(|i| bound.eval(|c| self.labels[c].values[i]))
            .collect())
    }
}

fn validate_scores(name: &str, values: &[f64]) -> Result<()> {
    if let Some(row) = values.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(AbaeError::Validation {
            row,
            message: format!("proxy `{name}` score {} is outside [0, 1]", values[row]),
        });
    }
    Ok(())
}

/// Column roles for delimited files. Label and proxy entries map a logical
/// name to a header column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub statistic_col: String,
    #[serde(default)]
    pub label_cols: Vec<(String, String)>,
    #[serde(default)]
    pub proxy_cols: Vec<(String, String)>,
    #[serde(default = "default_delimiter")]
    pub delimiter: u8,
}

fn default_delimiter() -> u8 {
    b','
}

impl Schema {
    pub fn new(statistic_col: impl Into<String>) -> Self {
        Schema {
            statistic_col: statistic_col.into(),
            label_cols: Vec::new(),
            proxy_cols: Vec::new(),
            delimiter: b',',
        }
    }

    pub fn label(mut self, name: impl Into<String>, column: impl Into<String>) -> Self {
        self.label_cols.push((name.into(), column.into()));
        self
    }

    pub fn proxy(mut self, name: impl Into<String>, column: impl Into<String>) -> Self {
        self.proxy_cols.push((name.into(), column.into()));
        self
    }

    pub fn tab_separated(mut self) -> Self {
        self.delimiter = b'\t';
        self
    }

    /// Default column naming used when writing a dataset without an explicit
    /// schema: `statistic`, `label_<name>`, `proxy_<name>`.
    pub fn for_dataset(dataset: &Dataset) -> Self {
        let mut schema = Schema::new("statistic");
        for n in dataset.label_names() {
            schema = schema.label(n.clone(), format!("label_{n}"));
        }
        for n in dataset.proxy_names() {
            schema = schema.proxy(n.clone(), format!("proxy_{n}"));
        }
        schema
    }
}

/// Parses a `name=column` mapping as given on the command line.
pub fn parse_mapping(spec: &str) -> Result<(String, String)> {
    match spec.split_once('=') {
        Some((name, col)) if !name.is_empty() && !col.is_empty() => {
            Ok((name.to_owned(), col.to_owned()))
        }
        _ => Err(AbaeError::config(format!(
            "expected NAME=COLUMN, got `{spec}`"
        ))),
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_owned();
    read_dataset(File::open(path)?, schema, name)
}

pub fn read_dataset(
    reader: impl Read,
    schema: &Schema,
    name: impl Into<String>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |col: &str| {
        headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| AbaeError::Schema(format!("missing column `{col}`")))
    };
    let stat_idx = find(&schema.statistic_col)?;
    let label_idx: Vec<usize> = schema
        .label_cols
        .iter()
        .map(|(_, c)| find(c))
        .collect::<Result<_>>()?;
    let proxy_idx: Vec<usize> = schema
        .proxy_cols
        .iter()
        .map(|(_, c)| find(c))
        .collect::<Result<_>>()?;

    let mut statistics = Vec::new();
    let mut labels = vec![Vec::new(); label_idx.len()];
    let mut proxies = vec![Vec::new(); proxy_idx.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let stat: f64 = field(stat_idx).parse().map_err(|_| AbaeError::Validation {
            row,
            message: format!("statistic `{}` is not a number", field(stat_idx)),
        })?;
        if !stat.is_finite() {
            return Err(AbaeError::Validation {
                row,
                message: format!("statistic is not finite: {stat}"),
            });
        }
        statistics.push(stat);
        for ((col, &i), (name, _)) in labels.iter_mut().zip(&label_idx).zip(&schema.label_cols) {
            let v = match field(i) {
                "0" => false,
                "1" => true,
                other => {
                    return Err(AbaeError::Validation {
                        row,
                        message: format!("label `{name}` must be 0 or 1, got `{other}`"),
                    })
                }
            };
            col.push(v);
        }
        for ((col, &i), (name, _)) in proxies.iter_mut().zip(&proxy_idx).zip(&schema.proxy_cols) {
            let s: f64 = field(i).parse().map_err(|_| AbaeError::Validation {
                row,
                message: format!("proxy `{name}` value `{}` is not a number", field(i)),
            })?;
            if !(0.0..=1.0).contains(&s) {
                return Err(AbaeError::Validation {
                    row,
                    message: format!("proxy `{name}` score {s} is outside [0, 1]"),
                });
            }
            col.push(s);
        }
    }
    Dataset::new(
        name,
        statistics,
        schema
            .label_cols
            .iter()
            .map(|(n, _)| n.clone())
            .zip(labels)
            .collect(),
        schema
            .proxy_cols
            .iter()
            .map(|(n, _)| n.clone())
            .zip(proxies)
            .collect(),
    )
}

/// Writes the columns named by `schema`, in schema order.
pub fn write_dataset(dataset: &Dataset, writer: impl Write, schema: &Schema) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(schema.delimiter)
        .from_writer(writer);
    let labels: Vec<&[bool]> = schema
        .label_cols
        .iter()
        .map(|(n, _)| {
            dataset
                .label_column(n)
                .ok_or_else(|| AbaeError::Unbound(n.clone()))
        })
        .collect::<Result<_>>()?;
    let proxies: Vec<&[f64]> = schema
        .proxy_cols
        .iter()
        .map(|(n, _)| dataset.proxy(n))
        .collect::<Result<_>>()?;

    let mut header = vec![schema.statistic_col.as_str()];
    header.extend(schema.label_cols.iter().map(|(_, c)| c.as_str()));
    header.extend(schema.proxy_cols.iter().map(|(_, c)| c.as_str()));
    wtr.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..dataset.len() {
        row.clear();
        row.push(dataset.statistic(i).to_string());
        row.extend(
            labels
                .iter()
                .map(|c| if c[i] { "1".to_owned() } else { "0".to_owned() }),
        );
        row.extend(proxies.iter().map(|c| c[i].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>, schema: &Schema) -> Result<()> {
    let file = std::io::BufWriter::new(File::create(path)?);
    write_dataset(dataset, file, schema)
}

/// Counts simulated oracle invocations against a fixed allowance.
///
/// Each (record, base predicate) pair is charged at most once; repeated
/// lookups are served from the cache.
#[derive(Debug, Clone, Serialize)]
pub struct OracleLedger {
    calls_allowed: usize,
    calls_made: usize,
    per_predicate_calls: BTreeMap<String, usize>,
    #[serde(skip)]
    cache: HashMap<(usize, usize), bool>,
}

impl OracleLedger {
    pub fn new(calls_allowed: usize) -> Self {
        OracleLedger {
            calls_allowed,
            calls_made: 0,
            per_predicate_calls: BTreeMap::new(),
            cache: HashMap::new(),
        }
    }

    pub fn calls_made(&self) -> usize {
        self.calls_made
    }

    pub fn calls_allowed(&self) -> usize {
        self.calls_allowed
    }

    pub fn remaining(&self) -> usize {
        self.calls_allowed - self.calls_made
    }

    pub fn per_predicate_calls(&self) -> &BTreeMap<String, usize> {
        &self.per_predicate_calls
    }

    /// Whether `record` has already been charged for any label column.
    pub fn is_charged(&self, record: usize, bases: &[usize]) -> bool {
        bases.iter().all(|&b| self.cache.contains_key(&(record, b)))
    }

    /// Evaluates `predicate` for `record`, charging each uncached base
    /// predicate once. Nothing is charged if the remaining allowance cannot
    /// cover every uncached base.
    pub fn evaluate(
        &mut self,
        dataset: &Dataset,
        record: usize,
        predicate: &BoundPredicate,
    ) -> Result<bool> {
        let uncached = predicate
            .bases()
            .iter()
            .filter(|&&b| !self.cache.contains_key(&(record, b)))
            .count();
        if self.calls_made + uncached > self.calls_allowed {
            return Err(AbaeError::BudgetExceeded {
                ledger: Box::new(self.clone()),
            });
        }
        for &b in predicate.bases() {
            if let std::collections::hash_map::Entry::Vacant(slot) = self.cache.entry((record, b)) {
                slot.insert(dataset.label_at(b, record));
                self.calls_made += 1;
                let name = &dataset.label_names()[b];
                match self.per_predicate_calls.get_mut(name) {
                    Some(count) => *count += 1,
                    None => {
                        self.per_predicate_calls.insert(name.clone(), 1);
                    }
                }
            }
        }
        Ok(predicate.eval(|b| self.cache[&(record, b)]))
    }
}

impl OracleLedger {
    /// Label of `column` for `record` if it has been paid for.
    pub fn revealed(&self, record: usize, column: usize) -> Option<bool> {
        self.cache.get(&(record, column)).copied()
    }

    fn charge(&mut self, name: &str, calls: usize) -> Result<()> {
        if self.calls_made + calls > self.calls_allowed {
            return Err(AbaeError::BudgetExceeded {
                ledger: Box::new(self.clone()),
            });
        }
        self.calls_made += calls;
        *self.per_predicate_calls.entry(name.to_owned()).or_insert(0) += calls;
        Ok(())
    }

    /// Evaluates a single label column, charging one call unless cached.
    pub fn evaluate_column(
        &mut self,
        dataset: &Dataset,
        record: usize,
        column: usize,
    ) -> Result<bool> {
        if let Some(v) = self.revealed(record, column) {
            return Ok(v);
        }
        self.charge(&dataset.label_names()[column], 1)?;
        let v = dataset.label_at(column, record);
        self.cache.insert((record, column), v);
        Ok(v)
    }

    /// Reveals every column in `columns` for one call charged under `name`,
    /// modelling an oracle that returns the record's group key. Free if the
    /// record was already revealed.
    pub fn evaluate_key(
        &mut self,
        dataset: &Dataset,
        record: usize,
        columns: &[usize],
        name: &str,
    ) -> Result<()> {
        if columns
            .iter()
            .all(|&c| self.cache.contains_key(&(record, c)))
        {
            return Ok(());
        }
        self.charge(name, 1)?;
        for &c in columns {
            self.cache.insert((record, c), dataset.label_at(c, record));
        }
        Ok(())
    }
}

/// Evaluates `predicate` on one record through the ledger.
pub fn oracle_eval(
    ledger: &mut OracleLedger,
    dataset: &Dataset,
    record: usize,
    predicate: &PredicateExpr,
) -> Result<bool> {
    let bound = dataset.bind_predicate(predicate)?;
    ledger.evaluate(dataset, record, &bound)
}
