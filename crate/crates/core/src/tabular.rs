//! Column schemas, vocabularies, numeric binning and row encoding.
//!
//! Every column, categorical or numeric, is reduced to a dense integer id in
//! `0..cardinality`. Categorical ids enumerate observed values in first-seen
//! order; numeric columns are cut into bins and the id is the bin index.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Quantile bins with (near) equal occupancy.
    #[default]
    EqualFrequency,
    EqualWidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Ascending bin boundaries, `bin_count + 1` of them. Empty for categoricals.
    pub bin_edges: Vec<f64>,
    /// One representative value per bin (the bin median of training values).
    pub bin_representatives: Vec<f64>,
}

impl ColumnSchema {
    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            bin_edges: vec![],
            bin_representatives: vec![],
        }
    }

    pub fn bin_count(&self) -> usize {
        self.bin_representatives.len()
    }

    /// Bin index for a numeric value. Intervals are half-open
    /// `[edge_i, edge_{i+1})`, the last one closed; out-of-range values clamp.
    pub fn bin_of(&self, value: f64) -> usize {
        let bins = self.bin_count();
        // Interior edges are bin_edges[1..bins]; count those <= value.
        self.bin_edges[1..bins].partition_point(|&e| e <= value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSchema>,
}

impl Schema {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// Per-column bijection between value text and dense ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    values: Vec<Vec<String>>,
    #[serde(skip)]
    index: Vec<HashMap<String, usize>>,
}

impl Vocabulary {
    pub fn new(values: Vec<Vec<String>>) -> Result<Self> {
        let mut index = Vec::with_capacity(values.len());
        for (c, col) in values.iter().enumerate() {
            let map: HashMap<String, usize> =
                col.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
            if map.len() != col.len() {
                return Err(Error::InvalidArgument(format!(
                    "column {c} vocabulary has duplicate entries"
                )));
            }
            index.push(map);
        }
        Ok(Self { values, index })
    }

    /// Rebuilds the reverse index after deserialization.
    pub fn reindexed(self) -> Result<Self> {
        Self::new(self.values)
    }

    pub fn columns(&self) -> usize {
        self.values.len()
    }

    pub fn cardinality(&self, column: usize) -> usize {
        self.values[column].len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.values.iter().map(Vec::len).collect()
    }

    pub fn values(&self, column: usize) -> &[String] {
        &self.values[column]
    }

    pub fn id(&self, column: usize, value: &str) -> Option<usize> {
        self.index[column].get(value).copied()
    }

    pub fn value(&self, column: usize, id: usize) -> Option<&str> {
        self.values[column].get(id).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{v}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

/// Human-readable row: text for categorical columns, reals for numeric ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Row {
    pub values: Vec<Value>,
}

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Self { values }
    }

    /// Parses raw text fields according to the schema's column kinds.
    pub fn parse(schema: &Schema, fields: &[impl AsRef<str>]) -> Result<Self> {
        if fields.len() != schema.len() {
            return Err(Error::FieldCount {
                row: 0,
                found: fields.len(),
                expected: schema.len(),
            });
        }
        let values = schema
            .columns
            .iter()
            .zip(fields)
            .map(|(col, f)| {
                let f = f.as_ref().trim();
                match col.kind {
                    ColumnKind::Categorical => Ok(Value::Text(f.to_string())),
                    ColumnKind::Numeric => f.parse::<f64>().map(Value::Number).map_err(|_| {
                        Error::Parse {
                            row: 0,
                            column: col.name.clone(),
                            value: f.to_string(),
                        }
                    }),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { values })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncodedRow {
    pub ids: Vec<usize>,
}

impl EncodedRow {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Computes bin edges and per-bin medians for one numeric column.
pub fn bin_column(values: &[f64], bin_count: usize, binning: Binning) -> Result<(Vec<f64>, Vec<f64>)> {
    if bin_count == 0 {
        return Err(Error::InvalidArgument("bin_count must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Ok((vec![lo - 0.5, hi + 0.5], vec![lo]));
    }
    let n = sorted.len();
    let mut edges = vec![lo];
    match binning {
        Binning::EqualFrequency => {
            for i in 1..bin_count {
                let cut = sorted[i * n / bin_count];
                // Ties can repeat a cut; merging keeps the edges strictly ascending.
                if cut > *edges.last().unwrap() && cut < hi {
                    edges.push(cut);
                }
            }
        }
        Binning::EqualWidth => {
            let width = (hi - lo) / bin_count as f64;
            edges.extend((1..bin_count).map(|i| lo + width * i as f64));
        }
    }
    edges.push(hi);
    let bins = edges.len() - 1;
    let mut members: Vec<Vec<f64>> = vec![vec![]; bins];
    for &v in &sorted {
        let b = edges[1..bins].partition_point(|&e| e <= v);
        members[b].push(v);
    }
    let reps = members
        .iter()
        .enumerate()
        .map(|(b, m)| {
            if m.is_empty() {
                0.5 * (edges[b] + edges[b + 1])
            } else {
                median(m)
            }
        })
        .collect();
    Ok((edges, reps))
}

/// Builds the schema and vocabulary from raw text records.
pub fn infer_schema(
    records: &[Vec<String>],
    header: &[String],
    numeric_columns: &HashSet<String>,
    bin_count: usize,
    binning: Binning,
) -> Result<(Schema, Vocabulary)> {
    if records.is_empty() {
        return Err(Error::EmptyTable);
    }
    if bin_count == 0 {
        return Err(Error::InvalidArgument("bin_count must be at least 1".into()));
    }
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(Error::FieldCount {
                row: r,
                found: rec.len(),
                expected: header.len(),
            });
        }
    }
    let mut columns = Vec::with_capacity(header.len());
    let mut vocab = Vec::with_capacity(header.len());
    for (c, name) in header.iter().enumerate() {
        if numeric_columns.contains(name) {
            let values = records
                .iter()
                .enumerate()
                .map(|(r, rec)| {
                    let text = rec[c].trim();
                    text.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            row: r,
                            column: name.clone(),
                            value: text.to_string(),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            let (edges, reps) = bin_column(&values, bin_count, binning)?;
            vocab.push(reps.iter().map(|r| format!("{r}")).collect::<Vec<_>>());
            columns.push(ColumnSchema {
                name: name.clone(),
                kind: ColumnKind::Numeric,
                bin_edges: edges,
                bin_representatives: reps,
            });
        } else {
            let mut seen = HashSet::new();
            let mut values = vec![];
            for rec in records {
                let v = rec[c].trim();
                if seen.insert(v.to_string()) {
                    values.push(v.to_string());
                }
            }
            vocab.push(values);
            columns.push(ColumnSchema::categorical(name.clone()));
        }
    }
    Ok((Schema { columns }, Vocabulary::new(vocab)?))
}

pub fn encode_row(row: &Row, vocab: &Vocabulary, schema: &Schema) -> Result<EncodedRow> {
    if row.values.len() != schema.len() {
        return Err(shape_err(format!(
            "row has {} values, schema has {} columns",
            row.values.len(),
            schema.len()
        )));
    }
    let ids = schema
        .columns
        .iter()
        .zip(&row.values)
        .enumerate()
        .map(|(c, (col, value))| match (col.kind, value) {
            (ColumnKind::Numeric, Value::Number(v)) => Ok(col.bin_of(*v)),
            (ColumnKind::Numeric, Value::Text(t)) => t
                .trim()
                .parse::<f64>()
                .map(|v| col.bin_of(v))
                .map_err(|_| Error::Parse {
                    row: 0,
                    column: col.name.clone(),
                    value: t.clone(),
                }),
            (ColumnKind::Categorical, value) => {
                let text = value.to_string();
                vocab.id(c, &text).ok_or_else(|| Error::UnknownValue {
                    column: col.name.clone(),
                    value: text,
                })
            }
        })
        .collect::<Result<_>>()?;
    Ok(EncodedRow { ids })
}

pub fn decode_row(encoded: &EncodedRow, vocab: &Vocabulary, schema: &Schema) -> Result<Row> {
    check_ids(encoded, &vocab.cardinalities())?;
    let values = schema
        .columns
        .iter()
        .zip(&encoded.ids)
        .enumerate()
        .map(|(c, (col, &id))| match col.kind {
            ColumnKind::Numeric => Value::Number(col.bin_representatives[id]),
            ColumnKind::Categorical => Value::Text(vocab.values(c)[id].clone()),
        })
        .collect();
    Ok(Row { values })
}

/// Verifies every id is within its column's cardinality.
pub fn check_ids(encoded: &EncodedRow, cardinalities: &[usize]) -> Result<()> {
    if encoded.ids.len() != cardinalities.len() {
        return Err(shape_err(format!(
            "row has {} ids, expected {}",
            encoded.ids.len(),
            cardinalities.len()
        )));
    }
    for (column, (&id, &cardinality)) in encoded.ids.iter().zip(cardinalities).enumerate() {
        if id >= cardinality {
            return Err(Error::IdOutOfRange {
                column,
                id,
                cardinality,
            });
        }
    }
    Ok(())
}

/// Fraction of columns whose ids differ.
pub fn mismatch_distance(a: &EncodedRow, b: &EncodedRow) -> Result<f64> {
    if a.ids.len() != b.ids.len() {
        return Err(shape_err(format!(
            "rows of length {} and {}",
            a.ids.len(),
            b.ids.len()
        )));
    }
    if a.ids.is_empty() {
        return Ok(0.0);
    }
    let differing = a.ids.iter().zip(&b.ids).filter(|(x, y)| x != y).count();
    Ok(differing as f64 / a.ids.len() as f64)
}

/// SHA-256 over the canonical JSON of schema and vocabulary.
pub fn schema_digest(schema: &Schema, vocab: &Vocabulary) -> String {
    let json = serde_json::to_vec(&(schema, vocab)).expect("schema serializes");
    hex::encode(Sha256::digest(&json))
}

/// Encoded feature rows plus class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub rows: Vec<EncodedRow>,
    pub labels: Vec<usize>,
    /// Label column name and its position in the source table.
    pub label_name: String,
    pub label_column: usize,
    /// Class names; ids index into this.
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableOptions {
    pub numeric_columns: Vec<String>,
    pub label_column: String,
    pub bin_count: usize,
    #[serde(default)]
    pub binning: Binning,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn digest(&self) -> String {
        schema_digest(&self.schema, &self.vocab)
    }

    pub fn decode(&self, row: &EncodedRow) -> Result<Row> {
        decode_row(row, &self.vocab, &self.schema)
    }

    pub fn encode(&self, row: &Row) -> Result<EncodedRow> {
        encode_row(row, &self.vocab, &self.schema)
    }

    /// Builds a dataset from a header and text records; the label column is
    /// split off and its distinct values become the classes.
    pub fn from_records(header: &[String], records: &[Vec<String>], options: &TableOptions) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyTable);
        }
        let label_column = header
            .iter()
            .position(|h| *h == options.label_column)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no label column `{}`", options.label_column))
            })?;
        for (r, rec) in records.iter().enumerate() {
            if rec.len() != header.len() {
                return Err(Error::FieldCount {
                    row: r,
                    found: rec.len(),
                    expected: header.len(),
                });
            }
        }
        let strip = |rec: &[String]| -> Vec<String> {
            rec.iter()
                .enumerate()
                .filter(|&(c, _)| c != label_column)
                .map(|(_, v)| v.clone())
                .collect()
        };
        let feature_header = strip(header);
        let features: Vec<Vec<String>> = records.iter().map(|r| strip(r)).collect();
        let numeric: HashSet<String> = options.numeric_columns.iter().cloned().collect();
        let (schema, vocab) =
            infer_schema(&features, &feature_header, &numeric, options.bin_count, options.binning)?;

        let mut classes: Vec<String> = vec![];
        let mut labels = Vec::with_capacity(records.len());
        for rec in records {
            let l = rec[label_column].trim();
            let id = match classes.iter().position(|c| c == l) {
                Some(id) => id,
                None => {
                    classes.push(l.to_string());
                    classes.len() - 1
                }
            };
            labels.push(id);
        }
        if classes.len() < 2 {
            return Err(Error::InvalidArgument(
                "label column needs at least two classes".into(),
            ));
        }
        let rows = features
            .iter()
            .enumerate()
            .map(|(r, f)| {
                let row = Row::parse(&schema, f).map_err(|e| match e {
                    Error::Parse { column, value, .. } => Error::Parse { row: r, column, value },
                    other => other,
                })?;
                encode_row(&row, &vocab, &schema)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            schema,
            vocab,
            rows,
            labels,
            label_name: options.label_column.clone(),
            label_column,
            classes,
        })
    }

    pub fn from_csv_reader(reader: impl Read, options: &TableOptions) -> Result<Self> {
        let (header, records) = read_csv(reader)?;
        Self::from_records(&header, &records, options)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, options: &TableOptions) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, options)
    }
}

/// Reads a comma-delimited UTF-8 table whose first line is the header.
pub fn read_csv(reader: impl Read) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut records = vec![];
    for rec in rdr.records() {
        records.push(rec?.iter().map(str::to_string).collect());
    }
    if records.is_empty() {
        return Err(Error::EmptyTable);
    }
    Ok((header, records))
}
