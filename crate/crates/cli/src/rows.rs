//! Row parsing with per-column diagnostics, and JSON views of tables and
//! counterfactual results shared by the CLI and the HTTP service.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use tabcf_core::checkpoint::TableMeta;
use tabcf_core::guidance::{CounterfactualSet, GuidingLossBreakdown};
use tabcf_core::metrics::{CounterfactualReport, RowRecord};
use tabcf_core::tabular::{decode_row, ColumnKind, EncodedRow, Row, Value};

/// One problem with one input column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnIssue {
    pub column: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid row: {}", describe(.issues))]
pub struct RowError {
    pub issues: Vec<ColumnIssue>,
}

fn describe(issues: &[ColumnIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("{}: {}", i.column, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

fn issue(column: &str, message: impl Into<String>) -> ColumnIssue {
    ColumnIssue {
        column: column.to_string(),
        message: message.into(),
    }
}

/// Parses a `{column: value}` object. Every feature column must be present;
/// the label column is ignored if given. All problems are reported at once.
pub fn parse_row_object(obj: &Map<String, Json>, table: &TableMeta) -> Result<EncodedRow, RowError> {
    let mut issues = vec![];
    for key in obj.keys() {
        if key != &table.label_name && table.schema.index_of(key).is_none() {
            issues.push(issue(key, "unknown column"));
        }
    }
    let mut ids = Vec::with_capacity(table.schema.len());
    for (c, col) in table.schema.columns.iter().enumerate() {
        let Some(raw) = obj.get(&col.name) else {
            issues.push(issue(&col.name, "missing value"));
            continue;
        };
        match col.kind {
            ColumnKind::Numeric => {
                let v = match raw {
                    Json::Number(n) => n.as_f64(),
                    Json::String(s) => s.trim().parse::<f64>().ok(),
                    _ => None,
                };
                match v {
                    Some(v) if v.is_finite() => ids.push(col.bin_of(v)),
                    _ => issues.push(issue(&col.name, format!("expected a finite number, got {raw}"))),
                }
            }
            ColumnKind::Categorical => {
                let text = match raw {
                    Json::String(s) => s.clone(),
                    Json::Number(n) => n.to_string(),
                    Json::Bool(b) => b.to_string(),
                    _ => {
                        issues.push(issue(&col.name, format!("expected a category, got {raw}")));
                        continue;
                    }
                };
                match table.vocab.id(c, &text) {
                    Some(id) => ids.push(id),
                    None => issues.push(issue(
                        &col.name,
                        format!(
                            "unknown value `{text}`; expected one of {}",
                            table.vocab.values(c).join(", ")
                        ),
                    )),
                }
            }
        }
    }
    if issues.is_empty() {
        Ok(EncodedRow::new(ids))
    } else {
        Err(RowError { issues })
    }
}

/// Parses comma-separated feature values in schema order.
pub fn parse_row_fields(text: &str, table: &TableMeta) -> Result<EncodedRow, RowError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let fields: Vec<String> = match reader.records().next() {
        Some(Ok(r)) => r.iter().map(str::to_string).collect(),
        _ => vec![],
    };
    if fields.len() != table.schema.len() {
        return Err(RowError {
            issues: vec![issue(
                "*",
                format!(
                    "expected {} comma-separated values ({}), got {}",
                    table.schema.len(),
                    column_names(table).join(","),
                    fields.len()
                ),
            )],
        });
    }
    let obj = column_names(table)
        .into_iter()
        .zip(fields)
        .map(|(k, v)| (k, Json::String(v)))
        .collect();
    parse_row_object(&obj, table)
}

/// Parses a CSV with a header naming feature columns (extra label column
/// allowed). Errors carry the 1-based data line.
pub fn parse_rows_csv(text: &str, table: &TableMeta) -> Result<Vec<EncodedRow>, RowError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| RowError {
            issues: vec![issue("*", e.to_string())],
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut out = vec![];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| RowError {
            issues: vec![issue("*", format!("line {}: {e}", i + 1))],
        })?;
        let obj = header
            .iter()
            .cloned()
            .zip(rec.iter().map(|v| Json::String(v.to_string())))
            .collect();
        out.push(parse_row_object(&obj, table).map_err(|mut e| {
            for is in &mut e.issues {
                is.message = format!("line {}: {}", i + 1, is.message);
            }
            e
        })?);
    }
    Ok(out)
}

pub fn column_names(table: &TableMeta) -> Vec<String> {
    table.schema.columns.iter().map(|c| c.name.clone()).collect()
}

fn value_json(v: &Value) -> Json {
    match v {
        Value::Number(x) => serde_json::json!(x),
        Value::Text(s) => Json::String(s.clone()),
    }
}

/// `{column: value}` object for a decoded row.
pub fn row_object(row: &Row, table: &TableMeta) -> Map<String, Json> {
    table
        .schema
        .columns
        .iter()
        .zip(&row.values)
        .map(|(c, v)| (c.name.clone(), value_json(v)))
        .collect()
}

pub fn encoded_object(row: &EncodedRow, table: &TableMeta) -> tabcf_core::Result<Map<String, Json>> {
    Ok(row_object(&decode_row(row, &table.vocab, &table.schema)?, table))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinView {
    pub lower: f64,
    pub upper: f64,
    pub representative: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColumnView {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bins: Vec<BinView>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaView {
    pub digest: String,
    pub label: String,
    pub classes: Vec<String>,
    pub columns: Vec<ColumnView>,
}

pub fn schema_view(table: &TableMeta) -> SchemaView {
    let columns = table
        .schema
        .columns
        .iter()
        .enumerate()
        .map(|(c, col)| match col.kind {
            ColumnKind::Categorical => ColumnView {
                name: col.name.clone(),
                kind: col.kind,
                values: table.vocab.values(c).to_vec(),
                bins: vec![],
            },
            ColumnKind::Numeric => ColumnView {
                name: col.name.clone(),
                kind: col.kind,
                values: vec![],
                bins: col
                    .bin_representatives
                    .iter()
                    .enumerate()
                    .map(|(b, &r)| BinView {
                        lower: col.bin_edges[b],
                        upper: col.bin_edges[b + 1],
                        representative: r,
                    })
                    .collect(),
            },
        })
        .collect();
    SchemaView {
        digest: table.digest(),
        label: table.label_name.clone(),
        classes: table.classes.clone(),
        columns,
    }
}

/// One counterfactual row with its per-row metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CounterfactualRowView {
    pub values: Map<String, Json>,
    pub encoded: EncodedRow,
    pub predicted_label: String,
    pub valid: bool,
    pub mismatch: f64,
    pub ar_nll_recurrent: f64,
    pub ar_nll_transformer: f64,
    /// Columns whose value differs from the input.
    pub changed: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationView {
    pub method: String,
    pub seed: u64,
    pub desired_label: String,
    pub input: Map<String, Json>,
    pub rows: Vec<CounterfactualRowView>,
    pub report: CounterfactualReport,
    pub loss_trace: Vec<GuidingLossBreakdown>,
}

pub fn generation_view(
    table: &TableMeta,
    x: &EncodedRow,
    desired: usize,
    set: &CounterfactualSet,
    report: CounterfactualReport,
) -> tabcf_core::Result<GenerationView> {
    let rows = report
        .records
        .iter()
        .map(|r: &RowRecord| {
            Ok(CounterfactualRowView {
                values: encoded_object(&r.encoded, table)?,
                encoded: r.encoded.clone(),
                predicted_label: table.classes[r.predicted].clone(),
                valid: r.predicted == desired,
                mismatch: r.mismatch,
                ar_nll_recurrent: r.ar_nll_recurrent,
                ar_nll_transformer: r.ar_nll_transformer,
                changed: table
                    .schema
                    .columns
                    .iter()
                    .zip(r.encoded.ids.iter().zip(&x.ids))
                    .filter(|(_, (a, b))| a != b)
                    .map(|(c, _)| c.name.clone())
                    .collect(),
            })
        })
        .collect::<tabcf_core::Result<_>>()?;
    Ok(GenerationView {
        method: report.method.clone(),
        seed: set.seed,
        desired_label: table.classes[desired].clone(),
        input: encoded_object(x, table)?,
        rows,
        report,
        loss_trace: set.loss_trace.clone(),
    })
}
