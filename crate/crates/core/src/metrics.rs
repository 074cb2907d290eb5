//! Validity, proximity, diversity and plausibility of counterfactual sets.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArPlausibilityModel, ClassifierNet, EmbeddingDictionary};
use crate::tabular::{mismatch_distance, EncodedRow};

fn non_empty(rows: &[EncodedRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no counterfactual rows".into()));
    }
    Ok(())
}

/// Predicted class of each row.
pub fn predictions(rows: &[EncodedRow], f: &ClassifierNet, dict: &EmbeddingDictionary) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Ok(vec![]);
    }
    let z = dict.embed_rows(rows)?;
    f.predict(&z.reshape(&[rows.len(), dict.row_width()])?)
}

/// Fraction of rows the classifier assigns to `y_prime`.
pub fn validity_score(
    rows: &[EncodedRow],
    f: &ClassifierNet,
    y_prime: usize,
    dict: &EmbeddingDictionary,
) -> Result<f64> {
    non_empty(rows)?;
    let hits = predictions(rows, f, dict)?
        .iter()
        .filter(|&&p| p == y_prime)
        .count();
    Ok(hits as f64 / rows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proximity {
    /// `1 - mean mismatch`; higher is closer.
    pub score: f64,
    /// Mean mismatch distance to the input.
    pub raw_distance: f64,
}

pub fn proximity_score(rows: &[EncodedRow], x: &EncodedRow) -> Result<Proximity> {
    non_empty(rows)?;
    let mut total = 0.0;
    for r in rows {
        total += mismatch_distance(r, x)?;
    }
    let raw = total / rows.len() as f64;
    Ok(Proximity {
        score: 1.0 - raw,
        raw_distance: raw,
    })
}

/// Mean pairwise mismatch; 0 for fewer than two rows.
pub fn diversity_score(rows: &[EncodedRow]) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        log::debug!("diversity of {n} row(s) defined as 0");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += mismatch_distance(&rows[i], &rows[j])?;
        }
    }
    Ok(2.0 * total / (n * (n - 1)) as f64)
}

/// Mean autoregressive negative log-likelihood.
pub fn plausibility_score(rows: &[EncodedRow], model: &ArPlausibilityModel) -> Result<f64> {
    non_empty(rows)?;
    let nll = model.nll_rows(rows)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// The two independently trained likelihood oracles.
#[derive(Clone, Copy)]
pub struct Oracles<'a> {
    pub recurrent: &'a ArPlausibilityModel,
    pub transformer: &'a ArPlausibilityModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    pub validity: f64,
    pub proximity: f64,
    pub proximity_distance: f64,
    pub diversity: f64,
    pub plausibility_recurrent: f64,
    pub plausibility_transformer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub encoded: EncodedRow,
    pub predicted: usize,
    pub ar_nll_recurrent: f64,
    pub ar_nll_transformer: f64,
    pub mismatch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub method: String,
    pub desired_label: usize,
    #[serde(flatten)]
    pub overall: Scores,
    /// Scores over rows predicted as the desired label; `None` when no row is.
    pub valid_only: Option<Scores>,
    pub records: Vec<RowRecord>,
}

fn scores_of(records: &[&RowRecord], x: &EncodedRow, y_prime: usize) -> Result<Scores> {
    let rows: Vec<EncodedRow> = records.iter().map(|r| r.encoded.clone()).collect();
    let n = records.len() as f64;
    let prox = proximity_score(&rows, x)?;
    Ok(Scores {
        count: records.len(),
        validity: records.iter().filter(|r| r.predicted == y_prime).count() as f64 / n,
        proximity: prox.score,
        proximity_distance: prox.raw_distance,
        diversity: diversity_score(&rows)?,
        plausibility_recurrent: records.iter().map(|r| r.ar_nll_recurrent).sum::<f64>() / n,
        plausibility_transformer: records.iter().map(|r| r.ar_nll_transformer).sum::<f64>() / n,
    })
}

/// Full report for one counterfactual set.
pub fn evaluate(
    method: &str,
    rows: &[EncodedRow],
    x: &EncodedRow,
    y_prime: usize,
    f: &ClassifierNet,
    dict: &EmbeddingDictionary,
    oracles: Oracles,
) -> Result<CounterfactualReport> {
    non_empty(rows)?;
    if y_prime >= f.classes() {
        return Err(Error::InvalidArgument(format!(
            "class {y_prime} out of range for {} classes",
            f.classes()
        )));
    }
    let predicted = predictions(rows, f, dict)?;
    let rec = oracles.recurrent.nll_rows(rows)?;
    let tf = oracles.transformer.nll_rows(rows)?;
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(RowRecord {
                encoded: r.clone(),
                predicted: predicted[i],
                ar_nll_recurrent: rec[i],
                ar_nll_transformer: tf[i],
                mismatch: mismatch_distance(r, x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&RowRecord> = records.iter().collect();
    let valid: Vec<&RowRecord> = records.iter().filter(|r| r.predicted == y_prime).collect();
    Ok(CounterfactualReport {
        method: method.to_string(),
        desired_label: y_prime,
        overall: scores_of(&all, x, y_prime)?,
        valid_only: if valid.is_empty() {
            None
        } else {
            Some(scores_of(&valid, x, y_prime)?)
        },
        records,
    })
}

/// One JSON object per report.
pub fn write_reports(mut out: impl Write, reports: &[CounterfactualReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Fixed-width table with one line per report.
pub fn format_table(reports: &[CounterfactualReport]) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>9} {:>9} {:>11} {:>11}\n",
        "method", "validity", "proximity", "diversity", "plaus_rnn", "plaus_tf"
    );
    for r in reports {
        let o = &r.overall;
        let _ = writeln!(
            s,
            "{:<12} {:>9.3} {:>9.3} {:>9.3} {:>11.3} {:>11.3}",
            r.method,
            o.validity,
            o.proximity,
            o.diversity,
            o.plausibility_recurrent,
            o.plausibility_transformer
        );
    }
    s
}
