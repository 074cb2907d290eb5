use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Module;
use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tabular::{check_ids, EncodedRow};
use crate::tensor::Tensor;

/// Rule mapping a continuous column embedding back to dictionary entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Highest-probability entry.
    #[default]
    Max,
    /// Probability-weighted mean of all entries (id reported as for `Max`).
    Average,
    /// Entry drawn from the full distribution.
    FullSampling,
    /// Entry drawn among the three most probable, in proportion to their
    /// renormalized probabilities.
    Top3,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 4] = [
        SamplingStrategy::Max,
        SamplingStrategy::Average,
        SamplingStrategy::FullSampling,
        SamplingStrategy::Top3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Max => "max",
            SamplingStrategy::Average => "average",
            SamplingStrategy::FullSampling => "full_sampling",
            SamplingStrategy::Top3 => "top3",
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "max" => Ok(Self::Max),
            "average" | "avg" => Ok(Self::Average),
            "full_sampling" | "full" | "sample" => Ok(Self::FullSampling),
            "top3" | "top_3" => Ok(Self::Top3),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling strategy `{other}`"
            ))),
        }
    }
}

/// One learned `|X_c| x d` table per column.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDictionary {
    pub tables: Vec<Tensor>,
    width: usize,
}

impl EmbeddingDictionary {
    /// Random rows rescaled to norm `sqrt(width)` (unit variance per coordinate).
    pub fn new<R: Rng + ?Sized>(cardinalities: &[usize], width: usize, rng: &mut R) -> Self {
        let mut dict = Self {
            tables: cardinalities
                .iter()
                .map(|&k| Tensor::randn(&[k, width], rng))
                .collect(),
            width,
        };
        dict.normalize_rows();
        dict
    }

    pub fn from_tables(tables: Vec<Tensor>) -> Result<Self> {
        let width = tables.first().map_or(0, Tensor::cols);
        if tables.iter().any(|t| t.cols() != width || t.shape().len() != 2) {
            return Err(shape_err("embedding tables must share one width"));
        }
        Ok(Self { tables, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn columns(&self) -> usize {
        self.tables.len()
    }

    /// Flattened row-embedding width `C * d`.
    pub fn row_width(&self) -> usize {
        self.tables.len() * self.width
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.tables.iter().map(Tensor::rows).collect()
    }

    /// Rescales every dictionary row to norm `sqrt(width)`.
    pub fn normalize_rows(&mut self) {
        let target = (self.width as f64).sqrt();
        for t in &mut self.tables {
            for r in 0..t.rows() {
                let row = t.row_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v *= target / n);
                }
            }
        }
    }

    pub fn embed_row(&self, row: &EncodedRow) -> Result<Tensor> {
        check_ids(row, &self.cardinalities())?;
        let mut data = Vec::with_capacity(self.row_width());
        for (t, &id) in self.tables.iter().zip(&row.ids) {
            data.extend_from_slice(t.row(id));
        }
        Tensor::new(vec![self.columns(), self.width], data)
    }

    /// `[B, C, d]` stack of row embeddings.
    pub fn embed_rows(&self, rows: &[EncodedRow]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.row_width());
        for r in rows {
            data.extend(self.embed_row(r)?.into_data());
        }
        Tensor::new(vec![rows.len(), self.columns(), self.width], data)
    }

    /// Differentiable lookup producing `[B, C*d]`.
    pub fn embed(&self, g: &mut Graph, rows: &[EncodedRow]) -> Result<Var> {
        let cards = self.cardinalities();
        for r in rows {
            check_ids(r, &cards)?;
        }
        let parts = self
            .tables
            .iter()
            .enumerate()
            .map(|(c, t)| {
                let ids: Vec<usize> = rows.iter().map(|r| r.ids[c]).collect();
                let table = g.param(t);
                g.gather(table, &ids)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_cols(&parts)
    }

    /// Probability-weighted mixtures: `probs[c]` is `[B, |X_c|]`, result `[B, C*d]`.
    pub fn mixture(&self, g: &mut Graph, probs: &[Var]) -> Result<Var> {
        if probs.len() != self.columns() {
            return Err(shape_err("one probability block per column required"));
        }
        let parts = probs
            .iter()
            .zip(&self.tables)
            .map(|(&p, t)| {
                let table = g.param(t);
                g.matmul(p, table)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_cols(&parts)
    }

    /// Maps a `[B, C, d]` (or `[B, C*d]`) embedding back to ids per the strategy,
    /// also returning the snapped embedding in the input's shape.
    pub fn reverse_lookup<R: Rng + ?Sized>(
        &self,
        z: &Tensor,
        strategy: SamplingStrategy,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(Vec<EncodedRow>, Tensor)> {
        let rw = self.row_width();
        if rw == 0 || !z.len().is_multiple_of(rw) {
            return Err(shape_err(format!(
                "embedding of shape {:?} is not a batch of {}x{} rows",
                z.shape(),
                self.columns(),
                self.width
            )));
        }
        let batch = z.len() / rw;
        let mut snapped = z.clone();
        let mut rows = Vec::with_capacity(batch);
        let d = self.width;
        for b in 0..batch {
            let mut ids = Vec::with_capacity(self.columns());
            for (c, table) in self.tables.iter().enumerate() {
                let off = b * rw + c * d;
                let slice = &z.data()[off..off + d];
                let probs = column_probabilities(slice, table, temperature)?;
                let best = argmax(&probs);
                let id = match strategy {
                    SamplingStrategy::Max | SamplingStrategy::Average => best,
                    SamplingStrategy::FullSampling => sample_index(&probs, rng),
                    SamplingStrategy::Top3 => {
                        let mut order: Vec<usize> = (0..probs.len()).collect();
                        order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
                        order.truncate(3);
                        let top: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
                        order[sample_index(&top, rng)]
                    }
                };
                let out = &mut snapped.data_mut()[off..off + d];
                if strategy == SamplingStrategy::Average {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for (k, &p) in probs.iter().enumerate() {
                        for (o, &e) in out.iter_mut().zip(table.row(k)) {
                            *o += p * e;
                        }
                    }
                } else {
                    out.copy_from_slice(table.row(id));
                }
                ids.push(id);
            }
            rows.push(EncodedRow::new(ids));
        }
        Ok((rows, snapped))
    }
}

impl Module for EmbeddingDictionary {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.tables
            .iter()
            .enumerate()
            .map(|(c, t)| (format!("column{c}"), t))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.tables
            .iter_mut()
            .enumerate()
            .map(|(c, t)| (format!("column{c}"), t))
            .collect()
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Index drawn in proportion to the (not necessarily normalized) weights `p`.
fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Softmax over `-||z - e_k||^2 / temperature` for each row `e_k` of `table`.
pub fn column_probabilities(z_slice: &[f64], table: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if z_slice.len() != table.cols() {
        return Err(shape_err(format!(
            "slice of width {} against dictionary width {}",
            z_slice.len(),
            table.cols()
        )));
    }
    let mut logits: Vec<f64> = (0..table.rows())
        .map(|k| {
            -z_slice
                .iter()
                .zip(table.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / temperature
        })
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}
