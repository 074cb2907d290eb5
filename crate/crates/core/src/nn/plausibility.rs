//! Left-to-right autoregressive models over encoded rows, used as independent
//! density oracles when scoring how plausible a generated row is.
//!
//! Position `n` reads the token at `n - 1` (a learned start vector at `n = 0`)
//! and emits logits over column `n`'s vocabulary, so its prediction can only
//! depend on columns `< n`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{prefixed, prefixed_mut, Linear, Mlp, Module};
use crate::autodiff::{Graph, Reduction, Var};
use crate::error::{shape_err, Error, Result};
use crate::tabular::{check_ids, EncodedRow};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArVariant {
    Recurrent,
    CausalTransformer,
}

impl ArVariant {
    pub fn name(self) -> &'static str {
        match self {
            ArVariant::Recurrent => "recurrent",
            ArVariant::CausalTransformer => "causal_transformer",
        }
    }
}

impl fmt::Display for ArVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "recurrent" | "gru" | "rnn" => Ok(Self::Recurrent),
            "causal_transformer" | "transformer" => Ok(Self::CausalTransformer),
            other => Err(Error::InvalidArgument(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GruCell {
    gates: Linear,
    candidate: Linear,
}

impl GruCell {
    fn step(&self, g: &mut Graph, x: Var, h: Var, hidden: usize) -> Result<Var> {
        let xh = g.concat_cols(&[x, h])?;
        let pre = self.gates.forward(g, xh)?;
        let gates = g.sigmoid(pre);
        let update = g.slice_cols(gates, 0, hidden)?;
        let reset = g.slice_cols(gates, hidden, hidden)?;
        let rh = g.mul(reset, h)?;
        let xrh = g.concat_cols(&[x, rh])?;
        let cand = self.candidate.forward(g, xrh)?;
        let cand = g.tanh(cand);
        let delta = g.sub(cand, h)?;
        let moved = g.mul(update, delta)?;
        g.add(h, moved)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Recurrent { cell: GruCell },
    Transformer { positions: Tensor, blocks: Vec<Block>, heads: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArPlausibilityModel {
    variant: ArVariant,
    hidden: usize,
    /// Input embedding per column (position `n` reads table `n - 1`).
    token_tables: Vec<Tensor>,
    start: Tensor,
    body: Body,
    heads_out: Vec<Linear>,
}

impl ArPlausibilityModel {
    /// `layers` and `heads` apply to the transformer only.
    pub fn new<R: Rng + ?Sized>(
        variant: ArVariant,
        cardinalities: &[usize],
        hidden: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cardinalities.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one column".into()));
        }
        let token_tables = cardinalities
            .iter()
            .map(|&k| Tensor::randn_scaled(&[k, hidden], 0.5, rng))
            .collect();
        let start = Tensor::randn_scaled(&[1, hidden], 0.5, rng);
        let body = match variant {
            ArVariant::Recurrent => Body::Recurrent {
                cell: GruCell {
                    gates: Linear::new(2 * hidden, 2 * hidden, rng),
                    candidate: Linear::new(2 * hidden, hidden, rng),
                },
            },
            ArVariant::CausalTransformer => {
                if heads == 0 || !hidden.is_multiple_of(heads) {
                    return Err(Error::InvalidArgument(format!(
                        "hidden width {hidden} not divisible into {heads} heads"
                    )));
                }
                let mut blocks = Vec::with_capacity(layers);
                for _ in 0..layers {
                    let mut out = Linear::new(hidden, hidden, rng);
                    out.weight.data_mut().iter_mut().for_each(|v| *v *= 0.5);
                    blocks.push(Block {
                        query: Linear::new(hidden, hidden, rng),
                        key: Linear::new(hidden, hidden, rng),
                        value: Linear::new(hidden, hidden, rng),
                        out,
                        mlp: Mlp::new(&[hidden, 2 * hidden, hidden], rng),
                    });
                }
                Body::Transformer {
                    positions: Tensor::randn_scaled(&[cardinalities.len(), hidden], 0.5, rng),
                    blocks,
                    heads,
                }
            }
        };
        let heads_out = cardinalities
            .iter()
            .map(|&k| Linear::new(hidden, k, rng))
            .collect();
        Ok(Self {
            variant,
            hidden,
            token_tables,
            start,
            body,
            heads_out,
        })
    }

    pub fn variant(&self) -> ArVariant {
        self.variant
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        match &self.body {
            Body::Recurrent { .. } => 1,
            Body::Transformer { blocks, .. } => blocks.len(),
        }
    }

    pub fn heads(&self) -> usize {
        match &self.body {
            Body::Recurrent { .. } => 1,
            Body::Transformer { heads, .. } => *heads,
        }
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.heads_out.iter().map(Linear::fan_out).collect()
    }

    pub fn columns(&self) -> usize {
        self.heads_out.len()
    }

    /// Position-wise input vectors `[B, hidden]` (shifted tokens).
    fn inputs(&self, g: &mut Graph, rows: &[EncodedRow]) -> Result<Vec<Var>> {
        let b = rows.len();
        let start = g.param(&self.start);
        let mut out = vec![g.gather(start, &vec![0; b])?];
        for n in 1..self.columns() {
            let table = g.param(&self.token_tables[n - 1]);
            let ids: Vec<usize> = rows.iter().map(|r| r.ids[n - 1]).collect();
            out.push(g.gather(table, &ids)?);
        }
        Ok(out)
    }

    /// Logits per position, `[B, |X_n|]` each.
    pub fn position_logits(&self, g: &mut Graph, rows: &[EncodedRow]) -> Result<Vec<Var>> {
        let cards = self.cardinalities();
        for r in rows {
            check_ids(r, &cards)?;
        }
        let b = rows.len();
        let n_pos = self.columns();
        let h = self.hidden;
        let inputs = self.inputs(g, rows)?;
        let states: Vec<Var> = match &self.body {
            Body::Recurrent { cell } => {
                let mut state = g.leaf(Tensor::zeros(&[b, h]));
                let mut states = Vec::with_capacity(n_pos);
                for &x in &inputs {
                    state = cell.step(g, x, state, h)?;
                    states.push(state);
                }
                states
            }
            Body::Transformer {
                positions,
                blocks,
                heads,
            } => {
                let pos = g.param(positions);
                let mut placed = Vec::with_capacity(n_pos);
                for (n, &x) in inputs.iter().enumerate() {
                    let p = g.gather(pos, &vec![n; b])?;
                    placed.push(g.add(x, p)?);
                }
                let wide = g.concat_cols(&placed)?;
                let mut x = g.reshape(wide, &[b * n_pos, h])?;
                for block in blocks {
                    let q = block.query.forward(g, x)?;
                    let k = block.key.forward(g, x)?;
                    let v = block.value.forward(g, x)?;
                    let att = g.causal_attention(q, k, v, n_pos, *heads)?;
                    let att = block.out.forward(g, att)?;
                    x = g.add(x, att)?;
                    let m = block.mlp.forward(g, x)?;
                    x = g.add(x, m)?;
                }
                let wide = g.reshape(x, &[b, n_pos * h])?;
                (0..n_pos)
                    .map(|n| g.slice_cols(wide, n * h, h))
                    .collect::<Result<_>>()?
            }
        };
        states
            .iter()
            .zip(&self.heads_out)
            .map(|(&s, head)| head.forward(g, s))
            .collect()
    }

    /// Summed per-position cross-entropy averaged over the batch (training loss).
    pub fn loss(&self, g: &mut Graph, rows: &[EncodedRow]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let logits = self.position_logits(g, rows)?;
        let mut total: Option<Var> = None;
        for (n, &l) in logits.iter().enumerate() {
            let targets: Vec<usize> = rows.iter().map(|r| r.ids[n]).collect();
            let ce = g.softmax_cross_entropy(l, &targets, Reduction::Mean)?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        Ok(total.expect("at least one column"))
    }

    /// `-sum_n log p(id_n | id_<n)` for each row.
    pub fn nll_rows(&self, rows: &[EncodedRow]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(vec![]);
        }
        if rows.iter().any(|r| r.len() != self.columns()) {
            return Err(shape_err(format!("rows must have {} columns", self.columns())));
        }
        let mut g = Graph::new();
        let logits = self.position_logits(&mut g, rows)?;
        let mut out = vec![0.0; rows.len()];
        for (n, &l) in logits.iter().enumerate() {
            let lv = g.value(l);
            for (b, row) in rows.iter().enumerate() {
                let r = lv.row(b);
                let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out[b] += lse - r[row.ids[n]];
            }
        }
        // Rounding can leave a tiny negative when every term is ~0.
        Ok(out.into_iter().map(|v| v.max(0.0)).collect())
    }

    /// Raw per-position logits for one row (used by causality checks).
    pub fn logits_for(&self, row: &EncodedRow) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let logits = self.position_logits(&mut g, std::slice::from_ref(row))?;
        Ok(logits.iter().map(|&l| g.value(l).data().to_vec()).collect())
    }
}

/// Negative log-likelihood of one row.
pub fn ar_nll(row: &EncodedRow, model: &ArPlausibilityModel) -> Result<f64> {
    Ok(model.nll_rows(std::slice::from_ref(row))?[0])
}

impl Module for ArPlausibilityModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .token_tables
            .iter()
            .enumerate()
            .map(|(c, t)| (format!("token{c}"), t))
            .collect();
        out.push(("start".into(), &self.start));
        match &self.body {
            Body::Recurrent { cell } => {
                out.extend(prefixed("gru.gates", cell.gates.params()));
                out.extend(prefixed("gru.candidate", cell.candidate.params()));
            }
            Body::Transformer {
                positions, blocks, ..
            } => {
                out.push(("positions".into(), positions));
                for (i, b) in blocks.iter().enumerate() {
                    out.extend(prefixed(&format!("block{i}.query"), b.query.params()));
                    out.extend(prefixed(&format!("block{i}.key"), b.key.params()));
                    out.extend(prefixed(&format!("block{i}.value"), b.value.params()));
                    out.extend(prefixed(&format!("block{i}.out"), b.out.params()));
                    out.extend(prefixed(&format!("block{i}.mlp"), b.mlp.params()));
                }
            }
        }
        for (n, h) in self.heads_out.iter().enumerate() {
            out.extend(prefixed(&format!("head{n}"), h.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .token_tables
            .iter_mut()
            .enumerate()
            .map(|(c, t)| (format!("token{c}"), t))
            .collect();
        out.push(("start".into(), &mut self.start));
        match &mut self.body {
            Body::Recurrent { cell } => {
                out.extend(prefixed_mut("gru.gates", cell.gates.params_mut()));
                out.extend(prefixed_mut("gru.candidate", cell.candidate.params_mut()));
            }
            Body::Transformer {
                positions, blocks, ..
            } => {
                out.push(("positions".into(), positions));
                for (i, b) in blocks.iter_mut().enumerate() {
                    out.extend(prefixed_mut(&format!("block{i}.query"), b.query.params_mut()));
                    out.extend(prefixed_mut(&format!("block{i}.key"), b.key.params_mut()));
                    out.extend(prefixed_mut(&format!("block{i}.value"), b.value.params_mut()));
                    out.extend(prefixed_mut(&format!("block{i}.out"), b.out.params_mut()));
                    out.extend(prefixed_mut(&format!("block{i}.mlp"), b.mlp.params_mut()));
                }
            }
        }
        for (n, h) in self.heads_out.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("head{n}"), h.params_mut()));
        }
        out
    }
}
