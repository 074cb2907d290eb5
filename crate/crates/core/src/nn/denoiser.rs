use rand::Rng;

use super::{prefixed, prefixed_mut, Linear, Mlp, Module};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Sinusoidal encoding of a diffusion step: `width/2` sines then cosines at
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Predicts the clean embedding from a noisy one and its step:
/// `[z_t, time(t)] -> hidden -> hidden -> C*d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    pub mlp: Mlp,
    pub time_width: usize,
}

impl DenoiserNet {
    /// The output layer starts at zero, so an untrained net predicts `0`.
    pub fn new<R: Rng + ?Sized>(row_width: usize, time_width: usize, hidden: usize, rng: &mut R) -> Self {
        let mut mlp = Mlp::new(&[row_width + time_width, hidden, hidden, row_width], rng);
        let last = mlp.layers.last_mut().expect("three layers");
        *last = Linear::zeros(hidden, row_width);
        Self { mlp, time_width }
    }

    pub fn row_width(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn hidden(&self) -> usize {
        self.mlp.layers[0].fan_out()
    }

    /// `z: [B, C*d]`, one step per row.
    pub fn forward(&self, g: &mut Graph, z: Var, steps: &[usize]) -> Result<Var> {
        let zv = g.value(z);
        if zv.cols() != self.row_width() || zv.rows() != steps.len() {
            return Err(shape_err(format!(
                "denoiser expects [{}, {}], got {:?}",
                steps.len(),
                self.row_width(),
                zv.shape()
            )));
        }
        let mut temb = Vec::with_capacity(steps.len() * self.time_width);
        for &t in steps {
            temb.extend(time_embedding(t, self.time_width));
        }
        let temb = g.leaf(Tensor::new(vec![steps.len(), self.time_width], temb)?);
        let x = g.concat_cols(&[z, temb])?;
        self.mlp.forward(g, x)
    }

    /// Non-differentiable prediction for `[B, C, d]` or `[B, C*d]` input at one step.
    pub fn predict(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        let w = self.row_width();
        if !z.len().is_multiple_of(w) {
            return Err(shape_err(format!("denoiser input {:?}", z.shape())));
        }
        let b = z.len() / w;
        let mut g = Graph::new();
        let x = g.leaf(z.clone().reshape(&[b, w])?);
        let out = self.forward(&mut g, x, &vec![t; b])?;
        g.value(out).clone().reshape(z.shape())
    }
}

impl Module for DenoiserNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        prefixed("mlp", self.mlp.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("mlp", self.mlp.params_mut()).collect()
    }
}
