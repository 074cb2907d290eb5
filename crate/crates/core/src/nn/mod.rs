//! Small feed-forward, recurrent and attention networks built on [`Graph`].

mod classifier;
mod denoiser;
mod embedding;
mod optim;
mod plausibility;
mod train;
mod vae;

pub use classifier::{classifier_forward, ClassifierNet};
pub use denoiser::{time_embedding, DenoiserNet};
pub use embedding::{column_probabilities, EmbeddingDictionary, SamplingStrategy};
pub use optim::{clip_global_norm, LrSchedule, Sgd};
pub use plausibility::{ar_nll, ArPlausibilityModel, ArVariant};
pub use train::{
    fit, train_classifier, train_plausibility, train_vae, ArShape, TrainConfig, TrainReport,
};
pub use vae::{vae_elbo, ElboTerms, TabularVae};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Anything with a fixed, ordered list of named parameter tensors.
pub trait Module {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rounds every parameter to binary32, the precision checkpoints store.
    fn round_to_f32(&mut self) {
        for (_, p) in self.params_mut() {
            p.round_to_f32();
        }
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    params: Vec<(String, &'a Tensor)>,
) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_string();
    params.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    params: Vec<(String, &'a mut Tensor)>,
) -> impl Iterator<Item = (String, &'a mut Tensor)> + 'a {
    let prefix = prefix.to_string();
    params.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Gaussian init scaled by `1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::randn_scaled(&[fan_in, fan_out], std, rng),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed_mut(&format!("layer{i}"), l.params_mut()))
            .collect()
    }
}
