//! Guided generation of counterfactuals: alternating denoising steps and
//! gradient steps on a validity/proximity/diversity loss over the embedding.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Reduction, Var};
use crate::diffusion::{denoise_step, forward_noise, Clamp, DiffusionModel};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ClassifierNet, SamplingStrategy};
use crate::tabular::{encode_row, EncodedRow, Row};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Guided steps; `None` means half the model's step count.
    pub tau: Option<usize>,
    pub eta: f64,
    pub count: usize,
    pub lambda_validity: f64,
    pub lambda_proximity: f64,
    pub lambda_diversity: f64,
    pub lambda_plausibility: f64,
    pub strategy: SamplingStrategy,
    pub temperature: f64,
    pub add_initial_noise: bool,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            tau: None,
            eta: 1.5,
            count: 4,
            lambda_validity: 1.0,
            lambda_proximity: 0.01,
            lambda_diversity: 0.001,
            lambda_plausibility: 0.0,
            strategy: SamplingStrategy::Max,
            temperature: 1.0,
            add_initial_noise: true,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn resolved_tau(&self, steps: usize) -> Result<usize> {
        let tau = self.tau.unwrap_or((steps / 2).max(1));
        if tau < 1 || tau > steps {
            return Err(Error::InvalidArgument(format!(
                "tau {tau} outside 1..={steps}"
            )));
        }
        Ok(tau)
    }

    fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::InvalidArgument("counterfactual count must be >= 1".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument("eta must be non-negative".into()));
        }
        let lambdas = [
            self.lambda_validity,
            self.lambda_proximity,
            self.lambda_diversity,
            self.lambda_plausibility,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms at one guided step and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidingLossBreakdown {
    pub step: usize,
    pub validity: f64,
    pub proximity: f64,
    pub diversity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plausibility: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSet {
    pub rows: Vec<Row>,
    pub encoded: Vec<EncodedRow>,
    /// `[B, C, d]`.
    pub final_embeddings: Tensor,
    pub loss_trace: Vec<GuidingLossBreakdown>,
    pub seed: u64,
}

/// Writes one JSON object per trace entry.
pub fn write_trace(mut out: impl Write, trace: &[GuidingLossBreakdown]) -> Result<()> {
    for entry in trace {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn flat(g: &mut Graph, z: Var) -> Result<Var> {
    let t = g.value(z);
    let (rows, width) = match t.shape() {
        [b, c, d] => (*b, c * d),
        _ => (t.rows(), t.cols()),
    };
    g.reshape(z, &[rows, width])
}

/// Cross-entropy of the classifier against `y_prime`, summed over rows.
pub fn validity_term(g: &mut Graph, zp: Var, f: &ClassifierNet, y_prime: usize) -> Result<Var> {
    if y_prime >= f.classes() {
        return Err(Error::InvalidArgument(format!(
            "class {y_prime} out of range for {} classes",
            f.classes()
        )));
    }
    let x = flat(g, zp)?;
    let logits = f.forward(g, x)?;
    let b = g.value(logits).rows();
    g.softmax_cross_entropy(logits, &vec![y_prime; b], Reduction::Sum)
}

/// `||Z - Z'||^2`.
pub fn proximity_term(g: &mut Graph, z: Var, zp: Var) -> Result<Var> {
    if g.value(z).shape() != g.value(zp).shape() {
        return Err(shape_err(format!(
            "original {:?} vs counterfactual {:?}",
            g.value(z).shape(),
            g.value(zp).shape()
        )));
    }
    let diff = g.sub(zp, z)?;
    Ok(g.sum_squares(diff))
}

/// `-(2/(B(B-1))) sum_{i<j} ||z_i - z_j||^2`, zero for a single row.
pub fn diversity_term(g: &mut Graph, zp: Var) -> Result<Var> {
    let x = flat(g, zp)?;
    let spread = g.mean_pairwise_sq_dist(x);
    Ok(g.scale(spread, -1.0))
}

/// Weighted guiding loss on a graph, with the per-term values.
pub fn guiding_term(
    g: &mut Graph,
    zp: Var,
    z: Var,
    f: &ClassifierNet,
    y_prime: usize,
    cfg: &GuidanceConfig,
) -> Result<(Var, GuidingLossBreakdown)> {
    let v = validity_term(g, zp, f, y_prime)?;
    let p = proximity_term(g, z, zp)?;
    let d = diversity_term(g, zp)?;
    let wv = g.scale(v, cfg.lambda_validity);
    let wp = g.scale(p, cfg.lambda_proximity);
    let wd = g.scale(d, cfg.lambda_diversity);
    let s = g.add(wv, wp)?;
    let total = g.add(s, wd)?;
    let breakdown = GuidingLossBreakdown {
        step: 0,
        validity: g.value(v).item(),
        proximity: g.value(p).item(),
        diversity: g.value(d).item(),
        plausibility: None,
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

pub fn validity_loss(zp: &Tensor, f: &ClassifierNet, y_prime: usize) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.leaf(zp.clone());
    let l = validity_term(&mut g, v, f, y_prime)?;
    Ok(g.value(l).item())
}

pub fn proximity_loss(z: &Tensor, zp: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.leaf(z.clone()), g.leaf(zp.clone()));
    let l = proximity_term(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn diversity_loss(zp: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.leaf(zp.clone());
    let l = diversity_term(&mut g, v)?;
    Ok(g.value(l).item())
}

/// Loss value, breakdown and gradient with respect to `zp`.
pub fn guiding_loss(
    zp: &Tensor,
    z: &Tensor,
    f: &ClassifierNet,
    y_prime: usize,
    cfg: &GuidanceConfig,
) -> Result<(GuidingLossBreakdown, Tensor)> {
    let mut g = Graph::new();
    let vp = g.leaf(zp.clone());
    let vz = g.leaf(z.clone());
    let (total, breakdown) = guiding_term(&mut g, vp, vz, f, y_prime, cfg)?;
    let grad = g.grad(total, &[vp])?.remove(0);
    Ok((breakdown, grad))
}

/// Counterfactuals for a human-readable row.
pub fn generate_counterfactuals(
    model: &DiffusionModel,
    f: &ClassifierNet,
    x: &Row,
    y_prime: usize,
    cfg: &GuidanceConfig,
) -> Result<CounterfactualSet> {
    let encoded = encode_row(x, &model.vocab, &model.schema)?;
    generate_from_encoded(model, f, &encoded, y_prime, cfg)
}

pub fn generate_from_encoded(
    model: &DiffusionModel,
    f: &ClassifierNet,
    x: &EncodedRow,
    y_prime: usize,
    cfg: &GuidanceConfig,
) -> Result<CounterfactualSet> {
    cfg.validate()?;
    if f.input_width() != model.dict.row_width() {
        return Err(shape_err(format!(
            "classifier expects width {}, diffusion model produces {}",
            f.input_width(),
            model.dict.row_width()
        )));
    }
    if y_prime >= f.classes() {
        return Err(Error::InvalidArgument(format!(
            "class {y_prime} out of range for {} classes",
            f.classes()
        )));
    }
    let tau = cfg.resolved_tau(model.schedule.steps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = model.dict.embed_row(x)?.repeat(cfg.count);
    // Drawn either way so both settings share the later noise stream.
    let eps = Tensor::randn(z.shape(), &mut rng);
    let mut zp = if cfg.add_initial_noise {
        forward_noise(&z, tau, &eps, &model.schedule)?
    } else {
        z.clone()
    };
    let clamp = Some(Clamp {
        strategy: cfg.strategy,
        temperature: cfg.temperature,
    });
    let mut trace = Vec::with_capacity(tau);
    for t in (1..=tau).rev() {
        zp = denoise_step(&zp, t, model, &mut rng, clamp)?;
        let (mut breakdown, grad) = guiding_loss(&zp, &z, f, y_prime, cfg)?;
        breakdown.step = t;
        trace.push(breakdown);
        zp.add_scaled(&grad, -cfg.eta);
    }
    let encoded = model.lookup(&zp, cfg.strategy, cfg.temperature, &mut rng)?;
    let rows = model.decode(&encoded)?;
    Ok(CounterfactualSet {
        rows,
        encoded,
        final_embeddings: zp,
        loss_trace: trace,
        seed: cfg.seed,
    })
}
