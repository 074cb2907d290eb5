use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clip_global_norm, ArPlausibilityModel, ArVariant, ClassifierNet, EmbeddingDictionary,
    LrSchedule, Module, Sgd, TabularVae,
};
use crate::autodiff::{Graph, Reduction, Var};
use crate::error::{Error, Result};
use crate::tabular::{Dataset, EncodedRow};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: LrSchedule::constant(0.05),
            momentum: 0.9,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Minibatch gradient descent over `items` examples.
///
/// `loss` builds the scalar loss of one minibatch (given its example indices)
/// on a fresh graph; `after_step` runs after every parameter update.
pub fn fit<M, L, A>(
    model: &mut M,
    items: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut loss: L,
    mut after_step: A,
) -> Result<TrainReport>
where
    M: Module,
    L: FnMut(&M, &mut Graph, &[usize], &mut ChaCha8Rng) -> Result<Var>,
    A: FnMut(&mut M),
{
    if items == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..items).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let mut grads = {
                let mut g = Graph::new();
                let l = loss(model, &mut g, chunk, rng)?;
                let value = g.value(l).item();
                if !value.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite training loss at epoch {epoch}"
                    )));
                }
                total += value;
                let mut all = g.backward(l)?;
                model
                    .params()
                    .iter()
                    .map(|(_, t)| {
                        g.param_var(t)
                            .and_then(|v| all.take(v))
                            .unwrap_or_else(|| Tensor::zeros(t.shape()))
                    })
                    .collect::<Vec<_>>()
            };
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(model.params_mut().into_iter().map(|(_, t)| t).collect(), &grads);
            after_step(model);
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    report.steps = opt.steps_taken();
    Ok(report)
}

fn select(rows: &[EncodedRow], idx: &[usize]) -> Vec<EncodedRow> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// Fits the black-box classifier on frozen row embeddings.
pub fn train_classifier(
    dataset: &Dataset,
    dict: &EmbeddingDictionary,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(ClassifierNet, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ClassifierNet::new(dict.row_width(), hidden, dataset.class_count(), &mut rng);
    // Embeddings are constants here; precompute them once.
    let z = dict.embed_rows(&dataset.rows)?;
    let w = dict.row_width();
    let report = fit(
        &mut net,
        dataset.len(),
        cfg,
        &mut rng,
        |net, g, idx, _| {
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&z.data()[i * w..(i + 1) * w]);
            }
            let x = g.leaf(Tensor::new(vec![idx.len(), w], data)?);
            let targets: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let logits = net.forward(g, x)?;
            g.softmax_cross_entropy(logits, &targets, Reduction::Mean)
        },
        |_| {},
    )?;
    Ok((net, report))
}

/// Architecture of an autoregressive plausibility model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArShape {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Fits an autoregressive plausibility model with teacher forcing.
pub fn train_plausibility(
    dataset: &Dataset,
    variant: ArVariant,
    shape: ArShape,
    cfg: &TrainConfig,
) -> Result<(ArPlausibilityModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ArPlausibilityModel::new(
        variant,
        &dataset.vocab.cardinalities(),
        shape.hidden,
        shape.layers,
        shape.heads,
        &mut rng,
    )?;
    let report = fit(
        &mut model,
        dataset.len(),
        cfg,
        &mut rng,
        |m, g, idx, _| m.loss(g, &select(&dataset.rows, idx)),
        |_| {},
    )?;
    Ok((model, report))
}

/// Fits a VAE on frozen row embeddings.
pub fn train_vae(
    dataset: &Dataset,
    dict: &EmbeddingDictionary,
    hidden: usize,
    latent: usize,
    cfg: &TrainConfig,
) -> Result<(TabularVae, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vae = TabularVae::new(dict.row_width(), hidden, latent, &mut rng);
    let z = dict.embed_rows(&dataset.rows)?;
    let w = dict.row_width();
    let report = fit(
        &mut vae,
        dataset.len(),
        cfg,
        &mut rng,
        |vae, g, idx, rng| {
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&z.data()[i * w..(i + 1) * w]);
            }
            let x = g.leaf(Tensor::new(vec![idx.len(), w], data)?);
            let eps = Tensor::randn(&[idx.len(), vae.latent()], rng);
            let (elbo, _, _) = vae.elbo(g, x, &eps)?;
            Ok(g.scale(elbo, -1.0))
        },
        |_| {},
    )?;
    Ok((vae, report))
}
