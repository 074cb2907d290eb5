//! Gradient-search baselines over relaxed one-hot rows: Wachter (validity and
//! proximity), DiCE (adds diversity) and DiCE-VAE (adds a negative ELBO).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::guidance::{validity_term, CounterfactualSet, GuidingLossBreakdown};
use crate::nn::{ClassifierNet, EmbeddingDictionary, TabularVae};
use crate::tabular::{check_ids, decode_row, EncodedRow, Schema, Vocabulary};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Wachter,
    #[default]
    Dice,
    DiceVae,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 3] = [Self::Wachter, Self::Dice, Self::DiceVae];

    pub fn name(self) -> &'static str {
        match self {
            Self::Wachter => "wachter",
            Self::Dice => "dice",
            Self::DiceVae => "dice_vae",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "wachter" => Ok(Self::Wachter),
            "dice" => Ok(Self::Dice),
            "dice_vae" => Ok(Self::DiceVae),
            other => Err(Error::InvalidArgument(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub steps: usize,
    pub lr: f64,
    pub lambda_validity: f64,
    pub lambda_proximity: f64,
    pub lambda_diversity: f64,
    pub lambda_plausibility: f64,
    pub count: usize,
    /// Standard deviation of the Gaussian jitter added to the initial scores.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self::for_method(BaselineMethod::Dice)
    }
}

impl BaselineConfig {
    /// Per-method default weights.
    pub fn for_method(method: BaselineMethod) -> Self {
        let (diversity, plausibility) = match method {
            BaselineMethod::Wachter => (0.0, 0.0),
            BaselineMethod::Dice => (0.0325, 0.0),
            BaselineMethod::DiceVae => (0.0325, 0.05),
        };
        Self {
            method,
            steps: 100,
            lr: 2.5,
            lambda_validity: 1.0,
            lambda_proximity: 0.1,
            lambda_diversity: diversity,
            lambda_plausibility: plausibility,
            count: 4,
            jitter: 0.01,
            seed: 0,
        }
    }

    /// Weights actually applied: diversity only for DiCE variants, the ELBO
    /// term only for DiCE-VAE.
    fn effective(&self) -> (f64, f64, f64, f64) {
        let d = match self.method {
            BaselineMethod::Wachter => 0.0,
            _ => self.lambda_diversity,
        };
        let p = match self.method {
            BaselineMethod::DiceVae => self.lambda_plausibility,
            _ => 0.0,
        };
        (self.lambda_validity, self.lambda_proximity, d, p)
    }
}

/// Frozen models a baseline search runs against.
#[derive(Clone, Copy)]
pub struct BaselineModels<'a> {
    pub classifier: &'a ClassifierNet,
    pub dict: &'a EmbeddingDictionary,
    pub vae: Option<&'a TabularVae>,
    pub schema: &'a Schema,
    pub vocab: &'a Vocabulary,
}

/// Unnormalized per-column scores for a batch of rows; block `c` is
/// `[B, |X_c|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedOneHotRows {
    pub blocks: Vec<Tensor>,
}

impl RelaxedOneHotRows {
    pub fn one_hot(row: &EncodedRow, cardinalities: &[usize], count: usize) -> Result<Self> {
        check_ids(row, cardinalities)?;
        let blocks = cardinalities
            .iter()
            .zip(&row.ids)
            .map(|(&k, &id)| Tensor::from_fn(&[count, k], |i| f64::from(i % k == id)))
            .collect();
        Ok(Self { blocks })
    }

    pub fn count(&self) -> usize {
        self.blocks.first().map_or(0, Tensor::rows)
    }

    /// Per-column argmax of every row.
    pub fn decode(&self) -> Vec<EncodedRow> {
        (0..self.count())
            .map(|b| {
                EncodedRow::new(
                    self.blocks
                        .iter()
                        .map(|t| {
                            let r = t.row(b);
                            (0..r.len())
                                .fold(0, |best, i| if r[i] > r[best] { i } else { best })
                        })
                        .collect(),
                )
            })
            .collect()
    }
}

/// Builds the baseline loss for `state` on `g`; returns the total, the
/// breakdown and the leaf variables of the score blocks.
#[allow(clippy::too_many_arguments)]
pub fn baseline_term(
    g: &mut Graph,
    state: &RelaxedOneHotRows,
    target: &RelaxedOneHotRows,
    models: &BaselineModels,
    y_prime: usize,
    cfg: &BaselineConfig,
    elbo_noise: Option<&Tensor>,
) -> Result<(Var, GuidingLossBreakdown, Vec<Var>)> {
    if state.blocks.len() != models.dict.columns() || target.blocks.len() != state.blocks.len() {
        return Err(shape_err("score blocks do not match the dictionary"));
    }
    let (wv, wp, wd, wpl) = cfg.effective();
    let leaves: Vec<Var> = state.blocks.iter().map(|t| g.leaf(t.clone())).collect();
    let probs: Vec<Var> = leaves.iter().map(|&v| g.softmax(v)).collect();
    let z = models.dict.mixture(g, &probs)?;

    let v = validity_term(g, z, models.classifier, y_prime)?;
    let mut prox = None;
    for (&p, t) in probs.iter().zip(&target.blocks) {
        let t = g.leaf(t.clone());
        let diff = g.sub(p, t)?;
        let sq = g.sum_squares(diff);
        prox = Some(match prox {
            Some(acc) => g.add(acc, sq)?,
            None => sq,
        });
    }
    let prox = prox.ok_or_else(|| shape_err("no columns"))?;
    let sv = g.scale(v, wv);
    let sp = g.scale(prox, wp);
    let mut total = g.add(sv, sp)?;

    let mut diversity = 0.0;
    if wd != 0.0 {
        let all = g.concat_cols(&probs)?;
        let spread = g.mean_pairwise_sq_dist(all);
        let d = g.scale(spread, -1.0);
        diversity = g.value(d).item();
        let sd = g.scale(d, wd);
        total = g.add(total, sd)?;
    }
    let mut plausibility = None;
    if cfg.method == BaselineMethod::DiceVae {
        let vae = models
            .vae
            .ok_or_else(|| Error::InvalidArgument("dice_vae needs a trained VAE".into()))?;
        let eps = elbo_noise.ok_or_else(|| Error::InvalidArgument("missing ELBO noise".into()))?;
        let (elbo, _, _) = vae.elbo(g, z, eps)?;
        let neg = g.scale(elbo, -1.0);
        plausibility = Some(g.value(neg).item());
        if wpl != 0.0 {
            let sn = g.scale(neg, wpl);
            total = g.add(total, sn)?;
        }
    }
    let breakdown = GuidingLossBreakdown {
        step: 0,
        validity: g.value(v).item(),
        proximity: g.value(prox).item(),
        diversity,
        plausibility,
        total: g.value(total).item(),
    };
    Ok((total, breakdown, leaves))
}

/// Loss breakdown and gradients with respect to each score block.
pub fn baseline_loss(
    state: &RelaxedOneHotRows,
    target: &RelaxedOneHotRows,
    models: &BaselineModels,
    y_prime: usize,
    cfg: &BaselineConfig,
    elbo_noise: Option<&Tensor>,
) -> Result<(GuidingLossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (total, breakdown, leaves) =
        baseline_term(&mut g, state, target, models, y_prime, cfg, elbo_noise)?;
    let grads = g.grad(total, &leaves)?;
    Ok((breakdown, grads))
}

fn mixture_embedding(state: &RelaxedOneHotRows, dict: &EmbeddingDictionary) -> Result<Tensor> {
    let mut g = Graph::new();
    let probs: Vec<Var> = state
        .blocks
        .iter()
        .map(|t| {
            let v = g.leaf(t.clone());
            g.softmax(v)
        })
        .collect();
    let z = dict.mixture(&mut g, &probs)?;
    g.value(z)
        .clone()
        .reshape(&[state.count(), dict.columns(), dict.width()])
}

/// Runs the gradient search from jittered one-hot copies of `x`.
pub fn baseline_generate(
    models: &BaselineModels,
    x: &EncodedRow,
    y_prime: usize,
    cfg: &BaselineConfig,
) -> Result<CounterfactualSet> {
    if cfg.count < 1 {
        return Err(Error::InvalidArgument("counterfactual count must be >= 1".into()));
    }
    if cfg.method == BaselineMethod::DiceVae && models.vae.is_none() {
        return Err(Error::InvalidArgument("dice_vae needs a trained VAE".into()));
    }
    if models.classifier.input_width() != models.dict.row_width() {
        return Err(shape_err("classifier width does not match the dictionary"));
    }
    let cards = models.dict.cardinalities();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = RelaxedOneHotRows::one_hot(x, &cards, cfg.count)?;
    let mut state = target.clone();
    for block in &mut state.blocks {
        let noise = Tensor::randn_scaled(block.shape(), cfg.jitter, &mut rng);
        block.add_scaled(&noise, 1.0);
    }
    let latent = models.vae.map(TabularVae::latent);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let eps = match (cfg.method, latent) {
            (BaselineMethod::DiceVae, Some(l)) => Some(Tensor::randn(&[cfg.count, l], &mut rng)),
            _ => None,
        };
        let (mut breakdown, grads) =
            baseline_loss(&state, &target, models, y_prime, cfg, eps.as_ref())?;
        breakdown.step = step;
        trace.push(breakdown);
        for (block, grad) in state.blocks.iter_mut().zip(&grads) {
            block.add_scaled(grad, -cfg.lr);
        }
    }
    let encoded = state.decode();
    let rows = encoded
        .iter()
        .map(|r| decode_row(r, models.vocab, models.schema))
        .collect::<Result<_>>()?;
    Ok(CounterfactualSet {
        rows,
        encoded,
        final_embeddings: mixture_embedding(&state, models.dict)?,
        loss_trace: trace,
        seed: cfg.seed,
    })
}
