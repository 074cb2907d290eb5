//! Gaussian diffusion over row embeddings: the cosine noise schedule, forward
//! noising, the denoiser's training objective and ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Reduction, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    fit, prefixed, prefixed_mut, DenoiserNet, EmbeddingDictionary, Module, SamplingStrategy,
    TrainConfig, TrainReport,
};
use crate::tabular::{decode_row, Dataset, EncodedRow, Row, Schema, Vocabulary};
use crate::tensor::Tensor;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

/// Coefficient tables for `T` diffusion steps. Step-indexed accessors are
/// 1-based; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - alpha_bar`, accumulated without cancellation.
    noise_var: Vec<f64>,
    gamma1: Vec<f64>,
    gamma2: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the tables from an arbitrary beta sequence `beta_1..beta_T`.
    pub fn from_betas(beta: Vec<f64>, offset: f64) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let steps = beta.len();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut noise_var = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        noise_var.push(0.0);
        for (t, &b) in beta.iter().enumerate() {
            alpha_bar.push(alpha_bar[t] * (1.0 - b));
            noise_var.push(noise_var[t] + alpha_bar[t] * b);
        }
        let mut gamma1 = Vec::with_capacity(steps);
        let mut gamma2 = Vec::with_capacity(steps);
        for t in 1..=steps {
            let (v, v_prev, b) = (noise_var[t], noise_var[t - 1], beta[t - 1]);
            gamma1.push(b * alpha_bar[t - 1].sqrt() / v);
            gamma2.push(v_prev * (1.0 - b).sqrt() / v);
        }
        Ok(Self {
            steps,
            offset,
            beta,
            alpha_bar,
            noise_var,
            gamma1,
            gamma2,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `1 - alpha_bar(t)`.
    pub fn noise_variance(&self, t: usize) -> f64 {
        self.noise_var[t]
    }

    pub fn gamma1(&self, t: usize) -> f64 {
        self.gamma1[t - 1]
    }

    pub fn gamma2(&self, t: usize) -> f64 {
        self.gamma2[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
/// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, betas clipped to `[1e-8, 0.999]`
/// and `alpha_bar` re-accumulated from the clipped betas.
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidArgument("cosine schedule needs T >= 1".into()));
    }
    let x = |t: usize| (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
    let h = std::f64::consts::FRAC_PI_2 / (steps as f64 * (1.0 + offset));
    // 1 - cos^2(b)/cos^2(a) = sin(b - a) sin(b + a) / cos^2(a), without the
    // cancellation of the direct ratio when beta is tiny.
    let beta = (1..=steps)
        .map(|t| {
            let (a, b) = (x(t - 1), x(t));
            (h.sin() * (a + b).sin() / a.cos().powi(2)).clamp(1e-8, 0.999)
        })
        .collect();
    NoiseSchedule::from_betas(beta, offset)
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(shape_err(format!(
            "noise {:?} does not match signal {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    let (a, b) = (schedule.alpha_bar(t).sqrt(), schedule.noise_variance(t).sqrt());
    z0.zip_map(eps, |x, e| a * x + b * e)
}

/// One reverse step given a clean-signal prediction:
/// `gamma1 z0_hat + gamma2 z_t + sqrt(beta_t) xi`, with `xi` omitted at `t = 1`.
pub fn posterior_step(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    z0_hat: &Tensor,
    t: usize,
    xi: Option<&Tensor>,
) -> Result<Tensor> {
    schedule.check(t)?;
    if z_t.len() != z0_hat.len() {
        return Err(shape_err("prediction and state differ in size"));
    }
    let (g1, g2) = (schedule.gamma1(t), schedule.gamma2(t));
    let mut out = z0_hat.zip_map(z_t, |p, z| g1 * p + g2 * z)?.reshape(z_t.shape())?;
    if t > 1 {
        if let Some(xi) = xi {
            out.add_scaled(xi, schedule.beta(t).sqrt());
        }
    }
    Ok(out)
}

/// Optional snapping of the clean-signal prediction to dictionary entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clamp {
    pub strategy: SamplingStrategy,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub cosine_offset: f64,
    pub embedding_width: usize,
    pub time_width: usize,
    pub hidden: usize,
    /// Weight of the cross-entropy that keeps dictionary rows separable
    /// under the denoiser's prediction.
    pub rounding_weight: f64,
    pub train: TrainConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            embedding_width: 16,
            time_width: 32,
            hidden: 64,
            rounding_weight: 1.0,
            train: TrainConfig::default(),
        }
    }
}

/// Trained denoiser together with its frozen dictionary and table schema.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserNet,
    pub dict: EmbeddingDictionary,
    pub schema: Schema,
    pub vocab: Vocabulary,
}

impl DiffusionModel {
    pub fn new(
        schedule: NoiseSchedule,
        denoiser: DenoiserNet,
        dict: EmbeddingDictionary,
        schema: Schema,
        vocab: Vocabulary,
    ) -> Result<Self> {
        if denoiser.row_width() != dict.row_width() {
            return Err(shape_err(format!(
                "denoiser width {} differs from embedding width {}",
                denoiser.row_width(),
                dict.row_width()
            )));
        }
        if dict.cardinalities() != vocab.cardinalities() {
            return Err(shape_err("dictionary does not match vocabulary"));
        }
        Ok(Self {
            schedule,
            denoiser,
            dict,
            schema,
            vocab,
        })
    }

    /// Untrained model for a dataset.
    pub fn init(dataset: &Dataset, cfg: &DiffusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let schedule = cosine_schedule(cfg.steps, cfg.cosine_offset)?;
        let dict = EmbeddingDictionary::new(&dataset.vocab.cardinalities(), cfg.embedding_width, rng);
        let denoiser = DenoiserNet::new(dict.row_width(), cfg.time_width, cfg.hidden, rng);
        Self::new(schedule, denoiser, dict, dataset.schema.clone(), dataset.vocab.clone())
    }

    /// Training loss for one minibatch, given per-row steps and noise.
    pub fn loss(
        &self,
        g: &mut Graph,
        rows: &[EncodedRow],
        steps: &[usize],
        eps: &Tensor,
        rounding_weight: f64,
    ) -> Result<Var> {
        let b = rows.len();
        let w = self.dict.row_width();
        let z0 = self.dict.embed(g, rows)?;
        let mut signal = Vec::with_capacity(b * w);
        let mut noise = Vec::with_capacity(b * w);
        for (r, &t) in steps.iter().enumerate() {
            self.schedule.check(t)?;
            let (a, s) = (self.schedule.alpha_bar(t).sqrt(), self.schedule.noise_variance(t).sqrt());
            signal.extend(std::iter::repeat_n(a, w));
            noise.extend(eps.row(r).iter().map(|e| s * e));
        }
        let signal = g.leaf(Tensor::new(vec![b, w], signal)?);
        let noise = g.leaf(Tensor::new(vec![b, w], noise)?);
        let scaled = g.mul(z0, signal)?;
        let z_t = g.add(scaled, noise)?;
        let pred = self.denoiser.forward(g, z_t, steps)?;
        let diff = g.sub(pred, z0)?;
        let sq = g.square(diff);
        let mut loss = g.mean(sq);
        if rounding_weight > 0.0 {
            let d = self.dict.width();
            for (c, table) in self.dict.tables.iter().enumerate() {
                let slice = g.slice_cols(pred, c * d, d)?;
                let e = g.param(table);
                let logits = g.neg_sq_dist(slice, e)?;
                let ids: Vec<usize> = rows.iter().map(|r| r.ids[c]).collect();
                let ce = g.softmax_cross_entropy(logits, &ids, Reduction::Mean)?;
                let ce = g.scale(ce, rounding_weight / self.dict.columns() as f64);
                loss = g.add(loss, ce)?;
            }
        }
        Ok(loss)
    }

    /// Clean-signal prediction, optionally snapped to the dictionary.
    pub fn predict_clean<R: Rng + ?Sized>(
        &self,
        z_t: &Tensor,
        t: usize,
        clamp: Option<Clamp>,
        rng: &mut R,
    ) -> Result<Tensor> {
        let pred = self.denoiser.predict(z_t, t)?;
        match clamp {
            Some(c) => Ok(self.dict.reverse_lookup(&pred, c.strategy, c.temperature, rng)?.1),
            None => Ok(pred),
        }
    }

    /// Decodes a `[B, C, d]` embedding into encoded rows.
    pub fn lookup<R: Rng + ?Sized>(
        &self,
        z: &Tensor,
        strategy: SamplingStrategy,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<EncodedRow>> {
        Ok(self.dict.reverse_lookup(z, strategy, temperature, rng)?.0)
    }

    pub fn decode(&self, rows: &[EncodedRow]) -> Result<Vec<Row>> {
        rows.iter()
            .map(|r| decode_row(r, &self.vocab, &self.schema))
            .collect()
    }

    /// `[C, d]` shape of one row embedding.
    pub fn row_shape(&self) -> [usize; 2] {
        [self.dict.columns(), self.dict.width()]
    }
}

impl Module for DiffusionModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        prefixed("denoiser", self.denoiser.params())
            .chain(prefixed("embedding", self.dict.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let (den, dict) = (&mut self.denoiser, &mut self.dict);
        prefixed_mut("denoiser", den.params_mut())
            .chain(prefixed_mut("embedding", dict.params_mut()))
            .collect()
    }
}

/// One ancestral step `z_t -> z_{t-1}` drawing `xi` from `rng` (none at `t = 1`).
pub fn denoise_step<R: Rng + ?Sized>(
    z_t: &Tensor,
    t: usize,
    model: &DiffusionModel,
    rng: &mut R,
    clamp: Option<Clamp>,
) -> Result<Tensor> {
    model.schedule.check(t)?;
    let z0_hat = model.predict_clean(z_t, t, clamp, rng)?;
    let xi = (t > 1).then(|| Tensor::randn(z_t.shape(), rng));
    posterior_step(&model.schedule, z_t, &z0_hat, t, xi.as_ref())
}

/// Trains denoiser and embedding dictionary jointly on reconstruction of the
/// clean embedding from its noised version.
pub fn train_diffusion(dataset: &Dataset, cfg: &DiffusionConfig) -> Result<(DiffusionModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = DiffusionModel::init(dataset, cfg, &mut rng)?;
    let steps = cfg.steps;
    let rounding = cfg.rounding_weight;
    let report = fit(
        &mut model,
        dataset.len(),
        &cfg.train,
        &mut rng,
        |m, g, idx, rng| {
            let rows: Vec<EncodedRow> = idx.iter().map(|&i| dataset.rows[i].clone()).collect();
            let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=steps)).collect();
            let eps = Tensor::randn(&[idx.len(), m.dict.row_width()], rng);
            m.loss(g, &rows, &ts, &eps, rounding)
        },
        |m| m.dict.normalize_rows(),
    )?;
    Ok((model, report))
}

/// Runs the full reverse chain from Gaussian noise and returns the final
/// `[B, C, d]` embedding.
pub fn sample_embeddings<R: Rng + ?Sized>(
    model: &DiffusionModel,
    batch: usize,
    rng: &mut R,
    clamp: Option<Clamp>,
) -> Result<Tensor> {
    let [c, d] = model.row_shape();
    let mut z = Tensor::randn(&[batch, c, d], rng);
    if batch == 0 {
        return Ok(z);
    }
    for t in (1..=model.schedule.steps()).rev() {
        z = denoise_step(&z, t, model, rng, clamp)?;
    }
    Ok(z)
}

/// Unconditional rows: reverse chain from noise, then reverse lookup.
pub fn sample_unconditional<R: Rng + ?Sized>(
    model: &DiffusionModel,
    batch: usize,
    rng: &mut R,
    strategy: SamplingStrategy,
    clamp: Option<Clamp>,
) -> Result<(Vec<EncodedRow>, Vec<Row>)> {
    let z = sample_embeddings(model, batch, rng, clamp)?;
    if batch == 0 {
        return Ok((vec![], vec![]));
    }
    let encoded = model.lookup(&z, strategy, 1.0, rng)?;
    let rows = model.decode(&encoded)?;
    Ok((encoded, rows))
}
