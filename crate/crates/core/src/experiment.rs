//! Trained model bundles, method dispatch, and the comparison and ablation
//! grids.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{baseline_generate, BaselineConfig, BaselineMethod, BaselineModels};
use crate::checkpoint::{self, Loaded, Persist, TableMeta};
use crate::config::{AblationConfig, BaselineDefaults, RunConfig};
use crate::diffusion::{train_diffusion, DiffusionModel};
use crate::error::{Error, Result};
use crate::guidance::{generate_from_encoded, CounterfactualSet, GuidanceConfig};
use crate::metrics::{self, CounterfactualReport, Oracles, Scores};
use crate::nn::{
    train_classifier, train_plausibility, train_vae, ArPlausibilityModel, ArVariant,
    ClassifierNet, Module, SamplingStrategy, TabularVae, TrainReport,
};
use crate::tabular::{Dataset, EncodedRow};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Scd,
    Wachter,
    Dice,
    DiceVae,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Scd, Self::Wachter, Self::Dice, Self::DiceVae];

    pub fn name(self) -> &'static str {
        match self {
            Self::Scd => "scd",
            Self::Wachter => "wachter",
            Self::Dice => "dice",
            Self::DiceVae => "dice_vae",
        }
    }

    pub fn baseline(self) -> Option<BaselineMethod> {
        match self {
            Self::Scd => None,
            Self::Wachter => Some(BaselineMethod::Wachter),
            Self::Dice => Some(BaselineMethod::Dice),
            Self::DiceVae => Some(BaselineMethod::DiceVae),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "scd" => Ok(Self::Scd),
            other => other.parse::<BaselineMethod>().map(|b| match b {
                BaselineMethod::Wachter => Self::Wachter,
                BaselineMethod::Dice => Self::Dice,
                BaselineMethod::DiceVae => Self::DiceVae,
            }),
        }
    }
}

pub const DIFFUSION_FILE: &str = "diffusion.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const RECURRENT_FILE: &str = "plausibility-recurrent.ckpt";
pub const TRANSFORMER_FILE: &str = "plausibility-transformer.ckpt";
pub const VAE_FILE: &str = "vae.ckpt";

/// Every trained model one experiment needs.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub table: TableMeta,
    pub diffusion: DiffusionModel,
    pub classifier: ClassifierNet,
    pub recurrent: ArPlausibilityModel,
    pub transformer: ArPlausibilityModel,
    pub vae: Option<TabularVae>,
}

/// Training losses of each bundle component.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BundleReport {
    pub diffusion: TrainReport,
    pub classifier: TrainReport,
    pub recurrent: TrainReport,
    pub transformer: TrainReport,
    pub vae: TrainReport,
}

fn train_metadata(report: &TrainReport) -> BTreeMap<String, Value> {
    BTreeMap::from([
        ("created_with".to_string(), json!(concat!("tabcf ", env!("CARGO_PKG_VERSION")))),
        ("final_loss".to_string(), json!(report.final_loss())),
        ("epochs".to_string(), json!(report.epoch_losses.len())),
    ])
}

impl ModelBundle {
    /// Trains every component. Parameters are rounded to binary32 so the
    /// in-memory bundle equals what its checkpoints reload to.
    pub fn train(dataset: &Dataset, cfg: &RunConfig) -> Result<(Self, BundleReport)> {
        let (mut diffusion, r_diff) = train_diffusion(dataset, &cfg.diffusion)?;
        diffusion.round_to_f32();
        let (mut classifier, r_clf) = train_classifier(
            dataset,
            &diffusion.dict,
            cfg.classifier.hidden,
            &cfg.classifier.train,
        )?;
        classifier.round_to_f32();
        let shape = cfg.plausibility.shape();
        let (mut recurrent, r_rec) =
            train_plausibility(dataset, ArVariant::Recurrent, shape, &cfg.plausibility.train)?;
        recurrent.round_to_f32();
        let (mut transformer, r_tf) = train_plausibility(
            dataset,
            ArVariant::CausalTransformer,
            shape,
            &cfg.plausibility.train,
        )?;
        transformer.round_to_f32();
        let (mut vae, r_vae) = train_vae(
            dataset,
            &diffusion.dict,
            cfg.vae.hidden,
            cfg.vae.latent,
            &cfg.vae.train,
        )?;
        vae.round_to_f32();
        Ok((
            Self {
                table: TableMeta::of(dataset),
                diffusion,
                classifier,
                recurrent,
                transformer,
                vae: Some(vae),
            },
            BundleReport {
                diffusion: r_diff,
                classifier: r_clf,
                recurrent: r_rec,
                transformer: r_tf,
                vae: r_vae,
            },
        ))
    }

    pub fn digest(&self) -> String {
        self.table.digest()
    }

    pub fn oracles(&self) -> Oracles<'_> {
        Oracles {
            recurrent: &self.recurrent,
            transformer: &self.transformer,
        }
    }

    pub fn baseline_models(&self) -> BaselineModels<'_> {
        BaselineModels {
            classifier: &self.classifier,
            dict: &self.diffusion.dict,
            vae: self.vae.as_ref(),
            schema: &self.table.schema,
            vocab: &self.table.vocab,
        }
    }

    /// Index of a class given by name.
    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.table
            .classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class `{name}`")))
    }

    pub fn generate(
        &self,
        method: Method,
        x: &EncodedRow,
        y_prime: usize,
        guidance: &GuidanceConfig,
        baseline: &BaselineConfig,
    ) -> Result<CounterfactualSet> {
        match method.baseline() {
            None => generate_from_encoded(&self.diffusion, &self.classifier, x, y_prime, guidance),
            Some(m) => {
                let cfg = BaselineConfig {
                    method: m,
                    ..baseline.clone()
                };
                baseline_generate(&self.baseline_models(), x, y_prime, &cfg)
            }
        }
    }

    pub fn evaluate(
        &self,
        method: &str,
        rows: &[EncodedRow],
        x: &EncodedRow,
        y_prime: usize,
    ) -> Result<CounterfactualReport> {
        metrics::evaluate(
            method,
            rows,
            x,
            y_prime,
            &self.classifier,
            &self.diffusion.dict,
            self.oracles(),
        )
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>, reports: Option<&BundleReport>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let empty = TrainReport::default();
        let meta = |pick: fn(&BundleReport) -> &TrainReport| {
            train_metadata(reports.map_or(&empty, pick))
        };
        checkpoint::save_path(&self.diffusion, &self.table, meta(|r| &r.diffusion), dir.join(DIFFUSION_FILE))?;
        checkpoint::save_path(&self.classifier, &self.table, meta(|r| &r.classifier), dir.join(CLASSIFIER_FILE))?;
        checkpoint::save_path(&self.recurrent, &self.table, meta(|r| &r.recurrent), dir.join(RECURRENT_FILE))?;
        checkpoint::save_path(&self.transformer, &self.table, meta(|r| &r.transformer), dir.join(TRANSFORMER_FILE))?;
        if let Some(vae) = &self.vae {
            checkpoint::save_path(vae, &self.table, meta(|r| &r.vae), dir.join(VAE_FILE))?;
        }
        Ok(())
    }

    /// Loads a bundle directory; every checkpoint must share the diffusion
    /// model's schema digest. The VAE is optional.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let diffusion: Loaded<DiffusionModel> = checkpoint::load_path(dir.join(DIFFUSION_FILE), None)?;
        let digest = diffusion.header.schema_digest.clone();
        let table = diffusion.header.table.clone();
        fn part<M: Persist>(path: &Path, digest: &str) -> Result<M> {
            Ok(checkpoint::load_path::<M>(path, Some(digest))?.model)
        }
        let classifier: ClassifierNet = part(&dir.join(CLASSIFIER_FILE), &digest)?;
        let recurrent: ArPlausibilityModel = part(&dir.join(RECURRENT_FILE), &digest)?;
        let transformer: ArPlausibilityModel = part(&dir.join(TRANSFORMER_FILE), &digest)?;
        let vae_path = dir.join(VAE_FILE);
        let vae = if vae_path.exists() {
            Some(part::<TabularVae>(&vae_path, &digest)?)
        } else {
            None
        };
        if classifier.input_width() != diffusion.model.dict.row_width() {
            return Err(Error::Checkpoint(
                "classifier width does not match the embedding dictionary".into(),
            ));
        }
        Ok(Self {
            table,
            diffusion: diffusion.model,
            classifier,
            recurrent,
            transformer,
            vae,
        })
    }
}

/// Rows the classifier does not already assign to `y_prime`, in dataset order.
pub fn select_inputs(
    bundle: &ModelBundle,
    dataset: &Dataset,
    y_prime: usize,
    limit: usize,
) -> Result<Vec<EncodedRow>> {
    let predicted = metrics::predictions(&dataset.rows, &bundle.classifier, &bundle.diffusion.dict)?;
    Ok(dataset
        .rows
        .iter()
        .zip(predicted)
        .filter(|(_, p)| *p != y_prime)
        .map(|(r, _)| r.clone())
        .take(limit)
        .collect())
}

/// Inputs, target and method defaults shared by every grid cell.
#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub inputs: Vec<EncodedRow>,
    pub y_prime: usize,
    pub guidance: GuidanceConfig,
    pub baselines: BaselineDefaults,
    pub ablation: AblationConfig,
}

impl ExperimentPlan {
    pub fn from_config(inputs: Vec<EncodedRow>, y_prime: usize, cfg: &RunConfig) -> Self {
        Self {
            inputs,
            y_prime,
            guidance: cfg.guidance.clone(),
            baselines: cfg.baselines.clone(),
            ablation: cfg.ablation.clone(),
        }
    }

    fn baseline_for(&self, method: Method) -> BaselineConfig {
        self.baselines
            .get(method.baseline().unwrap_or(BaselineMethod::Dice))
            .clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    Methods,
    LossDrop,
    Steps,
    Strategies,
    Counts,
}

impl Grid {
    pub const ALL: [Grid; 5] = [
        Self::Methods,
        Self::LossDrop,
        Self::Steps,
        Self::Strategies,
        Self::Counts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Methods => "methods",
            Self::LossDrop => "loss-drop",
            Self::Steps => "steps",
            Self::Strategies => "strategies",
            Self::Counts => "counts",
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown grid `{s}`")))
    }
}

/// One grid cell: scores averaged over the plan's inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub grid: Grid,
    pub method: Method,
    pub setting: String,
    pub scores: Scores,
}

fn mean_scores(all: &[Scores]) -> Scores {
    let n = all.len().max(1) as f64;
    let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
    Scores {
        count: all.iter().map(|s| s.count).sum(),
        validity: avg(|s| s.validity),
        proximity: avg(|s| s.proximity),
        proximity_distance: avg(|s| s.proximity_distance),
        diversity: avg(|s| s.diversity),
        plausibility_recurrent: avg(|s| s.plausibility_recurrent),
        plausibility_transformer: avg(|s| s.plausibility_transformer),
    }
}

/// Averages one method's scores over every input; input `i` uses seed
/// `seed + i`.
pub fn run_cell(
    bundle: &ModelBundle,
    plan: &ExperimentPlan,
    method: Method,
    guidance: &GuidanceConfig,
    baseline: &BaselineConfig,
) -> Result<Scores> {
    if plan.inputs.is_empty() {
        return Err(Error::InvalidArgument("experiment has no inputs".into()));
    }
    let mut all = Vec::with_capacity(plan.inputs.len());
    for (i, x) in plan.inputs.iter().enumerate() {
        let g = GuidanceConfig {
            seed: guidance.seed.wrapping_add(i as u64),
            ..guidance.clone()
        };
        let b = BaselineConfig {
            seed: baseline.seed.wrapping_add(i as u64),
            ..baseline.clone()
        };
        let set = bundle.generate(method, x, plan.y_prime, &g, &b)?;
        all.push(bundle.evaluate(method.name(), &set.encoded, x, plan.y_prime)?.overall);
    }
    Ok(mean_scores(&all))
}

/// Which loss term a loss-drop cell disables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dropped {
    Nothing,
    Validity,
    Proximity,
    Diversity,
}

impl Dropped {
    pub const ALL: [Dropped; 4] = [Self::Nothing, Self::Validity, Self::Proximity, Self::Diversity];

    pub fn label(self) -> &'static str {
        match self {
            Self::Nothing => "all",
            Self::Validity => "no-validity",
            Self::Proximity => "no-proximity",
            Self::Diversity => "no-diversity",
        }
    }

    pub fn apply_guidance(self, cfg: &GuidanceConfig) -> GuidanceConfig {
        let mut c = cfg.clone();
        match self {
            Self::Nothing => {}
            Self::Validity => c.lambda_validity = 0.0,
            Self::Proximity => c.lambda_proximity = 0.0,
            Self::Diversity => c.lambda_diversity = 0.0,
        }
        c
    }

    pub fn apply_baseline(self, cfg: &BaselineConfig) -> BaselineConfig {
        let mut c = cfg.clone();
        match self {
            Self::Nothing => {}
            Self::Validity => c.lambda_validity = 0.0,
            Self::Proximity => c.lambda_proximity = 0.0,
            Self::Diversity => c.lambda_diversity = 0.0,
        }
        c
    }
}

/// Runs every cell of `grid`.
pub fn run_grid(bundle: &ModelBundle, plan: &ExperimentPlan, grid: Grid) -> Result<Vec<Cell>> {
    let mut cells = vec![];
    let mut push = |method: Method, setting: String, g: &GuidanceConfig, b: &BaselineConfig| {
        let scores = run_cell(bundle, plan, method, g, b)?;
        log::info!("{grid} {method} {setting}: {scores:?}");
        cells.push(Cell {
            grid,
            method,
            setting,
            scores,
        });
        Ok::<_, Error>(())
    };
    let dice = plan.baseline_for(Method::Dice);
    match grid {
        Grid::Methods => {
            for m in Method::ALL {
                if m == Method::DiceVae && bundle.vae.is_none() {
                    continue;
                }
                push(m, "default".into(), &plan.guidance, &plan.baseline_for(m))?;
            }
        }
        Grid::LossDrop => {
            for m in [Method::Scd, Method::Dice] {
                for d in Dropped::ALL {
                    push(
                        m,
                        d.label().into(),
                        &d.apply_guidance(&plan.guidance),
                        &d.apply_baseline(&dice),
                    )?;
                }
            }
        }
        Grid::Steps => {
            for &tau in &plan.ablation.taus {
                for noise in [true, false] {
                    let g = GuidanceConfig {
                        tau: Some(tau),
                        add_initial_noise: noise,
                        ..plan.guidance.clone()
                    };
                    push(Method::Scd, format!("tau={tau} noise={noise}"), &g, &dice)?;
                }
            }
        }
        Grid::Strategies => {
            for s in SamplingStrategy::ALL {
                let g = GuidanceConfig {
                    strategy: s,
                    ..plan.guidance.clone()
                };
                push(Method::Scd, format!("strategy={s}"), &g, &dice)?;
            }
        }
        Grid::Counts => {
            for &b in &plan.ablation.counts {
                let g = GuidanceConfig {
                    count: b,
                    ..plan.guidance.clone()
                };
                push(Method::Scd, format!("count={b}"), &g, &dice)?;
            }
        }
    }
    Ok(cells)
}

#[derive(Serialize)]
struct CsvCell<'a> {
    grid: &'a str,
    method: &'a str,
    setting: &'a str,
    count: usize,
    validity: f64,
    proximity: f64,
    proximity_distance: f64,
    diversity: f64,
    plausibility_recurrent: f64,
    plausibility_transformer: f64,
}

/// Plot data: one CSV line per cell.
pub fn write_cells_csv(out: impl Write, cells: &[Cell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        let s = &c.scores;
        w.serialize(CsvCell {
            grid: c.grid.name(),
            method: c.method.name(),
            setting: &c.setting,
            count: s.count,
            validity: s.validity,
            proximity: s.proximity,
            proximity_distance: s.proximity_distance,
            diversity: s.diversity,
            plausibility_recurrent: s.plausibility_recurrent,
            plausibility_transformer: s.plausibility_transformer,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per cell.
pub fn write_cells_jsonl(mut out: impl Write, cells: &[Cell]) -> Result<()> {
    for c in cells {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
