//! Command-line interface.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as JsonValue};

use tabcf_core::checkpoint::{self, Loaded, TableMeta};
use tabcf_core::config::RunConfig;
use tabcf_core::diffusion::{sample_unconditional, train_diffusion, Clamp, DiffusionModel};
use tabcf_core::experiment::{
    run_grid, select_inputs, write_cells_csv, write_cells_jsonl, ExperimentPlan, Grid, Method,
    ModelBundle, CLASSIFIER_FILE, DIFFUSION_FILE, RECURRENT_FILE, TRANSFORMER_FILE, VAE_FILE,
};
use tabcf_core::nn::{
    Module,
    train_classifier, train_plausibility, train_vae, ArVariant, ClassifierNet, SamplingStrategy,
    TrainReport,
};
use tabcf_core::synthetic;
use tabcf_core::tabular::{Dataset, EncodedRow};

use crate::rows::{
    column_names, generation_view, parse_row_fields, parse_row_object, parse_rows_csv,
    row_object, schema_view,
};
use crate::service::{self, ServiceState};

#[derive(Parser, Debug)]
#[command(name = "tabcf", version, about = "Counterfactual explanations for tabular classifiers")]
pub struct Cli {
    /// JSON configuration overlaid on the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the larger published training schedule instead of desk defaults.
    #[arg(long, global = true)]
    pub published_preset: bool,
    /// Run seed; every component seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated numeric (binned) columns.
    #[arg(long, value_delimiter = ',')]
    pub numeric: Option<Vec<String>>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelsArg {
    /// Directory holding the checkpoints.
    #[arg(long, default_value = "models")]
    pub models: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RowArgs {
    /// Feature values in schema order, comma-separated.
    #[arg(long, conflicts_with_all = ["row_json", "row_index"])]
    pub row: Option<String>,
    /// Row as a JSON object keyed by column name.
    #[arg(long)]
    pub row_json: Option<String>,
    /// Index of a row in the training data.
    #[arg(long)]
    pub row_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OracleChoice {
    Recurrent,
    Transformer,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic benchmark table and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synthetic::BENCHMARK_ROWS)]
        rows: usize,
        /// Where to write the matching configuration.
        #[arg(long)]
        config_out: Option<PathBuf>,
    },
    /// Print the inferred schema (from data, or from a checkpoint directory).
    Schema {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train the diffusion model and its embedding dictionary.
    TrainDiffusion {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
    },
    /// Train the black-box classifier on the frozen embeddings.
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
    },
    /// Train the autoregressive plausibility oracles.
    TrainPlausibility {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
        #[arg(long, value_enum, default_value = "both")]
        variant: OracleChoice,
    },
    /// Train the VAE used by the DiCE-VAE baseline.
    TrainVae {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
    },
    /// Train every model in sequence.
    TrainAll {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
    },
    /// Generate counterfactuals for one row.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
        #[command(flatten)]
        row: RowArgs,
        /// Desired class label.
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "scd")]
        method: Method,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        strategy: Option<SamplingStrategy>,
        #[arg(long)]
        no_initial_noise: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss trace, one JSON object per line.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score counterfactual rows against an input row.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
        #[command(flatten)]
        row: RowArgs,
        /// CSV of counterfactual rows with a header.
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "submitted")]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run comparison and ablation grids.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelsArg,
        /// Grid name, or `all`.
        #[arg(long, default_value = "all")]
        grid: String,
        #[arg(long)]
        target: String,
        /// Inputs averaged per cell (default from config).
        #[arg(long)]
        inputs: Option<usize>,
        /// One JSON line per cell (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plot data: one CSV row per cell.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Draw unconditional samples from the diffusion model.
    Sample {
        #[command(flatten)]
        models: ModelsArg,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "max")]
        strategy: SamplingStrategy,
        /// Snap predictions to the dictionary at every step.
        #[arg(long)]
        clamp: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        models: ModelsArg,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = if cli.published_preset {
        RunConfig::published_preset()
    } else {
        RunConfig::default()
    };
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            base.overlay(serde_json::from_str(&text)?)?
        }
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(p) = &data.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(n) = &data.numeric {
        cfg.data.numeric_columns = n.clone();
    }
    if let Some(l) = &data.label {
        cfg.data.label_column = l.clone();
    }
    if let Some(b) = data.bins {
        cfg.data.bin_count = b;
    }
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| anyhow!("no training data: pass --data or set data.path in the config"))?;
    Dataset::from_csv_path(path, &cfg.data.table_options())
        .with_context(|| format!("loading {}", path.display()))
}

/// The dataset must describe the same table the checkpoints were trained on.
fn check_digest(ds: &Dataset, expected: &str) -> anyhow::Result<()> {
    let found = ds.digest();
    if found != expected {
        bail!(tabcf_core::Error::SchemaMismatch {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

fn load_diffusion(dir: &Path) -> anyhow::Result<Loaded<DiffusionModel>> {
    let path = dir.join(DIFFUSION_FILE);
    checkpoint::load_path(&path, None)
        .with_context(|| format!("loading the diffusion checkpoint {}", path.display()))
}

fn metadata(report: &TrainReport, cfg: &RunConfig) -> BTreeMap<String, JsonValue> {
    BTreeMap::from([
        ("created_with".into(), json!(concat!("tabcf ", env!("CARGO_PKG_VERSION")))),
        ("final_loss".into(), json!(report.final_loss())),
        ("epochs".into(), json!(report.epoch_losses.len())),
        ("seed".into(), json!(cfg.seed)),
    ])
}

fn open_out(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn report_line(out: &mut dyn Write, model: &str, path: &Path, report: &TrainReport) -> anyhow::Result<()> {
    serde_json::to_writer(
        &mut *out,
        &json!({
            "model": model,
            "path": path,
            "epochs": report.epoch_losses.len(),
            "steps": report.steps,
            "final_loss": report.final_loss(),
        }),
    )?;
    writeln!(out)?;
    Ok(())
}

fn resolve_row(args: &RowArgs, table: &TableMeta, cfg: &RunConfig) -> anyhow::Result<EncodedRow> {
    if let Some(text) = &args.row {
        return Ok(parse_row_fields(text, table)?);
    }
    if let Some(text) = &args.row_json {
        let v: JsonValue = serde_json::from_str(text).context("--row-json is not JSON")?;
        let obj = v.as_object().ok_or_else(|| anyhow!("--row-json must be a JSON object"))?;
        return Ok(parse_row_object(obj, table)?);
    }
    if let Some(i) = args.row_index {
        let ds = load_dataset(cfg)?;
        check_digest(&ds, &table.digest())?;
        return ds
            .rows
            .get(i)
            .cloned()
            .ok_or_else(|| anyhow!("row index {i} out of range ({} rows)", ds.len()));
    }
    bail!(
        "no input row: pass --row ({}), --row-json or --row-index",
        column_names(table).join(",")
    )
}

fn class_id(bundle: &ModelBundle, name: &str) -> anyhow::Result<usize> {
    bundle.class_id(name).map_err(|_| {
        anyhow!(
            "unknown class `{name}`; expected one of {}",
            bundle.table.classes.join(", ")
        )
    })
}

/// Runs one command, writing results to `stdout` unless an output file is given.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            out,
            rows,
            config_out,
        } => {
            synthetic::write_csv(File::create(&out)?, rows, cfg.seed)?;
            if let Some(path) = config_out {
                let mut bench = synthetic::benchmark_config(cfg.seed);
                bench.data.path = Some(out.clone());
                let data = serde_json::to_value(&bench.data)?;
                std::fs::write(&path, serde_json::to_string_pretty(&json!({ "data": data }))? + "\n")?;
            }
        }
        Command::Schema { data, models } => {
            let table = match models {
                Some(dir) => load_diffusion(&dir)?.header.table,
                None => {
                    apply_data(&mut cfg, &data);
                    TableMeta::of(&load_dataset(&cfg)?)
                }
            };
            let mut out = open_out(None)?;
            serde_json::to_writer_pretty(&mut out, &schema_view(&table))?;
            writeln!(out)?;
        }
        Command::TrainDiffusion { data, models } => {
            apply_data(&mut cfg, &data);
            let ds = load_dataset(&cfg)?;
            std::fs::create_dir_all(&models.models)?;
            let (mut model, report) = train_diffusion(&ds, &cfg.diffusion)?;
            model.round_to_f32();
            let path = models.models.join(DIFFUSION_FILE);
            checkpoint::save_path(&model, &TableMeta::of(&ds), metadata(&report, &cfg), &path)?;
            report_line(&mut *open_out(None)?, "diffusion", &path, &report)?;
        }
        Command::TrainClassifier { data, models } => {
            apply_data(&mut cfg, &data);
            train_classifier_cmd(&cfg, &models.models)?;
        }
        Command::TrainPlausibility {
            data,
            models,
            variant,
        } => {
            apply_data(&mut cfg, &data);
            train_plausibility_cmd(&cfg, &models.models, variant)?;
        }
        Command::TrainVae { data, models } => {
            apply_data(&mut cfg, &data);
            train_vae_cmd(&cfg, &models.models)?;
        }
        Command::TrainAll { data, models } => {
            apply_data(&mut cfg, &data);
            let ds = load_dataset(&cfg)?;
            let (bundle, report) = ModelBundle::train(&ds, &cfg)?;
            bundle.save_dir(&models.models, Some(&report))?;
            let mut out = open_out(None)?;
            for (name, file, r) in [
                ("diffusion", DIFFUSION_FILE, &report.diffusion),
                ("classifier", CLASSIFIER_FILE, &report.classifier),
                ("recurrent", RECURRENT_FILE, &report.recurrent),
                ("transformer", TRANSFORMER_FILE, &report.transformer),
                ("vae", VAE_FILE, &report.vae),
            ] {
                report_line(&mut *out, name, &models.models.join(file), r)?;
            }
        }
        Command::Generate {
            data,
            models,
            row,
            target,
            method,
            count,
            tau,
            eta,
            strategy,
            no_initial_noise,
            out,
            trace,
        } => {
            apply_data(&mut cfg, &data);
            let bundle = ModelBundle::load_dir(&models.models)?;
            let x = resolve_row(&row, &bundle.table, &cfg)?;
            let y = class_id(&bundle, &target)?;
            let mut g = cfg.guidance.clone();
            let mut b = method
                .baseline()
                .map(|m| cfg.baselines.get(m).clone())
                .unwrap_or_else(|| cfg.baselines.dice.clone());
            if let Some(c) = count {
                g.count = c;
                b.count = c;
            }
            g.tau = tau.or(g.tau);
            g.eta = eta.unwrap_or(g.eta);
            g.strategy = strategy.unwrap_or(g.strategy);
            g.add_initial_noise &= !no_initial_noise;
            let set = bundle.generate(method, &x, y, &g, &b)?;
            let report = bundle.evaluate(method.name(), &set.encoded, &x, y)?;
            let view = generation_view(&bundle.table, &x, y, &set, report)?;
            let mut w = open_out(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &view)?;
            writeln!(w)?;
            if let Some(path) = trace {
                tabcf_core::guidance::write_trace(BufWriter::new(File::create(path)?), &set.loss_trace)?;
            }
        }
        Command::Evaluate {
            data,
            models,
            row,
            rows,
            target,
            method,
            out,
        } => {
            apply_data(&mut cfg, &data);
            let bundle = ModelBundle::load_dir(&models.models)?;
            let x = resolve_row(&row, &bundle.table, &cfg)?;
            let y = class_id(&bundle, &target)?;
            let text = std::fs::read_to_string(&rows).with_context(|| format!("reading {}", rows.display()))?;
            let cfs = parse_rows_csv(&text, &bundle.table)?;
            let report = bundle.evaluate(&method, &cfs, &x, y)?;
            let mut w = open_out(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
        }
        Command::Ablate {
            data,
            models,
            grid,
            target,
            inputs,
            out,
            csv,
        } => {
            apply_data(&mut cfg, &data);
            let bundle = ModelBundle::load_dir(&models.models)?;
            let ds = load_dataset(&cfg)?;
            check_digest(&ds, &bundle.digest())?;
            let y = class_id(&bundle, &target)?;
            let grids: Vec<Grid> = if grid == "all" {
                Grid::ALL.to_vec()
            } else {
                grid.split(',').map(str::parse).collect::<Result<_, _>>()?
            };
            let n = inputs.unwrap_or(cfg.ablation.inputs);
            let chosen = select_inputs(&bundle, &ds, y, n)?;
            if chosen.is_empty() {
                bail!("no training row is predicted outside class `{target}`");
            }
            let plan = ExperimentPlan::from_config(chosen, y, &cfg);
            let mut cells = vec![];
            for g in grids {
                cells.extend(run_grid(&bundle, &plan, g)?);
            }
            write_cells_jsonl(open_out(out.as_deref())?, &cells)?;
            if let Some(p) = csv {
                write_cells_csv(File::create(p)?, &cells)?;
            }
        }
        Command::Sample {
            models,
            count,
            strategy,
            clamp,
            out,
        } => {
            let loaded = load_diffusion(&models.models)?;
            let table = &loaded.header.table;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let clamp = clamp.then_some(Clamp {
                strategy,
                temperature: 1.0,
            });
            let (_, rows) = sample_unconditional(&loaded.model, count, &mut rng, strategy, clamp)?;
            let mut w = csv::Writer::from_writer(open_out(out.as_deref())?);
            w.write_record(column_names(table))?;
            for r in &rows {
                w.write_record(row_object(r, table).values().map(|v| match v {
                    JsonValue::String(s) => s.clone(),
                    other => other.to_string(),
                }))?;
            }
            w.flush()?;
        }
        Command::Serve { models, addr } => {
            let state = ServiceState::load(&models.models, &cfg)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(service::serve(Arc::new(state), &addr))?;
        }
    }
    Ok(())
}

fn train_classifier_cmd(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let diffusion = load_diffusion(dir)?;
    let ds = load_dataset(cfg)?;
    check_digest(&ds, &diffusion.header.schema_digest)?;
    let (mut f, report) = train_classifier(&ds, &diffusion.model.dict, cfg.classifier.hidden, &cfg.classifier.train)?;
    f.round_to_f32();
    let path = dir.join(CLASSIFIER_FILE);
    checkpoint::save_path::<ClassifierNet>(&f, &diffusion.header.table, metadata(&report, cfg), &path)?;
    report_line(&mut *open_out(None)?, "classifier", &path, &report)
}

fn train_plausibility_cmd(cfg: &RunConfig, dir: &Path, which: OracleChoice) -> anyhow::Result<()> {
    let ds = load_dataset(cfg)?;
    let table = match checkpoint::load_path::<DiffusionModel>(dir.join(DIFFUSION_FILE), None) {
        Ok(d) => {
            check_digest(&ds, &d.header.schema_digest)?;
            d.header.table
        }
        Err(_) => TableMeta::of(&ds),
    };
    std::fs::create_dir_all(dir)?;
    let variants: &[(ArVariant, &str, &str)] = match which {
        OracleChoice::Recurrent => &[(ArVariant::Recurrent, "recurrent", RECURRENT_FILE)],
        OracleChoice::Transformer => &[(ArVariant::CausalTransformer, "transformer", TRANSFORMER_FILE)],
        OracleChoice::Both => &[
            (ArVariant::Recurrent, "recurrent", RECURRENT_FILE),
            (ArVariant::CausalTransformer, "transformer", TRANSFORMER_FILE),
        ],
    };
    let mut out = open_out(None)?;
    for &(variant, name, file) in variants {
        let (mut m, report) = train_plausibility(&ds, variant, cfg.plausibility.shape(), &cfg.plausibility.train)?;
        m.round_to_f32();
        let path = dir.join(file);
        checkpoint::save_path(&m, &table, metadata(&report, cfg), &path)?;
        report_line(&mut *out, name, &path, &report)?;
    }
    Ok(())
}

fn train_vae_cmd(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let diffusion = load_diffusion(dir)?;
    let ds = load_dataset(cfg)?;
    check_digest(&ds, &diffusion.header.schema_digest)?;
    let (mut vae, report) = train_vae(&ds, &diffusion.model.dict, cfg.vae.hidden, cfg.vae.latent, &cfg.vae.train)?;
    vae.round_to_f32();
    let path = dir.join(VAE_FILE);
    checkpoint::save_path(&vae, &diffusion.header.table, metadata(&report, cfg), &path)?;
    report_line(&mut *open_out(None)?, "vae", &path, &report)
}
