//! Shared fixtures for the benchmarks.

use std::sync::OnceLock;

use tabcf_core::config::RunConfig;
use tabcf_core::experiment::ModelBundle;
use tabcf_core::synthetic;
use tabcf_core::tabular::Dataset;

pub struct Fixture {
    pub dataset: Dataset,
    pub bundle: ModelBundle,
    pub config: RunConfig,
}

/// Benchmark table with desk-default models, trained once per process.
pub fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut config = synthetic::benchmark_config(0);
        config.diffusion.train.epochs = 5;
        config.classifier.train.epochs = 5;
        config.plausibility.train.epochs = 2;
        config.vae.train.epochs = 2;
        let dataset = synthetic::dataset(600, synthetic::BENCHMARK_BINS, 0).unwrap();
        let (bundle, _) = ModelBundle::train(&dataset, &config).unwrap();
        Fixture {
            dataset,
            bundle,
            config,
        }
    })
}
