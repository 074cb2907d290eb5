//! Synthetic benchmark table with planted structure.
//!
//! Columns: `a` (6 categories), `b` (a fixed permutation of `a`), `c`
//! (numeric, uniform), `d` (numeric, noisy copy of `c`), `e` (4 skewed
//! categories), `f` (numeric, independent). The label is `1` iff `a` is one
//! of the first three categories and `c >= 40`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::config::RunConfig;
use crate::error::Result;
use crate::tabular::{Binning, Dataset, Row, TableOptions, Value};

pub const A_VALUES: usize = 6;
pub const NUMERIC_COLUMNS: [&str; 3] = ["c", "d", "f"];
pub const LABEL: &str = "y";
pub const BENCHMARK_ROWS: usize = 2000;
pub const BENCHMARK_BINS: usize = 8;
/// Class the benchmark asks counterfactuals for.
pub const TARGET_CLASS: &str = "1";

const E_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// Category of `b` implied by category `a`.
pub fn b_of_a(a: usize) -> usize {
    (5 * a + 2) % A_VALUES
}

pub fn header() -> Vec<String> {
    ["a", "b", "c", "d", "e", "f", LABEL]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn label_rule(a: usize, c: f64) -> bool {
    a < 3 && c >= 40.0
}

/// Raw text records (header order) for `rows` rows.
pub fn records(rows: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 5.0).unwrap();
    let exp = Exp::new(0.1).unwrap();
    (0..rows)
        .map(|_| {
            let a = rng.random_range(0..A_VALUES);
            let c: f64 = rng.random_range(0.0..100.0);
            let d = 0.5 * c + noise.sample(&mut rng);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let e = E_WEIGHTS
                .iter()
                .position(|w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(E_WEIGHTS.len() - 1);
            let f = exp.sample(&mut rng);
            vec![
                format!("a{a}"),
                format!("b{}", b_of_a(a)),
                format!("{c:.2}"),
                format!("{d:.2}"),
                format!("e{e}"),
                format!("{f:.2}"),
                u8::from(label_rule(a, c)).to_string(),
            ]
        })
        .collect()
}

pub fn table_options(bin_count: usize) -> TableOptions {
    TableOptions {
        numeric_columns: NUMERIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
        label_column: LABEL.into(),
        bin_count,
        binning: Binning::EqualFrequency,
    }
}

/// Benchmark dataset with `rows` rows and the given numeric bin count.
pub fn dataset(rows: usize, bin_count: usize, seed: u64) -> Result<Dataset> {
    Dataset::from_records(&header(), &records(rows, seed), &table_options(bin_count))
}

/// Run configuration matching the benchmark's column layout.
pub fn benchmark_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.data.numeric_columns = NUMERIC_COLUMNS.iter().map(|s| s.to_string()).collect();
    cfg.data.label_column = LABEL.into();
    cfg.data.bin_count = BENCHMARK_BINS;
    cfg
}

pub fn write_csv(out: impl Write, rows: usize, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header())?;
    for r in records(rows, seed) {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn category(v: &Value, prefix: char) -> Option<usize> {
    match v {
        Value::Text(s) => s.strip_prefix(prefix)?.parse().ok(),
        Value::Number(_) => None,
    }
}

/// Whether a decoded feature row breaks the `a -> b` rule.
pub fn violates_rule(row: &Row) -> bool {
    match (row.values.first(), row.values.get(1)) {
        (Some(a), Some(b)) => match (category(a, 'a'), category(b, 'b')) {
            (Some(a), Some(b)) => b_of_a(a) != b,
            _ => true,
        },
        _ => true,
    }
}

pub fn violation_rate(rows: &[Row]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| violates_rule(r)).count() as f64 / rows.len() as f64
}

/// Violation rate of rows whose `a` and `b` are drawn independently and
/// uniformly.
pub fn uniform_violation_rate() -> f64 {
    1.0 - 1.0 / A_VALUES as f64
}
