use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tabcf_bench::fixture;
use tabcf_core::baselines::{baseline_generate, BaselineConfig, BaselineMethod};
use tabcf_core::checkpoint;
use tabcf_core::diffusion::{cosine_schedule, denoise_step, Clamp};
use tabcf_core::experiment::Method;
use tabcf_core::guidance::{generate_from_encoded, guiding_loss, GuidanceConfig};
use tabcf_core::nn::SamplingStrategy;
use tabcf_core::Tensor;

fn schedule(c: &mut Criterion) {
    c.bench_function("cosine_schedule/2000", |b| b.iter(|| cosine_schedule(2000, 0.008).unwrap()));
}

fn diffusion(c: &mut Criterion) {
    let f = fixture();
    let model = &f.bundle.diffusion;
    let [cols, d] = model.row_shape();
    let clamp = Some(Clamp {
        strategy: SamplingStrategy::Max,
        temperature: 1.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Tensor::randn(&[8, cols, d], &mut rng);
    c.bench_function("denoise_step/B8", |b| {
        b.iter(|| denoise_step(&z, 50, model, &mut rng, clamp).unwrap())
    });
    c.bench_function("reverse_lookup/B8/max", |b| {
        b.iter(|| model.dict.reverse_lookup(&z, SamplingStrategy::Max, 1.0, &mut rng).unwrap())
    });
}

fn guidance(c: &mut Criterion) {
    let f = fixture();
    let model = &f.bundle.diffusion;
    let x = &f.dataset.rows[0];
    let z = model.dict.embed_row(x).unwrap().repeat(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zp = z.zip_map(&Tensor::randn(z.shape(), &mut rng), |a, e| a + 0.3 * e).unwrap();
    let cfg = GuidanceConfig::default();
    c.bench_function("guiding_loss_and_grad/B4", |b| {
        b.iter(|| guiding_loss(&zp, &z, &f.bundle.classifier, 1, &cfg).unwrap())
    });
    let mut group = c.benchmark_group("generate");
    group.sample_size(20);
    group.bench_function("scd/tau50/B4", |b| {
        b.iter_batched(
            || GuidanceConfig::default(),
            |g| generate_from_encoded(model, &f.bundle.classifier, x, 1, &g).unwrap(),
            BatchSize::SmallInput,
        )
    });
    for m in BaselineMethod::ALL {
        let cfg = BaselineConfig::for_method(m);
        group.bench_function(format!("{m}/B4"), |b| {
            b.iter(|| baseline_generate(&f.bundle.baseline_models(), x, 1, &cfg).unwrap())
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let f = fixture();
    let rows = &f.dataset.rows[..32];
    c.bench_function("evaluate/32rows", |b| {
        b.iter(|| f.bundle.evaluate(Method::Scd.name(), rows, &rows[0], 1).unwrap())
    });
    c.bench_function("checkpoint/diffusion_to_bytes", |b| {
        b.iter(|| checkpoint::to_bytes(&f.bundle.diffusion, &f.bundle.table, Default::default()).unwrap())
    });
}

criterion_group!(benches, schedule, diffusion, guidance, scoring);
criterion_main!(benches);
