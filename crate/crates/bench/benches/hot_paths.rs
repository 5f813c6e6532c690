use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmlab_core::discretize::{kernel_discrepancy_report, FIG_DEGREES, FIG_DTS, FIG_STEPS};
use ssmlab_core::hippo::build_operator;
use ssmlab_core::models::{init_model, Batch, Core};
use ssmlab_core::train::{train_step, training_batch, AdamState, TrainConfig};
use ssmlab_core::Basis;

fn kernel_sweep(c: &mut Criterion) {
    let op = build_operator(Basis::LegS, 64).unwrap();
    c.bench_function("kernel sweep legs N=64", |b| {
        b.iter(|| kernel_discrepancy_report(black_box(&op), &FIG_DTS, FIG_STEPS, &FIG_DEGREES).unwrap())
    });
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        ..TrainConfig::default()
    }
}

fn ssm_layer(c: &mut Criterion) {
    let cfg = desk_config();
    let model = init_model::<f32>(&cfg.model_spec(), 0).unwrap();
    let Core::Ssm(layer) = &model.core else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array3::from_shape_simple_fn((cfg.batch_size, 2 * cfg.seq_len, cfg.channels), || {
        rng.random_range(-1.0f32..1.0)
    });
    let mut g = c.benchmark_group("ssm layer B=64 T=64 H=64 N=32");
    g.bench_function("conv forward", |b| {
        b.iter(|| layer.forward_conv(black_box(x.view())).unwrap())
    });
    g.bench_function("scan forward", |b| {
        b.iter(|| layer.forward_scan(black_box(x.view())).unwrap())
    });
    g.bench_function("conv forward+backward", |b| {
        b.iter(|| {
            let (y, cache) = layer.forward_conv_cached(x.view()).unwrap();
            layer.backward_conv(&cache, y.view()).unwrap()
        })
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("train step desk config");
    for core in ["ssm", "lstm"] {
        let cfg = TrainConfig {
            core: core.parse().unwrap(),
            ..desk_config()
        };
        let reg = cfg.registry().unwrap();
        let batch = Batch::new(&training_batch(&cfg, Some(&reg), 0).unwrap(), cfg.task).unwrap();
        let model = init_model::<f32>(&cfg.model_spec(), 0).unwrap();
        let adam = AdamState::new(&model, cfg.beta1, cfg.beta2, cfg.eps);
        g.bench_function(core, |b| {
            b.iter_batched(
                || (model.clone(), adam.clone()),
                |(mut m, mut s)| train_step(&mut m, &mut s, &batch, 1e-3, 1.0).unwrap(),
                BatchSize::LargeInput,
            )
        });
        g.bench_function(format!("{core} batch generation"), |b| {
            let mut it = 0;
            b.iter(|| {
                it += 1;
                training_batch(&cfg, Some(&reg), it).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernel_sweep, ssm_layer, training
}
criterion_main!(benches);
