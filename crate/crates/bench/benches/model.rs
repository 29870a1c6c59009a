use criterion::{criterion_group, criterion_main, Criterion};
use idet_bench::pairs;
use idet_core::data::{batch_images, ImagePair};
use idet_core::training::{TrainConfig, Trainer};
use idet_core::{Model, ModelConfig, RngSeed, Session, Variant};

fn forward(c: &mut Criterion) {
    let data = pairs(4);
    let refs: Vec<&ImagePair> = data.iter().collect();
    let (x, y) = batch_images(&refs).unwrap();
    let mut group = c.benchmark_group("forward_batch4_64px");
    group.sample_size(10);
    for v in [Variant::Full, Variant::NoEnhance, Variant::CnnEnhance] {
        let mut cfg = ModelConfig::default();
        cfg.net.variant = v;
        let (model, store) = Model::init::<f32>(&cfg, RngSeed(0)).unwrap();
        group.bench_function(v.as_str(), |bench| {
            bench.iter(|| {
                let mut s = Session::new(&store, false);
                let (xv, yv) = (s.graph.input(x.clone()), s.graph.input(y.clone()));
                model.forward(&mut s, xv, yv).unwrap().logits
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let data = pairs(4);
    let refs: Vec<&ImagePair> = data.iter().collect();
    let mut trainer = Trainer::new(&ModelConfig::default(), &TrainConfig::default()).unwrap();
    let mut group = c.benchmark_group("train_step_batch4_64px");
    group.sample_size(10);
    group.bench_function("full", |bench| bench.iter(|| trainer.train_step(&refs).unwrap().loss));
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
