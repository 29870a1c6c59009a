use std::fs;

use idet_core::checkpoint;
use idet_core::data::{synth_pair, ImagePair, SynthConfig};
use idet_core::experiments::gradcheck::blob_masks;
use idet_core::experiments::runs;
use idet_core::training::{
    cross_entropy_map, focal_loss_map, total_loss, Adam, AdamConfig, LossMode, RunDir, TrainConfig, Trainer,
};
use idet_core::{Arch, Error, Graph, Mask, Model, ModelConfig, ParamStore, RngSeed, Session, Tensor, Variant};
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = RngSeed(seed).rng();
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn small_model() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.net.unet.base_channels = 4;
    c.net.idet.channels = 8;
    c.net.idet.heads = 2;
    c
}

fn small_data(n: usize, seed: u64) -> Vec<ImagePair> {
    let cfg = SynthConfig {
        n_pairs: n,
        height: 32,
        width: 32,
        seed: RngSeed(seed),
        ..SynthConfig::default()
    };
    (0..n).map(|i| synth_pair(&cfg, i).unwrap()).collect()
}

fn loss_value(logits: &Tensor<f64>, gt: &[Mask], gamma: f64) -> f64 {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let v = focal_loss_map(&mut g, l, gt, gamma).unwrap();
    g.value(v).item()
}

/// -(1 - p_t)^gamma ln p_t averaged over pixels, straight from the definition.
fn focal_oracle(logits: &Tensor<f64>, gt: &[Mask], gamma: f64) -> f64 {
    let (n, h, w) = (logits.shape()[0], logits.shape()[2], logits.shape()[3]);
    let d = logits.data();
    let mut total = 0.0;
    for b in 0..n {
        let m = gt[b].resize_nearest(h, w);
        for y in 0..h {
            for x in 0..w {
                let z0 = d[((b * 2) * h + y) * w + x];
                let z1 = d[((b * 2 + 1) * h + y) * w + x];
                let p1 = 1.0 / (1.0 + (z0 - z1).exp());
                let pt = if m.get(y, x) { p1 } else { 1.0 - p1 };
                total += -(1.0 - pt).powf(gamma) * pt.ln();
            }
        }
    }
    total / (n * h * w) as f64
}

#[test]
fn cross_entropy_reference_values() {
    let gt = blob_masks(2, 8, 8, RngSeed(1));
    let uniform = Tensor::<f64>::zeros(&[2, 2, 8, 8]);
    assert!((loss_value(&uniform, &gt, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    // logit 20 on the true class everywhere
    let confident = Tensor::from_fn(&[2, 2, 8, 8], |i| {
        let (b, c, p) = (i / 128, (i / 64) % 2, i % 64);
        if (c == 1) == gt[b].data()[p].eq(&1) {
            20.0
        } else {
            0.0
        }
    });
    assert!(loss_value(&confident, &gt, 0.0) < 1e-8);
    let logits = rand_tensor(&[2, 2, 8, 8], 2, 3.0);
    assert!((loss_value(&logits, &gt, 0.0) - focal_oracle(&logits, &gt, 0.0)).abs() < 1e-6);
}

#[test]
fn focal_loss_matches_its_definition() {
    let gt = blob_masks(2, 16, 16, RngSeed(3));
    let logits = rand_tensor(&[2, 2, 8, 8], 4, 3.0);
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let ce = cross_entropy_map(&mut g, l, &gt).unwrap();
    let f0 = focal_loss_map(&mut g, l, &gt, 0.0).unwrap();
    assert!((g.value(ce).item() - g.value(f0).item()).abs() < 1e-7);
    for gamma in [0.5, 2.0, 5.0] {
        assert!((loss_value(&logits, &gt, gamma) - focal_oracle(&logits, &gt, gamma)).abs() < 1e-6);
    }
    assert!(loss_value(&logits, &gt, 2.0) < loss_value(&logits, &gt, 0.0));
}

#[test]
fn multi_loss_is_the_sum_of_its_terms() {
    let (model, store) = Model::init::<f64>(&small_model(), RngSeed(5)).unwrap();
    let gt = blob_masks(2, 32, 32, RngSeed(6));
    let mut s = Session::new(&store, true);
    let x = s.graph.input(rand_tensor(&[2, 3, 32, 32], 7, 1.0));
    let y = s.graph.input(rand_tensor(&[2, 3, 32, 32], 8, 1.0));
    let maps = model.forward(&mut s, x, y).unwrap();
    let lb = total_loss(&mut s.graph, &maps, &gt, LossMode::MultiCe, 2.0).unwrap();
    let names: Vec<&str> = lb.terms.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["M0", "M1", "M2", "M3", "M4", "M5", "M"]);
    let sum = lb.terms.iter().fold(0.0, |a, (_, v)| a + s.graph.value(*v).item());
    assert_eq!(s.graph.value(lb.total).item(), sum);
    let single = total_loss(&mut s.graph, &maps, &gt, LossMode::SingleCe, 2.0).unwrap();
    assert_eq!(single.terms.len(), 1);
    assert_eq!(s.graph.value(single.total).item(), s.graph.value(lb.terms[6].1).item());
}

#[test]
fn multi_loss_needs_intermediate_maps() {
    let mut cfg = small_model();
    cfg.arch = Arch::Basic;
    let (model, store) = Model::init::<f64>(&cfg, RngSeed(9)).unwrap();
    let mut s = Session::new(&store, true);
    let x = s.graph.input(rand_tensor(&[1, 3, 32, 32], 10, 1.0));
    let maps = model.forward(&mut s, x, x).unwrap();
    let gt = blob_masks(1, 32, 32, RngSeed(11));
    assert!(matches!(
        total_loss(&mut s.graph, &maps, &gt, LossMode::MultiCe, 2.0),
        Err(Error::Config(_))
    ));
}

fn scalar_store(w: f64) -> (ParamStore<f64>, idet_core::ParamId) {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::scalar(w), true).unwrap();
    (store, id)
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let (mut store, id) = scalar_store(0.5);
    let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
    adam.step(&mut store, &[(id, &Tensor::scalar(1.0))]).unwrap();
    assert!((store.get(id).value.item() - 0.499).abs() < 1e-9);

    let (mut store, id) = scalar_store(0.5);
    let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
    adam.step(&mut store, &[(id, &Tensor::scalar(0.0))]).unwrap();
    assert_eq!(store.get(id).value.item(), 0.5);
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let (mut store, id) = scalar_store(2.0);
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(cfg, &store).unwrap();
    // scalar replay of the update rule
    let (mut w, mut m, mut v) = (2.0f64, 0.0, 0.0);
    for t in 1..=100 {
        let g = 2.0 * (store.get(id).value.item() - 3.0);
        adam.step(&mut store, &[(id, &Tensor::scalar(g))]).unwrap();
        let g = 2.0 * (w - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let (bc1, bc2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
        w -= 0.1 / bc1 * m / ((v / bc2).sqrt() + 1e-8);
        assert!((store.get(id).value.item() - w).abs() < 1e-9);
    }
    assert!((store.get(id).value.item() - 3.0).powi(2) < 1e-4);
}

#[test]
fn loss_on_a_fixed_batch_decreases_monotonically() {
    let cfg = SynthConfig::default();
    let data: Vec<ImagePair> = (0..4).map(|i| synth_pair(&cfg, i).unwrap()).collect();
    let batch: Vec<&ImagePair> = data.iter().collect();
    let mut tc = TrainConfig::default();
    tc.adam.lr = runs::SMOKE_LR;
    let losses = runs::overfit_losses(&ModelConfig::default(), &tc, &batch, 50).unwrap();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: RngSeed(13),
        ..TrainConfig::default()
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = small_data(10, 14);
    let (train, val) = data.split_at(8);
    let mut cfg = small_model();
    cfg.net.variant = Variant::CnnEnhance;

    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let run = RunDir::new(dir.path()).unwrap();
            let mut t = Trainer::new(&cfg, &tiny_train_config(2)).unwrap();
            t.fit(train, val, Some(&run)).unwrap();
            (dir, t)
        })
        .collect();
    assert_eq!(dir_bytes(runs[0].0.path()), dir_bytes(runs[1].0.path()));
    assert_eq!(runs[0].1.store, runs[1].1.store);
    let names: Vec<String> = dir_bytes(runs[0].0.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["best.idet", "best.idet.cfg", "checkpoint.idet", "checkpoint.idet.cfg", "train_log.csv", "val_metrics.csv"]
    );

    // one epoch, stop, resume for the second
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path()).unwrap();
    let mut t = Trainer::new(&cfg, &tiny_train_config(1)).unwrap();
    t.fit(train, val, Some(&run)).unwrap();
    let mut resumed = Trainer::resume(&run.checkpoint(), Some(2)).unwrap();
    assert_eq!(resumed.epoch, 1);
    let restored = resumed.best.as_ref().unwrap();
    assert_eq!((restored.epoch, restored.f1), (t.best.as_ref().unwrap().epoch, t.best.as_ref().unwrap().f1));
    assert_eq!(restored.store, t.best.as_ref().unwrap().store);
    resumed.fit(train, val, Some(&run)).unwrap();
    assert_eq!(resumed.store, runs[0].1.store);
    assert_eq!(resumed.adam.steps(), runs[0].1.adam.steps());
    assert_eq!(resumed.best.as_ref().unwrap().epoch, runs[0].1.best.as_ref().unwrap().epoch);
    for name in ["train_log.csv", "val_metrics.csv", "checkpoint.idet", "best.idet"] {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(runs[0].0.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn logs_have_headers_and_fixed_decimals() {
    let data = small_data(6, 15);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path()).unwrap();
    let mut t = Trainer::new(&small_model(), &tiny_train_config(1)).unwrap();
    t.fit(&data[..4], &data[4..], Some(&run)).unwrap();
    let steps = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = steps.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,epoch,loss,loss_M0,loss_M1,loss_M2,loss_M3,loss_M4,loss_M5,loss_M"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 10);
    assert!(row[2..].iter().all(|v| v.split('.').nth(1).map(str::len) == Some(6)));
    let epochs = fs::read_to_string(dir.path().join("val_metrics.csv")).unwrap();
    assert!(epochs.starts_with("epoch,mean_loss,P,R,F1,OA,IoU\n1,"));
}

#[test]
fn checkpoints_roundtrip_and_reject_corruption() {
    let (_, store) = Model::init::<f32>(&small_model(), RngSeed(16)).unwrap();
    let records = checkpoint::store_records(&store);
    let refs: Vec<(String, &Tensor<f32>)> = records.iter().map(|(n, t)| (n.clone(), t)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.idet");
    checkpoint::write(&path, &refs).unwrap();
    assert_eq!(checkpoint::read(&path).unwrap(), records);

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(checkpoint::read(&path), Err(Error::Parse { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    fs::write(&path, &extra).unwrap();
    assert!(matches!(checkpoint::read(&path), Err(Error::Parse { .. })));
    let mut magic = bytes;
    magic[0] = b'X';
    fs::write(&path, &magic).unwrap();
    assert!(matches!(checkpoint::read(&path), Err(Error::Parse { .. })));
}

#[test]
fn shape_mismatch_is_reported_on_the_first_batch() {
    let img = || Tensor::from_fn(&[3, 16, 16], |i| (i % 7) as f32 / 7.0);
    let data = vec![ImagePair::new("a", img(), img(), Mask::zeros(16, 16)).unwrap()];
    let mut t = Trainer::new(&small_model(), &tiny_train_config(1)).unwrap();
    let err = t.fit(&data, &[], None).unwrap_err();
    assert!(err.to_string().contains("16"), "{err}");
    assert_eq!(t.adam.steps(), 0);
}
