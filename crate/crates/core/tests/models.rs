//! Backbone, IDET and multi-scale network checks against shape arithmetic,
//! straight-line reimplementations and finite differences.

use idet_core::backbone::{feature_difference, DifferenceFusion, UNet, UNetConfig};
use idet_core::experiments::gradcheck::{idet_block_check, model_check, ModelProblem};
use idet_core::idet::{DiffGuidance, EfficientMsa, Idet, IdetConfig, TauDiffMlpInput};
use idet_core::{Model, ModelConfig, ParamBuilder, ParamStore, RngSeed, Session, Tensor, Variant};
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngSeed(seed).rng();
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Replaces every parameter (norm gains and shifts included) by random values
/// so that no identity-like initialization hides a wiring error.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = RngSeed(seed).rng();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

fn small_idet() -> IdetConfig {
    IdetConfig {
        channels: 8,
        heads: 2,
        ..IdetConfig::default()
    }
}

fn small_model(variant: Variant, depth: usize) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.net.variant = variant;
    c.net.unet.base_channels = 4;
    c.net.unet.depth = depth;
    c.net.idet = small_idet();
    c.net.sr_ratios = [1, 1, 2, 4, 8][5 - depth..].to_vec();
    c
}

// ---- straight-line oracle over rows of tokens -------------------------------

type Rows = Vec<Vec<f64>>;

struct Oracle<'a> {
    store: &'a ParamStore<f64>,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> Vec<f64> {
        let id = self.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.store.get(id).value.data().to_vec()
    }

    fn ln(&self, x: &Rows, prefix: &str) -> Rows {
        let (g, b) = (self.p(&format!("{prefix}.gain")), self.p(&format!("{prefix}.shift")));
        x.iter()
            .map(|r| {
                let c = r.len() as f64;
                let mean = r.iter().sum::<f64>() / c;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn linear(&self, x: &Rows, prefix: &str) -> Rows {
        let (w, b) = (self.p(&format!("{prefix}.weight")), self.p(&format!("{prefix}.bias")));
        let cout = b.len();
        x.iter()
            .map(|r| {
                (0..cout)
                    .map(|o| b[o] + r.iter().enumerate().map(|(i, v)| v * w[i * cout + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn mlp(&self, x: &Rows, prefix: &str) -> Rows {
        let h = self.linear(x, &format!("{prefix}.fc1"));
        let h: Rows = h
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
                    .collect()
            })
            .collect();
        self.linear(&h, &format!("{prefix}.fc2"))
    }

    fn msa(&self, x: &Rows, prefix: &str, (h, w): (usize, usize), heads: usize, sr: usize) -> Rows {
        let c = x[0].len();
        let mut kv = Vec::new();
        for py in 0..h / sr {
            for px in 0..w / sr {
                let mut acc = vec![0.0; c];
                for i in 0..sr {
                    for j in 0..sr {
                        let t = &x[(py * sr + i) * w + px * sr + j];
                        acc.iter_mut().zip(t).for_each(|(a, v)| *a += v / (sr * sr) as f64);
                    }
                }
                kv.push(acc);
            }
        }
        let q = self.linear(x, &format!("{prefix}.q"));
        let k = self.linear(&kv, &format!("{prefix}.k"));
        let v = self.linear(&kv, &format!("{prefix}.v"));
        let dh = c / heads;
        let mut out = vec![vec![0.0; c]; x.len()];
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            for (t, qt) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kt| qt[r.clone()].iter().zip(&kt[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, vt) in v.iter().enumerate() {
                    for ch in r.clone() {
                        out[t][ch] += e[j] / z * vt[ch];
                    }
                }
            }
        }
        self.linear(&out, &format!("{prefix}.proj"))
    }

    fn plain(&self, x: &Rows, prefix: &str, size: (usize, usize), heads: usize, sr: usize) -> Rows {
        let a = self.msa(&self.ln(x, &format!("{prefix}.norm1")), &format!("{prefix}.msa"), size, heads, sr);
        let z = add(&a, x);
        let b = self.mlp(&self.ln(&z, &format!("{prefix}.norm2")), &format!("{prefix}.mlp"));
        add(&b, &z)
    }

    fn guidance(&self, a: &Rows, b: &Rows) -> Rows {
        let d: Rows = a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()).collect()).collect();
        self.mlp(&self.ln(&d, "guidance.norm"), "guidance.mlp")
    }

    fn tau_diff(&self, d: &Rows, g: &Rows, size: (usize, usize), heads: usize, sr: usize, mode: TauDiffMlpInput) -> Rows {
        let z = add(&self.msa(&self.ln(g, "tau_diff.norm1"), "tau_diff.msa", size, heads, sr), d);
        let m = match mode {
            TauDiffMlpInput::Guidance => self.mlp(&self.ln(g, "tau_diff.norm2"), "tau_diff.mlp"),
            TauDiffMlpInput::Residual => self.mlp(&self.ln(&z, "tau_diff.norm2"), "tau_diff.mlp"),
        };
        add(&m, &z)
    }
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn rows_of(t: &Tensor<f64>) -> Rows {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- backbone ---------------------------------------------------------------

#[test]
fn pyramid_shapes_for_the_default_config() {
    let mut store = ParamStore::<f32>::new();
    let net = UNet::new(&mut ParamBuilder::new(&mut store, RngSeed(0)), &UNetConfig::default()).unwrap();
    let mut s = Session::new(&store, false);
    let x = s.graph.input(Tensor::zeros(&[1, 3, 64, 64]));
    let p = net.forward(&mut s, x).unwrap();
    let enc: Vec<Vec<usize>> = p.encoder.iter().map(|&v| s.graph.shape(v).to_vec()).collect();
    let dec: Vec<Vec<usize>> = p.decoder.iter().map(|&v| s.graph.shape(v).to_vec()).collect();
    assert_eq!(
        enc,
        vec![
            vec![1, 16, 32, 32],
            vec![1, 32, 16, 16],
            vec![1, 64, 8, 8],
            vec![1, 128, 4, 4],
            vec![1, 256, 2, 2]
        ]
    );
    assert_eq!(
        dec,
        vec![
            vec![1, 128, 4, 4],
            vec![1, 64, 8, 8],
            vec![1, 32, 16, 16],
            vec![1, 16, 32, 32],
            vec![1, 16, 64, 64]
        ]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_shapes_follow_the_schedule(hi in 0usize..4, wi in 0usize..4) {
        let sizes = [32, 48, 64, 96];
        let (h, w) = (sizes[hi], sizes[wi]);
        let cfg = UNetConfig { base_channels: 2, ..UNetConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&mut ParamBuilder::new(&mut store, RngSeed(1)), &cfg).unwrap();
        let mut s = Session::new(&store, false);
        let x = s.graph.input(Tensor::zeros(&[1, 3, h, w]));
        let p = net.forward(&mut s, x).unwrap();
        let halve = |n: usize, times: usize| (0..times).fold(n, |a, _| a.div_ceil(2));
        for l in 0..cfg.depth {
            prop_assert_eq!(s.graph.shape(p.encoder[l]), &[1, 2 << l, halve(h, l + 1), halve(w, l + 1)]);
            let lvl = cfg.depth - 1 - l;
            prop_assert_eq!(
                s.graph.shape(p.decoder[l]),
                &[1, cfg.decoder_channels(lvl), halve(h, lvl), halve(w, lvl)]
            );
        }
    }
}

#[test]
fn feature_difference_is_symmetric_and_nonnegative() {
    let mut store = ParamStore::<f64>::new();
    let cfg = UNetConfig {
        base_channels: 2,
        ..UNetConfig::default()
    };
    let net = UNet::new(&mut ParamBuilder::new(&mut store, RngSeed(2)), &cfg).unwrap();
    let mut s = Session::new(&store, false);
    let x = s.graph.input(rand_tensor(&[1, 3, 32, 32], 1));
    let y = s.graph.input(rand_tensor(&[1, 3, 32, 32], 2));
    let (fx, _) = net.encode(&mut s, x).unwrap();
    let (fy, _) = net.encode(&mut s, y).unwrap();
    let a = feature_difference(&mut s, &fx, &fy).unwrap();
    let b = feature_difference(&mut s, &fy, &fx).unwrap();
    for l in 0..a.len() {
        let (va, vb) = (s.graph.value(a[l]), s.graph.value(b[l]));
        assert_eq!(va, vb);
        let (ex, ey) = (s.graph.value(fx[l]).data(), s.graph.value(fy[l]).data());
        for (i, &d) in va.data().iter().enumerate() {
            assert_eq!(d, (ex[i] - ey[i]).abs());
        }
    }
}

#[test]
fn fusion_preactivation_is_linear_in_the_differences() {
    let cfg = UNetConfig::default();
    let mut store = ParamStore::<f64>::new();
    let fusion = DifferenceFusion::new(&mut ParamBuilder::new(&mut store, RngSeed(3)), &cfg, 32).unwrap();
    let bias = store.get(store.id("fuse.bias").unwrap()).value.data().to_vec();
    let shapes: Vec<[usize; 4]> = (0..5).map(|l| [1, cfg.encoder_channels(l), 32 >> l, 32 >> l]).collect();
    let mut s = Session::new(&store, false);
    let diffs: Vec<_> = shapes.iter().enumerate().map(|(i, sh)| s.graph.input(rand_tensor(sh, 10 + i as u64).map(f64::abs))).collect();
    let doubled: Vec<_> = diffs.iter().map(|&d| s.graph.scale(d, 2.0)).collect();
    let z1 = fusion.preactivation(&mut s, &diffs, (64, 64)).unwrap();
    let z2 = fusion.preactivation(&mut s, &doubled, (64, 64)).unwrap();
    assert_eq!(s.graph.shape(z1), &[1, 32, 16, 16]);
    let (a, b) = (s.graph.value(z1).data(), s.graph.value(z2).data());
    for (i, (&v1, &v2)) in a.iter().zip(b).enumerate() {
        let c = bias[i / 256];
        assert!(((v2 - c) - 2.0 * (v1 - c)).abs() < 1e-9);
    }
}

#[test]
fn identical_images_give_a_constant_fused_difference() {
    let cfg = small_model(Variant::Full, 5);
    let (model, store) = Model::init::<f64>(&cfg, RngSeed(4)).unwrap();
    let bias = store.get(store.id("fuse.bias").unwrap()).value.data().to_vec();
    let mut s = Session::new(&store, false);
    let x = s.graph.input(rand_tensor(&[1, 3, 32, 32], 5));
    let enc = model.encode(&mut s, x, x).unwrap();
    let d = s.graph.value(enc.d);
    assert_eq!(d.shape(), &[1, 8, 8, 8]);
    for (i, &v) in d.data().iter().enumerate() {
        assert_eq!(v, bias[i / 64].max(0.0));
    }
}

// ---- IDET ---------------------------------------------------------------------

#[test]
fn msa_matches_the_quadratic_attention_oracle() {
    for (sr, heads, (h, w)) in [(1, 1, (2, 2)), (1, 2, (4, 4)), (2, 2, (4, 6))] {
        let mut store = ParamStore::<f64>::new();
        let c = 4;
        let msa = EfficientMsa::new(&mut ParamBuilder::new(&mut store, RngSeed(6)), "msa", c, heads, sr).unwrap();
        let x = rand_tensor(&[1, h * w, c], 7);
        let mut s = Session::new(&store, false);
        let xv = s.graph.input(x.clone());
        let y = msa.forward(&mut s, xv, (h, w)).unwrap();
        let oracle = Oracle { store: &store }.msa(&rows_of(&x), "msa", (h, w), heads, sr);
        assert!(max_diff(&rows_of(s.graph.value(y)), &oracle) < 1e-6, "sr {sr} heads {heads}");
    }
}

#[test]
fn msa_on_identical_tokens_gives_identical_rows() {
    let mut store = ParamStore::<f64>::new();
    let msa = EfficientMsa::new(&mut ParamBuilder::new(&mut store, RngSeed(8)), "msa", 8, 2, 2).unwrap();
    let row = rand_tensor(&[8], 9);
    let x = Tensor::from_fn(&[1, 16, 8], |i| row.data()[i % 8]);
    let mut s = Session::new(&store, false);
    let xv = s.graph.input(x);
    let y = msa.forward(&mut s, xv, (4, 4)).unwrap();
    let rows = rows_of(s.graph.value(y));
    for r in &rows[1..] {
        assert!(r.iter().zip(&rows[0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn msa_rejects_incompatible_reduction() {
    let mut store = ParamStore::<f64>::new();
    let msa = EfficientMsa::new(&mut ParamBuilder::new(&mut store, RngSeed(8)), "msa", 8, 2, 4).unwrap();
    let mut s = Session::new(&store, false);
    let xv = s.graph.input(Tensor::zeros(&[1, 36, 8]));
    assert!(matches!(msa.forward(&mut s, xv, (6, 6)), Err(idet_core::Error::Config(_))));
}

fn idet_setup(cfg: &IdetConfig, seed: u64) -> (Idet, ParamStore<f64>, [Tensor<f64>; 3]) {
    let mut store = ParamStore::<f64>::new();
    let idet = Idet::new(&mut ParamBuilder::new(&mut store, RngSeed(seed)), cfg, 2).unwrap();
    randomize(&mut store, seed + 1);
    let inputs = [0, 1, 2].map(|i| rand_tensor(&[1, 64, cfg.channels], seed * 10 + i));
    (idet, store, inputs)
}

fn run_refine(idet: &Idet, store: &ParamStore<f64>, inputs: &[Tensor<f64>; 3]) -> Tensor<f64> {
    let mut s = Session::new(store, false);
    let [a, b, d] = inputs.clone().map(|t| s.graph.input(t));
    let out = idet.refine(&mut s, a, b, d, (8, 8)).unwrap();
    s.graph.value(out).clone()
}

#[test]
fn refine_matches_the_straight_line_oracle() {
    for mode in [TauDiffMlpInput::Guidance, TauDiffMlpInput::Residual] {
        let cfg = IdetConfig {
            tau_diff_mlp_input: mode,
            ..small_idet()
        };
        let (idet, store, inputs) = idet_setup(&cfg, 11);
        let got = rows_of(&run_refine(&idet, &store, &inputs));
        let o = Oracle { store: &store };
        let [rx, ry, d] = inputs.each_ref().map(rows_of);
        let g = o.guidance(&o.plain(&rx, "tau_ref", (8, 8), 2, 2), &o.plain(&ry, "tau_que", (8, 8), 2, 2));
        let mut cur = d;
        for _ in 0..cfg.iterations {
            cur = o.tau_diff(&cur, &g, (8, 8), 2, 2, mode);
        }
        assert!(max_diff(&got, &cur) < 1e-6, "{mode:?}");
    }
}

#[test]
fn zero_iterations_return_d_unchanged() {
    let cfg = IdetConfig {
        iterations: 0,
        ..small_idet()
    };
    let (idet, store, inputs) = idet_setup(&cfg, 12);
    assert_eq!(run_refine(&idet, &store, &inputs), inputs[2]);
}

#[test]
fn iterations_give_distinct_outputs_and_add_the_guidance_term() {
    let outs: Vec<Tensor<f64>> = (0..3)
        .map(|t| {
            let cfg = IdetConfig {
                iterations: t,
                ..small_idet()
            };
            let (idet, store, inputs) = idet_setup(&cfg, 13);
            run_refine(&idet, &store, &inputs)
        })
        .collect();
    assert!(outs[0] != outs[1] && outs[1] != outs[2] && outs[0] != outs[2]);
    // As printed, both branches read only the guidance, so each iteration adds
    // the same term: out_T - D = T * (out_1 - D).
    let d = outs[0].data();
    for i in 0..d.len() {
        let step = outs[1].data()[i] - d[i];
        assert!((outs[2].data()[i] - d[i] - 2.0 * step).abs() < 1e-9);
    }
}

#[test]
fn zeroed_output_projections_make_the_block_an_identity() {
    let (idet, mut store, inputs) = idet_setup(&small_idet(), 14);
    for name in ["tau_diff.msa.proj.weight", "tau_diff.msa.proj.bias", "tau_diff.mlp.fc2.weight", "tau_diff.mlp.fc2.bias"] {
        let id = store.id(name).unwrap();
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    assert_eq!(run_refine(&idet, &store, &inputs), inputs[2]);
}

#[test]
fn guidance_is_symmetric_and_constant_for_equal_inputs() {
    let cfg = small_idet();
    let mut store = ParamStore::<f64>::new();
    let g = DiffGuidance::new(&mut ParamBuilder::new(&mut store, RngSeed(15)), &cfg).unwrap();
    randomize(&mut store, 16);
    let mut s = Session::new(&store, false);
    let a = s.graph.input(rand_tensor(&[1, 10, 8], 17));
    let b = s.graph.input(rand_tensor(&[1, 10, 8], 18));
    let ab = g.forward(&mut s, a, b).unwrap();
    let ba = g.forward(&mut s, b, a).unwrap();
    assert_eq!(s.graph.value(ab), s.graph.value(ba));
    let o = Oracle { store: &store };
    let want = o.guidance(&rows_of(s.graph.value(a)), &rows_of(s.graph.value(b)));
    assert!(max_diff(&rows_of(s.graph.value(ab)), &want) < 1e-6);
    let aa = g.forward(&mut s, a, a).unwrap();
    let bb = g.forward(&mut s, b, b).unwrap();
    assert_eq!(s.graph.value(aa), s.graph.value(bb));
    let rows = rows_of(s.graph.value(aa));
    assert!(rows.iter().all(|r| r == &rows[0]));
}

#[test]
fn idet_block_gradients_match_finite_differences() {
    let r = idet_block_check(RngSeed(19)).unwrap();
    assert!(r.passed(), "{}", r.line());
}

// ---- multi-scale network ----------------------------------------------------------

#[test]
fn final_fusion_sees_twelve_channels() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.net.final_fusion_channels(), 12);
    let (_, store) = Model::init::<f32>(&cfg, RngSeed(0)).unwrap();
    let w = &store.get(store.id("final.weight").unwrap()).value;
    assert_eq!(w.shape(), &[2, 12, 3, 3]);
    let mut single = cfg.clone();
    single.net.variant = Variant::SingleScale;
    let (_, store) = Model::init::<f32>(&single, RngSeed(0)).unwrap();
    assert_eq!(store.get(store.id("final.weight").unwrap()).value.shape(), &[2, 4, 3, 3]);
}

fn logits_of(cfg: &ModelConfig, seed: u64, x: &Tensor<f32>, y: &Tensor<f32>) -> Tensor<f32> {
    let (model, store) = Model::init::<f32>(cfg, RngSeed(seed)).unwrap();
    let mut s = Session::new(&store, false);
    let (xv, yv) = (s.graph.input(x.clone()), s.graph.input(y.clone()));
    let maps = model.forward(&mut s, xv, yv).unwrap();
    s.graph.value(maps.logits).clone()
}

#[test]
fn zero_iterations_equal_the_no_enhance_variant() {
    let x = rand_tensor(&[2, 3, 32, 32], 20).cast::<f32>();
    let y = rand_tensor(&[2, 3, 32, 32], 21).cast::<f32>();
    let mut t0 = ModelConfig::default();
    t0.net.idet.iterations = 0;
    let mut none = ModelConfig::default();
    none.net.variant = Variant::NoEnhance;
    assert_eq!(logits_of(&t0, 22, &x, &y), logits_of(&none, 22, &x, &y));
    let mut t2 = ModelConfig::default();
    t2.net.idet.iterations = 2;
    assert_ne!(logits_of(&t2, 22, &x, &y), logits_of(&none, 22, &x, &y));
}

#[test]
fn no_enhance_logits_do_not_depend_on_the_image_when_x_equals_y() {
    let cfg = small_model(Variant::NoEnhance, 5);
    let a = rand_tensor(&[1, 3, 32, 32], 23).cast::<f32>();
    let b = rand_tensor(&[1, 3, 32, 32], 24).cast::<f32>();
    assert_eq!(logits_of(&cfg, 25, &a, &a), logits_of(&cfg, 25, &b, &b));
}

#[test]
fn every_variant_produces_finite_maps_of_the_right_shape() {
    let x = rand_tensor(&[2, 3, 32, 32], 26).cast::<f32>();
    let y = rand_tensor(&[2, 3, 32, 32], 27).cast::<f32>();
    for v in Variant::ALL {
        let cfg = small_model(v, 5);
        let (model, store) = Model::init::<f32>(&cfg, RngSeed(28)).unwrap();
        let mut s = Session::new(&store, true);
        let (xv, yv) = (s.graph.input(x.clone()), s.graph.input(y.clone()));
        let maps = model.forward(&mut s, xv, yv).unwrap();
        assert_eq!(s.graph.shape(maps.logits), &[2, 2, 32, 32], "{v:?}");
        assert_eq!(s.graph.shape(maps.aux[0]), &[2, 2, 8, 8], "{v:?}");
        let expected_aux = if v == Variant::SingleScale { 2 } else { 6 };
        assert_eq!(maps.aux.len(), expected_aux, "{v:?}");
        for &m in maps.aux.iter().chain([&maps.logits]) {
            assert_eq!(s.graph.shape(m)[1], 2);
            assert!(s.graph.value(m).all_finite(), "{v:?}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let x = rand_tensor(&[1, 3, 32, 32], 29).cast::<f32>();
    let y = rand_tensor(&[1, 3, 32, 32], 30).cast::<f32>();
    let cfg = small_model(Variant::Full, 5);
    assert_eq!(logits_of(&cfg, 31, &x, &y), logits_of(&cfg, 31, &x, &y));
}

#[test]
fn every_variant_passes_a_gradient_check() {
    for v in Variant::ALL {
        let r = model_check(&small_model(v, 3), 2, 16, 16, 1, RngSeed(32)).unwrap();
        assert!(r.passed(), "{v:?}: {}", r.line());
    }
}

#[test]
fn every_trainable_parameter_receives_a_gradient() {
    let p = ModelProblem::new(&small_model(Variant::Full, 5), 2, 32, 32, RngSeed(33)).unwrap();
    let grads = p.analytic().unwrap();
    for (id, param) in p.store.iter().filter(|(_, p)| p.trainable) {
        let g = grads[id.index()].as_ref().unwrap_or_else(|| panic!("{} has no gradient", param.name));
        assert!(g.data().iter().any(|&v| v != 0.0), "{} has an all-zero gradient", param.name);
    }
}
