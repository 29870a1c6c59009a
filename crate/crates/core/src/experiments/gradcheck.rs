//! Finite-difference verification of every differentiable op, the IDET block
//! and the whole network.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{grad_check, rel_err, ElementwiseKind, NormStats, PoolKind};
use crate::error::Result;
use crate::idet::{IdetConfig, Idet, PlainTransformer};
use crate::metrics::Mask;
use crate::model::{Arch, Model, ModelConfig};
use crate::nn::Session;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::rng::RngSeed;
use crate::tensor::Tensor;
use crate::training::{total_loss, LossMode};
use crate::{Graph, Var};

pub const STEP: f64 = 1e-4;

/// Fallback steps for entries whose difference quotient at [`STEP`] is
/// spoiled by a ReLU/max-pool kink (smaller steps help) or by round-off on a
/// tiny gradient (a larger step helps).
const FALLBACK_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-3, 1e-7];
const ONE_SIDED_STEP: f64 = 1e-6;

/// One line of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub threshold: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter or input holding the worst entry, when known.
    pub worst: Option<String>,
    /// Entries whose central difference at [`STEP`] is unreliable (kink
    /// crossing, exact kink or round-off); each was verified at another step
    /// or against a one-sided difference instead.
    pub nonsmooth: usize,
    /// An entry that no step could confirm.
    pub unverified: Option<String>,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold && self.unverified.is_none()
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<22} rel-err {:.3e} < {:.0e} ({} entries{}, {:.1}s){}{}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.threshold,
            self.checked,
            if self.nonsmooth > 0 {
                format!(", {} unstable at step {STEP:e} and verified otherwise", self.nonsmooth)
            } else {
                String::new()
            },
            self.seconds,
            self.worst.as_ref().map_or(String::new(), |w| format!(" worst {w}")),
            self.unverified.as_ref().map_or(String::new(), |w| format!(" unverified {w}"))
        )
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = RngSeed(seed).rng();
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random values with magnitude in [0.1, 1] and random sign, away from kinks.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngSeed(seed).rng();
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values so that max-pool windows never tie.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = RngSeed(seed).rng();
    let perm = sample(&mut rng, n, n).into_vec();
    Tensor::from_fn(shape, |i| perm[i] as f64 / n as f64 - 0.5)
}

/// Sum of `v` weighted by a fixed random tensor, so that no gradient is
/// trivially constant.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = uniform(g.shape(v), seed ^ 0x5eed, -1.0, 1.0);
    let r = g.input(r);
    let p = g.mul(v, r)?;
    Ok(g.sum(p))
}

fn op_check<F>(name: &str, threshold: f64, inputs: &[Tensor<f64>], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let t0 = Instant::now();
    let err = grad_check(f, inputs, STEP)?;
    Ok(CheckResult {
        name: name.into(),
        threshold,
        max_rel_err: err,
        checked: inputs.iter().map(Tensor::numel).sum(),
        worst: None,
        nonsmooth: 0,
        unverified: None,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Every differentiable op at its own threshold.
pub fn op_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.push(op_check(
        "conv2d",
        1e-5,
        &[uniform(&[1, 2, 5, 5], 1, -1.0, 1.0), uniform(&[3, 2, 3, 3], 2, -1.0, 1.0), uniform(&[3], 3, -1.0, 1.0)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(g, y, 1)
        },
    )?);
    out.push(op_check(
        "conv2d_stride2",
        1e-5,
        &[uniform(&[2, 2, 7, 7], 4, -1.0, 1.0), uniform(&[2, 2, 3, 3], 5, -1.0, 1.0)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            weighted_sum(g, y, 2)
        },
    )?);
    let kinds = [
        ("add", ElementwiseKind::Add, 1e-6),
        ("sub", ElementwiseKind::Sub, 1e-6),
        ("mul", ElementwiseKind::Mul, 1e-6),
        ("abs", ElementwiseKind::Abs, 1e-6),
        ("relu", ElementwiseKind::Relu, 1e-6),
        ("gelu", ElementwiseKind::Gelu, 1e-6),
        ("sigmoid", ElementwiseKind::Sigmoid, 1e-6),
    ];
    for (i, (name, kind, thr)) in kinds.into_iter().enumerate() {
        let binary = matches!(kind, ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul);
        let mut inputs = vec![off_zero(&[2, 3, 4], 10 + i as u64)];
        if binary {
            inputs.push(off_zero(&[2, 3, 4], 20 + i as u64));
        }
        out.push(op_check(name, thr, &inputs, move |g, v| {
            let y = g.elementwise(kind, v[0], v.get(1).copied())?;
            weighted_sum(g, y, 3 + i as u64)
        })?);
    }
    out.push(op_check(
        "concat_channels",
        1e-6,
        &[uniform(&[1, 2, 3, 3], 30, -1.0, 1.0), uniform(&[1, 3, 3, 3], 31, -1.0, 1.0)],
        |g, v| {
            let y = g.concat_channels(v)?;
            weighted_sum(g, y, 4)
        },
    )?);
    out.push(op_check("upsample_bilinear", 1e-6, &[uniform(&[1, 2, 4, 4], 32, -1.0, 1.0)], |g, v| {
        let up = g.upsample_bilinear(v[0], 8, 7)?;
        let down = g.upsample_bilinear(v[0], 3, 2)?;
        let (a, b) = (weighted_sum(g, up, 5)?, weighted_sum(g, down, 6)?);
        g.add(a, b)
    })?);
    out.push(op_check(
        "layer_norm",
        1e-5,
        &[uniform(&[5, 6], 33, -2.0, 2.0), uniform(&[6], 34, 0.5, 1.5), uniform(&[6], 35, -1.0, 1.0)],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 7)
        },
    )?);
    out.push(op_check(
        "linear",
        1e-5,
        &[uniform(&[2, 7, 4], 36, -1.0, 1.0), uniform(&[4, 9], 37, -1.0, 1.0), uniform(&[9], 38, -1.0, 1.0)],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 8)
        },
    )?);
    out.push(op_check("softmax_lastdim", 1e-5, &[uniform(&[3, 4, 5], 39, -3.0, 3.0)], |g, v| {
        let y = g.softmax_lastdim(v[0])?;
        weighted_sum(g, y, 9)
    })?);
    out.push(op_check(
        "bmm",
        1e-6,
        &[uniform(&[2, 3, 4], 40, -1.0, 1.0), uniform(&[2, 5, 4], 41, -1.0, 1.0)],
        |g, v| {
            let y = g.bmm(v[0], v[1], false, true)?;
            weighted_sum(g, y, 10)
        },
    )?);
    out.push(op_check("reshape_permute", 1e-6, &[uniform(&[2, 3, 4], 42, -1.0, 1.0)], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[4, 6])?;
        weighted_sum(g, r, 11)
    })?);
    out.push(op_check("avg_pool", 1e-6, &[uniform(&[1, 2, 6, 6], 43, -1.0, 1.0)], |g, v| {
        let y = g.pool2d(PoolKind::Avg, v[0], 2, 2)?;
        weighted_sum(g, y, 12)
    })?);
    out.push(op_check("max_pool", 1e-6, &[distinct(&[1, 2, 6, 6], 44)], |g, v| {
        let y = g.pool2d(PoolKind::Max, v[0], 2, 2)?;
        weighted_sum(g, y, 13)
    })?);
    out.push(op_check("max_pool_ceil", 1e-6, &[distinct(&[1, 2, 5, 3], 45)], |g, v| {
        let y = g.max_pool2d_ceil(v[0], 2)?;
        weighted_sum(g, y, 14)
    })?);
    out.push(op_check(
        "batch_norm",
        1e-5,
        &[uniform(&[2, 3, 3, 3], 46, -1.0, 1.0), uniform(&[3], 47, 0.5, 1.5), uniform(&[3], 48, -1.0, 1.0)],
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?;
            weighted_sum(g, y, 15)
        },
    )?);
    let targets: Vec<u8> = (0..2 * 4 * 4).map(|i| ((i * 7) % 3 == 0) as u8).collect();
    for (name, gamma) in [("cross_entropy", 0.0), ("focal_loss", 2.0)] {
        let t = targets.clone();
        out.push(op_check(name, 1e-5, &[uniform(&[2, 2, 4, 4], 49, -2.0, 2.0)], move |g, v| {
            g.pixel_loss(v[0], &t, gamma)
        })?);
    }
    out.push(op_check("mean", 1e-10, &[uniform(&[3, 5], 50, -1.0, 1.0)], |g, v| Ok(g.mean(v[0])))?);
    Ok(out)
}

fn token_inputs(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..3).map(|i| uniform(&[n, h * w, c], seed + i, -1.0, 1.0)).collect()
}

/// Plain transformer composite, gradients w.r.t. its input tokens.
pub fn tau_plain_check(seed: RngSeed) -> Result<CheckResult> {
    let cfg = IdetConfig {
        channels: 8,
        heads: 2,
        ..IdetConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let block = PlainTransformer::new(&mut ParamBuilder::new(&mut store, seed), "tau", &cfg, 2)?;
    let x = uniform(&[1, 16, 8], seed.0, -1.0, 1.0);
    op_check("tau_plain", 1e-3, &[x], |g, v| {
        let mut s = Session::new(&store, true);
        std::mem::swap(g, &mut s.graph);
        let y = block.forward(&mut s, v[0], (4, 4));
        std::mem::swap(g, &mut s.graph);
        weighted_sum(g, y?, 16)
    })
}

/// Full IDET block on an 8x8 grid: gradients w.r.t. R_ref, R_que and D.
pub fn idet_block_check(seed: RngSeed) -> Result<CheckResult> {
    let cfg = IdetConfig {
        channels: 8,
        heads: 2,
        ..IdetConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let idet = Idet::new(&mut ParamBuilder::new(&mut store, seed), &cfg, 2)?;
    let inputs = token_inputs(1, 8, 8, 8, seed.0);
    op_check("idet_block", 1e-3, &inputs, |g, v| {
        let mut s = Session::new(&store, true);
        std::mem::swap(g, &mut s.graph);
        let y = idet.refine(&mut s, v[0], v[1], v[2], (8, 8));
        std::mem::swap(g, &mut s.graph);
        weighted_sum(g, y?, 17)
    })
}

/// Random binary targets with a few rectangular blobs.
pub fn blob_masks(n: usize, h: usize, w: usize, seed: RngSeed) -> Vec<Mask> {
    let mut rng = seed.rng();
    (0..n)
        .map(|_| {
            let rects: Vec<(usize, usize, usize, usize)> = (0..3)
                .map(|_| {
                    let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                    (y0, x0, y0 + rng.random_range(2..=h / 3), x0 + rng.random_range(2..=w / 3))
                })
                .collect();
            Mask::from_fn(h, w, |y, x| rects.iter().any(|&(a, b, c, d)| y >= a && y < c && x >= b && x < d))
        })
        .collect()
}

/// A fixed loss landscape over the parameters of a freshly initialized
/// model: random images, blob targets and the summed multi-map loss.
pub struct ModelProblem {
    pub model: Model,
    pub store: ParamStore<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
    gt: Vec<Mask>,
    mode: LossMode,
}

impl ModelProblem {
    pub fn new(cfg: &ModelConfig, n: usize, h: usize, w: usize, seed: RngSeed) -> Result<Self> {
        let (model, store) = Model::init::<f64>(cfg, seed.labeled("init"))?;
        let c = cfg.net.unet.in_channels;
        Ok(Self {
            model,
            store,
            x: uniform(&[n, c, h, w], seed.labeled("x").0, 0.0, 1.0),
            y: uniform(&[n, c, h, w], seed.labeled("y").0, 0.0, 1.0),
            gt: blob_masks(n, h, w, seed.labeled("gt")),
            mode: match cfg.arch {
                Arch::Basic => LossMode::SingleCe,
                Arch::MsIdet => LossMode::MultiCe,
            },
        })
    }

    /// Records the loss on `g`, which must be empty.
    pub fn loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Result<Var> {
        let mut s = Session::new(store, true);
        std::mem::swap(g, &mut s.graph);
        let res = (|| {
            let (xv, yv) = (s.graph.input(self.x.clone()), s.graph.input(self.y.clone()));
            let maps = self.model.forward(&mut s, xv, yv)?;
            Ok(total_loss(&mut s.graph, &maps, &self.gt, self.mode, 2.0)?.total)
        })();
        std::mem::swap(g, &mut s.graph);
        res
    }

    pub fn value(&self, store: &ParamStore<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.loss(&mut g, store)?;
        Ok(g.value(v).item())
    }

    /// Analytic gradient of every parameter, `None` where unused.
    pub fn analytic(&self) -> Result<Vec<Option<Tensor<f64>>>> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, &self.store)?;
        let grads = g.backward(loss)?;
        let mut out: Vec<Option<Tensor<f64>>> = vec![None; self.store.len()];
        for (id, t) in grads.param_grads() {
            match &mut out[id.index()] {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                slot => *slot = Some(t.clone()),
            }
        }
        Ok(out)
    }

    /// One-sided differences `(forward, backward)` for one parameter entry.
    pub fn one_sided(&self, id: ParamId, entry: usize, step: f64) -> Result<(f64, f64)> {
        let mut work = self.store.clone();
        let f0 = self.value(&work)?;
        let orig = work.get(id).value.data()[entry];
        work.get_mut(id).value.data_mut()[entry] = orig + step;
        let up = self.value(&work)?;
        work.get_mut(id).value.data_mut()[entry] = orig - step;
        let down = self.value(&work)?;
        Ok(((up - f0) / step, (f0 - down) / step))
    }

    /// Central difference for one parameter entry.
    pub fn numeric(&self, id: ParamId, entry: usize, step: f64) -> Result<f64> {
        let mut work = self.store.clone();
        let orig = work.get(id).value.data()[entry];
        work.get_mut(id).value.data_mut()[entry] = orig + step;
        let up = self.value(&work)?;
        work.get_mut(id).value.data_mut()[entry] = orig - step;
        let down = self.value(&work)?;
        Ok((up - down) / (2.0 * step))
    }
}

/// Checks parameter gradients of the summed multi-map loss on an
/// `n x 3 x h x w` pair. For each trainable tensor the entry with the largest
/// gradient is checked, plus `extra` entries drawn at random.
pub fn model_check(cfg: &ModelConfig, n: usize, h: usize, w: usize, extra: usize, seed: RngSeed) -> Result<CheckResult> {
    let t0 = Instant::now();
    let problem = ModelProblem::new(cfg, n, h, w, seed)?;
    let analytic = problem.analytic()?;
    let store = &problem.store;
    let mut rng = seed.labeled("entries").rng();
    let mut entries: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let Some(a) = &analytic[id.index()] else { continue };
        let best = (0..a.numel())
            .max_by(|&i, &j| a.data()[i].abs().total_cmp(&a.data()[j].abs()))
            .expect("non-empty parameter");
        entries.push((id, best));
        let k = extra.min(p.value.numel().saturating_sub(1));
        for e in sample(&mut rng, p.value.numel(), k + 1).into_iter().filter(|&e| e != best).take(k) {
            entries.push((id, e));
        }
    }
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut nonsmooth = 0;
    let mut unverified = None;
    for &(id, e) in &entries {
        let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[e]);
        let n = problem.numeric(id, e, STEP)?;
        let err = rel_err(a, n);
        if err < 1e-3 {
            if err >= max_rel_err {
                max_rel_err = err;
                worst = Some((id, e));
            }
            continue;
        }
        // A correct gradient disagrees with a kinked or noise-dominated
        // difference quotient but agrees at a step that avoids both. At an
        // exact kink (a max-pool tie, a ReLU input of exactly zero) it equals
        // one of the one-sided derivatives.
        nonsmooth += 1;
        let mut confirmed = false;
        for step in FALLBACK_STEPS {
            if rel_err(a, problem.numeric(id, e, step)?) < 1e-3 {
                confirmed = true;
                break;
            }
        }
        if !confirmed {
            let (fwd, bwd) = problem.one_sided(id, e, ONE_SIDED_STEP)?;
            confirmed = rel_err(a, fwd) < 1e-3 || rel_err(a, bwd) < 1e-3;
        }
        if !confirmed {
            max_rel_err = max_rel_err.max(err);
            unverified = Some(format!("{}[{e}] analytic {a:.4e} numeric {n:.4e}", store.get(id).name));
        }
    }
    Ok(CheckResult {
        name: format!("model_{}", cfg.label()),
        threshold: 1e-3,
        max_rel_err,
        checked: entries.len(),
        worst: worst.map(|(id, e)| format!("{}[{e}]", store.get(id).name)),
        nonsmooth,
        unverified,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Op suite, composite blocks and the default full network on a 2x32x32 pair.
pub fn full_suite(seed: RngSeed) -> Result<Vec<CheckResult>> {
    let mut out = op_suite()?;
    out.push(tau_plain_check(seed)?);
    out.push(idet_block_check(seed)?);
    out.push(model_check(&ModelConfig::default(), 2, 32, 32, 1, seed)?);
    Ok(out)
}
