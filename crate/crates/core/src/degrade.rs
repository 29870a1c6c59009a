//! Noise injection into the fused difference D and the severity sweep.

use std::fmt::Write as _;

use log::warn;
use rand_distr::{Distribution, Normal};

use crate::data::{batch_images, ImagePair};
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion, metrics_from_confusion, Mask};
use crate::model::{Arch, Model};
use crate::msidet::{Encoded, Variant};
use crate::nn::Session;
use crate::params::ParamStore;
use crate::rng::RngSeed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enhancement {
    None,
    Idet,
}

impl Enhancement {
    pub fn as_str(self) -> &'static str {
        match self {
            Enhancement::None => "none",
            Enhancement::Idet => "idet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Enhancement::None),
            "idet" => Ok(Enhancement::Idet),
            other => Err(Error::Config(format!("unknown enhancement {other:?} (none|idet)"))),
        }
    }

    /// The enhancement a model applies after the D tap.
    pub fn of_model(model: &Model) -> Self {
        match model {
            Model::Basic(_) => Enhancement::None,
            Model::MsIdet(m) if m.config.variant == Variant::NoEnhance => Enhancement::None,
            Model::MsIdet(_) => Enhancement::Idet,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeConfig {
    pub alphas: Vec<f64>,
    pub seed: RngSeed,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            alphas: default_alphas(),
            seed: RngSeed(0),
        }
    }
}

/// 5, 10, ..., 100
pub fn default_alphas() -> Vec<f64> {
    (1..=20).map(|i| 5.0 * i as f64).collect()
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config("empty alpha grid".into()));
        }
        if self.alphas.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("alphas must be finite and >= 0".into()));
        }
        if self.alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("alphas must be strictly increasing".into()));
        }
        Ok(())
    }
}

fn grid_mask(d: &Tensor<f32>, gt: &Mask) -> Result<(usize, usize, Mask)> {
    let (n, c, h, w) = d.dims4("region_means")?;
    if n != 1 {
        return Err(Error::dim("region_means", format!("expected one image, got batch {n}")));
    }
    Ok((c, h * w, gt.resize_nearest(h, w)))
}

/// Means of D over changed and unchanged pixels (all channels), with the
/// mask resized to D's grid.
pub fn region_means(d: &Tensor<f32>, gt: &Mask) -> Result<(f64, f64)> {
    let (c, hw, m) = grid_mask(d, gt)?;
    let (mut s_in, mut s_out, mut n_in, mut n_out) = (0.0, 0.0, 0usize, 0usize);
    for ch in 0..c {
        for (i, &v) in d.data()[ch * hw..(ch + 1) * hw].iter().enumerate() {
            if m.data()[i] == 1 {
                s_in += v as f64;
                n_in += 1;
            } else {
                s_out += v as f64;
                n_out += 1;
            }
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::Degenerate(format!(
            "mask has {} changed and {} unchanged pixels on the {hw}-pixel grid",
            n_in / c.max(1),
            n_out / c.max(1)
        )));
    }
    Ok((s_in / n_in as f64, s_out / n_out as f64))
}

/// Adds N(0, sigma^2) noise with sigma = alpha * |d_inside - d_outside| to
/// every channel of D at unchanged pixels. Changed pixels are left untouched.
pub fn inject_noise(d: &Tensor<f32>, gt: &Mask, alpha: f64, seed: RngSeed) -> Result<Tensor<f32>> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let (d_in, d_out) = region_means(d, gt)?;
    let sigma = alpha * (d_in - d_out).abs();
    inject_noise_sigma(d, gt, sigma, seed)
}

/// [`inject_noise`] with an explicit standard deviation.
pub fn inject_noise_sigma(d: &Tensor<f32>, gt: &Mask, sigma: f64, seed: RngSeed) -> Result<Tensor<f32>> {
    let (c, hw, m) = grid_mask(d, gt)?;
    let mut out = d.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise std {sigma}: {e}")))?;
    let mut rng = seed.rng();
    let data = out.data_mut();
    for ch in 0..c {
        for i in 0..hw {
            if m.data()[i] == 0 {
                data[ch * hw + i] += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(out)
}

/// Values at the D tap for one image pair, detached from any graph.
#[derive(Debug, Clone)]
pub struct TapValues {
    pub d: Tensor<f32>,
    pub decoder_x: Vec<Tensor<f32>>,
    pub decoder_y: Vec<Tensor<f32>>,
    pub size: (usize, usize),
}

pub fn encode_pair(model: &Model, store: &ParamStore<f32>, pair: &ImagePair) -> Result<TapValues> {
    let (xb, yb) = batch_images(&[pair])?;
    let mut s = Session::new(store, false);
    let (x, y) = (s.graph.input(xb), s.graph.input(yb));
    let enc = model.encode(&mut s, x, y)?;
    let take = |vs: &[crate::autodiff::Var]| vs.iter().map(|&v| s.graph.value(v).clone()).collect();
    Ok(TapValues {
        d: s.graph.value(enc.d).clone(),
        decoder_x: take(&enc.decoder_x),
        decoder_y: take(&enc.decoder_y),
        size: enc.size,
    })
}

/// Resumes the forward pass from the tap with `d` in place of the clean D.
pub fn decode_from_tap(model: &Model, store: &ParamStore<f32>, tap: &TapValues, d: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut s = Session::new(store, false);
    let enc = Encoded {
        d: s.graph.input(d.clone()),
        decoder_x: tap.decoder_x.iter().map(|t| s.graph.input(t.clone())).collect(),
        decoder_y: tap.decoder_y.iter().map(|t| s.graph.input(t.clone())).collect(),
        size: tap.size,
    };
    let maps = model.decode(&mut s, &enc)?;
    Ok(s.graph.value(maps.logits).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub alpha: f64,
    pub mean_f1: f64,
    pub per_image_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub enhancement: Enhancement,
    pub records: Vec<SweepRecord>,
}

impl SweepCurve {
    pub const CSV_HEADER: &'static str = "alpha,enhancement,mean_f1,n_images";

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{:.6},{},{:.6},{}",
                r.alpha,
                self.enhancement.as_str(),
                r.mean_f1,
                r.per_image_f1.len()
            )
            .expect("string write");
        }
        s
    }

    pub fn f1s(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_f1).collect()
    }
}

/// Per-image noise stream for one severity.
pub fn noise_seed(seed: RngSeed, image: usize, alpha: f64) -> RngSeed {
    seed.derive(&[image as u64, alpha.to_bits()])
}

/// For every alpha: noise into D of each image, finish the forward pass,
/// score per-image F1 and average. Images whose mask leaves a region empty
/// on D's grid are skipped.
pub fn alpha_sweep(model: &Model, store: &ParamStore<f32>, pairs: &[ImagePair], cfg: &DegradeConfig) -> Result<SweepCurve> {
    cfg.validate()?;
    let mut per_alpha: Vec<Vec<f64>> = vec![Vec::new(); cfg.alphas.len()];
    for (i, pair) in pairs.iter().enumerate() {
        let tap = encode_pair(model, store, pair)?;
        let (d_in, d_out) = match region_means(&tap.d, &pair.gt) {
            Ok(v) => v,
            Err(Error::Degenerate(msg)) => {
                warn!("skipping {}: {msg}", pair.id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let gap = (d_in - d_out).abs();
        for (k, &alpha) in cfg.alphas.iter().enumerate() {
            let noisy = inject_noise_sigma(&tap.d, &pair.gt, alpha * gap, noise_seed(cfg.seed, i, alpha))?;
            let logits = decode_from_tap(model, store, &tap, &noisy)?;
            let pred = binarize(&logits)?.remove(0);
            per_alpha[k].push(metrics_from_confusion(&confusion(&pred, &pair.gt)?)?.f1);
        }
    }
    if per_alpha[0].is_empty() {
        return Err(Error::Input("no image has both changed and unchanged regions".into()));
    }
    let records = cfg
        .alphas
        .iter()
        .zip(per_alpha)
        .map(|(&alpha, f1s)| SweepRecord {
            alpha,
            mean_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
            per_image_f1: f1s,
        })
        .collect();
    Ok(SweepCurve {
        enhancement: Enhancement::of_model(model),
        records,
    })
}

/// True when the model's arch matches the requested enhancement.
pub fn check_enhancement(model: &Model, wanted: Enhancement) -> Result<()> {
    let have = Enhancement::of_model(model);
    if have != wanted {
        let arch = match model {
            Model::Basic(_) => Arch::Basic.as_str(),
            Model::MsIdet(m) => m.config.variant.as_str(),
        };
        return Err(Error::Config(format!(
            "enhancement {} requested but the checkpoint ({arch}) applies {}",
            wanted.as_str(),
            have.as_str()
        )));
    }
    Ok(())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfect_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_grid_has_twenty_points() {
        let g = default_alphas();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 5.0);
        assert_eq!(g[19], 100.0);
        assert!(DegradeConfig::default().validate().is_ok());
    }
}
