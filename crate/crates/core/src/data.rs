//! Image pairs on disk (binary PPM/PGM), dataset manifests, the train/val
//! split and the procedural synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::rng::{label_hash, RngSeed};
use crate::tensor::Tensor;

/// Reference image, query image and change mask. Images are `[3, H, W]` in
/// [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub gt: Mask,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, x: Tensor<f32>, y: Tensor<f32>, gt: Mask) -> Result<Self> {
        let id = id.into();
        let &[3, h, w] = x.shape() else {
            return Err(Error::Input(format!("pair {id}: X must be [3,H,W], got {:?}", x.shape())));
        };
        if y.shape() != x.shape() || (gt.height(), gt.width()) != (h, w) {
            return Err(Error::Input(format!(
                "pair {id}: X {:?}, Y {:?}, gt {}x{} disagree",
                x.shape(),
                y.shape(),
                gt.height(),
                gt.width()
            )));
        }
        Ok(Self { id, x, y, gt })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.gt.height(), self.gt.width())
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Input(format!("PPM needs a [3,H,W] image, got {:?}", img.shape())));
    };
    let d = img.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(d[c * h * w + i]));
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.data().iter().map(|&v| v * 255));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a netpbm header into (magic, width, height, maxval, payload offset).
fn parse_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a [u8], usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(path, "truncated header"));
        }
        fields.push(&bytes[start..i]);
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err(Error::parse(path, "missing raster data"));
    }
    let num = |f: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, format!("bad {what} field {:?}", String::from_utf8_lossy(f))))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if w == 0 || h == 0 {
        return Err(Error::parse(path, format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(Error::parse(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    Ok((fields[0], w, h, maxval, i + 1))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    let (magic, w, h, _, off) = parse_header(path, &bytes)?;
    if magic != b"P6" {
        return Err(Error::parse(path, "not a binary PPM (P6)"));
    }
    let raster = &bytes[off..];
    if raster.len() != 3 * w * h {
        return Err(Error::parse(path, format!("expected {} raster bytes, found {}", 3 * w * h, raster.len())));
    }
    Tensor::new(
        &[3, h, w],
        (0..3 * h * w)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                raster[3 * p + c] as f32 / 255.0
            })
            .collect(),
    )
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let (magic, w, h, _, off) = parse_header(path, &bytes)?;
    if magic != b"P5" {
        return Err(Error::parse(path, "not a binary PGM (P5)"));
    }
    let raster = &bytes[off..];
    if raster.len() != w * h {
        return Err(Error::parse(path, format!("expected {} raster bytes, found {}", w * h, raster.len())));
    }
    let mut data = Vec::with_capacity(w * h);
    for (i, &v) in raster.iter().enumerate() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::parse(
                    path,
                    format!("mask pixel {i} has value {other}; only 0 and 255 are allowed"),
                ))
            }
        }
    }
    Mask::new(h, w, data)
}

fn pair_paths(dir: &Path, id: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{id}_X.ppm")),
        dir.join(format!("{id}_Y.ppm")),
        dir.join(format!("{id}_gt.pgm")),
    ]
}

pub fn save_pair(dir: &Path, pair: &ImagePair) -> Result<()> {
    let [px, py, pg] = pair_paths(dir, &pair.id);
    write_ppm(&px, &pair.x)?;
    write_ppm(&py, &pair.y)?;
    write_pgm(&pg, &pair.gt)
}

pub fn load_pair(dir: &Path, id: &str) -> Result<ImagePair> {
    let [px, py, pg] = pair_paths(dir, id);
    ImagePair::new(id, read_ppm(&px)?, read_ppm(&py)?, read_pgm_mask(&pg)?)
}

pub const MANIFEST: &str = "manifest.txt";

pub fn write_manifest(dir: &Path, ids: &[String]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    fs::write(&path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Loads every pair listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImagePair>> {
    let ids = read_manifest(dir)?;
    if ids.is_empty() {
        return Err(Error::Input(format!("{} lists no pairs", dir.join(MANIFEST).display())));
    }
    ids.iter().map(|id| load_pair(dir, id)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Usage(format!("unknown split {other:?} (train|val)"))),
        }
    }
}

/// Deterministic 80/20 assignment by id hash.
pub fn split_of(id: &str) -> Split {
    if label_hash(id) % 5 == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn select_split(pairs: &[ImagePair], split: Split) -> Vec<ImagePair> {
    pairs.iter().filter(|p| split_of(&p.id) == split).cloned().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub height: usize,
    pub width: usize,
    pub change_ratio_target: f64,
    /// Amplitude of the global brightness/contrast change applied to Y. Pixel
    /// noise with std `0.1 * photometric_jitter` is added on top.
    pub photometric_jitter: f64,
    /// Number of random colour blobs over the background gradient.
    pub background_complexity: usize,
    pub min_changes: usize,
    pub max_changes: usize,
    pub seed: RngSeed,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            height: 64,
            width: 64,
            change_ratio_target: 0.07,
            photometric_jitter: 0.1,
            background_complexity: 4,
            min_changes: 1,
            max_changes: 5,
            seed: RngSeed(0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 16 != 0 || self.width % 16 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a nonzero multiple of 16",
                self.height, self.width
            )));
        }
        if !(self.change_ratio_target > 0.0 && self.change_ratio_target < 1.0) {
            return Err(Error::Config(format!(
                "change ratio target {} is outside (0, 1)",
                self.change_ratio_target
            )));
        }
        if self.min_changes > self.max_changes {
            return Err(Error::Config("min_changes exceeds max_changes".into()));
        }
        if self.max_changes > 0 {
            let area = self.change_ratio_target * (self.height * self.width) as f64;
            if area / (self.max_changes as f64) < 4.0 || self.change_ratio_target > 0.5 {
                return Err(Error::Config(format!(
                    "change ratio {} is infeasible for {} shapes on {}x{}",
                    self.change_ratio_target, self.max_changes, self.height, self.width
                )));
            }
        }
        if self.photometric_jitter < 0.0 {
            return Err(Error::Config("photometric jitter must be >= 0".into()));
        }
        Ok(())
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    color: [f64; 3],
    weight: f64,
}

fn background(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let (h, w) = (cfg.height, cfg.width);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let blobs: Vec<Blob> = (0..cfg.background_complexity)
        .map(|_| Blob {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            radius: rng.random_range(0.1..0.35) * h.min(w) as f64,
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            weight: rng.random_range(0.3..0.8),
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let t = ((y as f64 / h as f64 - 0.5) * dy + (x as f64 / w as f64 - 0.5) * dx + 0.75) / 1.5;
            let mut px: [f64; 3] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
            for b in &blobs {
                let r2 = ((y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2)) / (b.radius * b.radius);
                let a = b.weight * (-0.5 * r2).exp();
                for c in 0..3 {
                    px[c] += a * (b.color[c] - px[c]);
                }
            }
            out.push(px);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    hy: f64,
    hx: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        match self.kind {
            ShapeKind::Rect => py.abs() <= self.hy && px.abs() <= self.hx,
            ShapeKind::Ellipse => (py / self.hy).powi(2) + (px / self.hx).powi(2) <= 1.0,
        }
    }
}

fn random_shape(cfg: &SynthConfig, area: f64, bg: &[[f64; 3]], rng: &mut impl Rng) -> Shape {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let kind = if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let aspect: f64 = rng.random_range(0.5..2.0);
    // half extents so that the drawn area is close to `area`
    let base = match kind {
        ShapeKind::Rect => area / 4.0,
        ShapeKind::Ellipse => area / std::f64::consts::PI,
    };
    let hy = (base * aspect).sqrt().clamp(1.0, h / 3.0);
    let hx = (base / aspect).sqrt().clamp(1.0, w / 3.0);
    let cy = rng.random_range(hy..h - hy);
    let cx = rng.random_range(hx..w - hx);
    let under = bg[(cy as usize).min(cfg.height - 1) * cfg.width + (cx as usize).min(cfg.width - 1)];
    // keep the object visibly distinct from the background it covers
    let mut color = [0.0; 3];
    for _ in 0..16 {
        color = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let dist = (0..3).map(|c| (color[c] - under[c]).abs()).fold(0.0, f64::max);
        if dist >= 0.35 {
            break;
        }
    }
    Shape {
        kind,
        cy,
        cx,
        hy,
        hx,
        color,
    }
}

fn to_image(pixels: &[[f64; 3]], h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |i| pixels[i % (h * w)][i / (h * w)].clamp(0.0, 1.0) as f32)
}

/// Generates pair `index` of the synthetic set. Object shapes are drawn into
/// either X (removed objects) or Y (added objects) and are the only source of
/// ground-truth change; Y also gets a global photometric change and noise.
pub fn synth_pair(cfg: &SynthConfig, index: usize) -> Result<ImagePair> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = cfg.seed.derive(&[index as u64]).rng();
    let bg = background(cfg, &mut rng);
    let mut xs = bg.clone();
    let mut ys = bg.clone();
    let mut changed = vec![false; h * w];
    let k = rng.random_range(cfg.min_changes..=cfg.max_changes);
    if k > 0 {
        let per_shape = cfg.change_ratio_target * (h * w) as f64 / k as f64;
        for _ in 0..k {
            let area = per_shape * rng.random_range(0.6..1.4);
            let shape = random_shape(cfg, area, &bg, &mut rng);
            let target = if rng.random_bool(0.5) { &mut ys } else { &mut xs };
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y, x) {
                        target[y * w + x] = shape.color;
                        changed[y * w + x] = true;
                    }
                }
            }
        }
    }
    let j = cfg.photometric_jitter;
    if j > 0.0 {
        let brightness: f64 = rng.random_range(-j..j);
        let contrast: f64 = 1.0 + rng.random_range(-j..j);
        let noise = Normal::new(0.0, 0.1 * j).expect("finite std");
        for px in ys.iter_mut() {
            for v in px.iter_mut() {
                *v = (*v - 0.5) * contrast + 0.5 + brightness + noise.sample(&mut rng);
            }
        }
    }
    let gt = Mask::from_fn(h, w, |y, x| changed[y * w + x]);
    ImagePair::new(format!("pair{index:04}"), to_image(&xs, h, w), to_image(&ys, h, w), gt)
}

/// Writes the synthetic set plus its manifest. Returns the generated ids.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<String>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut ids = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let pair = synth_pair(cfg, i)?;
        save_pair(out_dir, &pair)?;
        ids.push(pair.id);
    }
    write_manifest(out_dir, &ids)?;
    Ok(ids)
}

/// Stacks images of several pairs into `[N, 3, H, W]` batches.
pub fn batch_images(pairs: &[&ImagePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let xs: Vec<Tensor<f32>> = pairs
        .iter()
        .map(|p| {
            let s = p.x.shape().to_vec();
            p.x.clone().reshaped(&[1, s[0], s[1], s[2]])
        })
        .collect::<Result<_>>()?;
    let ys: Vec<Tensor<f32>> = pairs
        .iter()
        .map(|p| {
            let s = p.y.shape().to_vec();
            p.y.clone().reshaped(&[1, s[0], s[1], s[2]])
        })
        .collect::<Result<_>>()?;
    Ok((
        Tensor::stack_batch(&xs.iter().collect::<Vec<_>>())?,
        Tensor::stack_batch(&ys.iter().collect::<Vec<_>>())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_roughly_eighty_twenty() {
        let val = (0..1000).filter(|i| split_of(&format!("pair{i:04}")) == Split::Val).count();
        assert!((150..250).contains(&val), "{val}");
    }

    #[test]
    fn infeasible_ratio_is_rejected() {
        let cfg = SynthConfig {
            change_ratio_target: 0.9,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            height: 40,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
