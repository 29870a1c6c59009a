//! Binary masks, confusion counts and the five evaluation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-major binary mask with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Input(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let src_y: Vec<usize> = (0..height).map(|o| nearest_src(o, self.height, height)).collect();
        let src_x: Vec<usize> = (0..width).map(|o| nearest_src(o, self.width, width)).collect();
        Mask::from_fn(height, width, |y, x| self.get(src_y[y], src_x[x]))
    }
}

fn nearest_src(o: usize, input: usize, output: usize) -> usize {
    (((o as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1)
}

/// Per-pixel argmax of `[N, 2, H, W]` logits; ties go to class 0.
pub fn binarize<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Mask>> {
    let (n, c, h, w) = logits.dims4("binarize")?;
    if c != 2 {
        return Err(Error::dim("binarize", format!("expected 2 channels, got {c}")));
    }
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            let base = b * 2 * h * w;
            let data = (0..h * w).map(|i| (d[base + h * w + i] > d[base + i]) as u8).collect();
            Mask { height: h, width: w, data }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Input(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub iou: f64,
    /// Set when any metric hit a 0/0 and was reported as 0.
    pub degenerate: bool,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "dataset,variant,T,P,R,F1,OA,IoU";

    pub fn csv_row(&self, dataset: &str, variant: &str, t: usize) -> String {
        let mut s = format!("{dataset},{variant},{t}");
        for v in [self.precision, self.recall, self.f1, self.oa, self.iou] {
            write!(s, ",{v:.6}").expect("string write");
        }
        s
    }
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

pub fn metrics_from_confusion(c: &ConfusionCounts) -> Result<MetricReport> {
    if c.total() == 0 {
        return Err(Error::Input("metrics of an empty confusion matrix".into()));
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let mut degenerate = false;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut degenerate);
    let oa = (tp + tn) / (tp + tn + fp + fn_);
    let iou = ratio(tp, tp + fp + fn_, &mut degenerate);
    Ok(MetricReport {
        precision,
        recall,
        f1,
        oa,
        iou,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary_values() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
        assert!(Mask::new(1, 2, vec![0]).is_err());
    }

    #[test]
    fn nearest_downsample_keeps_blocks() {
        let m = Mask::from_fn(4, 4, |y, _| y < 2);
        let r = m.resize_nearest(2, 2);
        assert_eq!(r.data(), &[1, 1, 0, 0]);
    }

    #[test]
    fn csv_row_format() {
        let c = ConfusionCounts {
            tp: 50,
            tn: 0,
            fp: 25,
            fn_: 25,
        };
        let r = metrics_from_confusion(&c).unwrap();
        assert_eq!(r.csv_row("synth", "full", 2), "synth,full,2,0.666667,0.666667,0.666667,0.500000,0.500000");
    }
}
