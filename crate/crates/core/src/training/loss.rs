//! Per-map cross-entropy / focal losses and their multi-map total.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::msidet::ChangeMaps;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Cross-entropy on every auxiliary map and the final map.
    #[default]
    MultiCe,
    /// Cross-entropy on the final map only.
    SingleCe,
    /// Focal loss on every auxiliary map and the final map.
    MultiFocal,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::MultiCe => "multi_ce",
            LossMode::SingleCe => "single_ce",
            LossMode::MultiFocal => "multi_focal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multi_ce" => Ok(LossMode::MultiCe),
            "single_ce" => Ok(LossMode::SingleCe),
            "multi_focal" => Ok(LossMode::MultiFocal),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (multi_ce|single_ce|multi_focal)"
            ))),
        }
    }
}

/// Ground-truth labels of every batch item resized to `h`x`w`, concatenated.
pub fn resized_targets(gt: &[Mask], h: usize, w: usize) -> Vec<u8> {
    gt.iter().flat_map(|m| m.resize_nearest(h, w).data().to_vec()).collect()
}

/// Mean over pixels of -(1 - p_t)^gamma log p_t for `[N, 2, h, w]` logits.
pub fn focal_loss_map<T: Scalar>(g: &mut Graph<T>, logits: Var, gt: &[Mask], gamma: f64) -> Result<Var> {
    let (n, c, h, w) = g.value(logits).dims4("loss")?;
    if c != 2 {
        return Err(Error::dim("loss", format!("expected 2-channel logits, got {c}")));
    }
    if gt.len() != n {
        return Err(Error::Input(format!("{} masks for a batch of {n}", gt.len())));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let targets = resized_targets(gt, h, w);
    g.pixel_loss(logits, &targets, gamma)
}

pub fn cross_entropy_map<T: Scalar>(g: &mut Graph<T>, logits: Var, gt: &[Mask]) -> Result<Var> {
    focal_loss_map(g, logits, gt, 0.0)
}

/// The summed loss and each of its terms. Term names are `M0`, `M1`, ... for
/// the auxiliary maps and `M` for the final map.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub terms: Vec<(String, Var)>,
}

pub fn loss_term_names(maps: &ChangeMaps, mode: LossMode) -> Vec<String> {
    let mut names: Vec<String> = match mode {
        LossMode::SingleCe => Vec::new(),
        _ => (0..maps.aux.len()).map(|i| format!("M{i}")).collect(),
    };
    names.push("M".into());
    names
}

pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    maps: &ChangeMaps,
    gt: &[Mask],
    mode: LossMode,
    focal_gamma: f64,
) -> Result<LossBreakdown> {
    let gamma = match mode {
        LossMode::MultiFocal => focal_gamma,
        _ => 0.0,
    };
    let mut inputs: Vec<Var> = Vec::new();
    if mode != LossMode::SingleCe {
        if maps.aux.is_empty() {
            return Err(Error::Config(format!(
                "loss mode {} needs intermediate change maps; this model has none",
                mode.as_str()
            )));
        }
        inputs.extend(&maps.aux);
    }
    inputs.push(maps.logits);
    let names = loss_term_names(maps, mode);
    let mut terms = Vec::with_capacity(inputs.len());
    for (name, &m) in names.into_iter().zip(&inputs) {
        terms.push((name, focal_loss_map(g, m, gt, gamma)?));
    }
    let mut total = terms[0].1;
    for &(_, t) in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossBreakdown { total, terms })
}
