//! Multi-scale change detector: UNet features, fused difference D, per-scale
//! IDET enhancement, coarse-to-fine fusion, per-scale heads and the final
//! fusion conv. Also hosts the ablation variants.

use crate::autodiff::Var;
use crate::backbone::{feature_difference, pair_size, DifferenceFusion, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::idet::{detokenize, tokenize, DiffGuidance, DiffTransformer, Idet, IdetConfig, PlainTransformer};
use crate::nn::{BatchNorm2d, Conv2d, Session};
use crate::params::ParamBuilder;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// D is passed to every scale unchanged.
    NoEnhance,
    /// D plus a four-block CNN over the projected features and D.
    CnnEnhance,
    /// Per-scale heads without coarse-to-fine chaining; the final map is the
    /// sum of all upsampled heads.
    NaiveMultiscale,
    /// Only the finest scale is enhanced and fused.
    SingleScale,
    /// The difference transformer is a 3x3 conv over [D, D~].
    NoTauDiff,
    /// The reference/query transformers are single 3x3 convs.
    NoTauRefQue,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoEnhance,
        Variant::CnnEnhance,
        Variant::NaiveMultiscale,
        Variant::SingleScale,
        Variant::NoTauDiff,
        Variant::NoTauRefQue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEnhance => "no_enhance",
            Variant::CnnEnhance => "cnn_enhance",
            Variant::NaiveMultiscale => "naive_multiscale",
            Variant::SingleScale => "single_scale",
            Variant::NoTauDiff => "no_tau_diff",
            Variant::NoTauRefQue => "no_tau_refque",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    fn uses_projection(self) -> bool {
        !matches!(self, Variant::NoEnhance)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsIdetConfig {
    pub unet: UNetConfig,
    pub idet: IdetConfig,
    pub variant: Variant,
    /// Spatial-reduction ratio per scale, coarsest first.
    pub sr_ratios: Vec<usize>,
}

impl Default for MsIdetConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            idet: IdetConfig::default(),
            variant: Variant::Full,
            sr_ratios: vec![1, 1, 2, 4, 8],
        }
    }
}

impl MsIdetConfig {
    pub fn scales(&self) -> usize {
        self.unet.depth
    }

    /// Width of D, the tokens and every enhanced map.
    pub fn width(&self) -> usize {
        self.idet.channels
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.idet.validate()?;
        if self.sr_ratios.len() != self.scales() {
            return Err(Error::Config(format!(
                "{} sr ratios for {} scales",
                self.sr_ratios.len(),
                self.scales()
            )));
        }
        if self.sr_ratios.contains(&0) {
            return Err(Error::Config("sr ratios must be >= 1".into()));
        }
        Ok(())
    }

    /// Input channels of the final fusion conv.
    pub fn final_fusion_channels(&self) -> usize {
        match self.variant {
            Variant::SingleScale => 4,
            _ => 2 * (self.scales() + 1),
        }
    }
}

/// The conv stack that mixes a scale's enhanced map with the upsampled
/// output of the coarser scale.
#[derive(Debug, Clone)]
struct FusionStack {
    convs: Vec<Conv2d>,
}

impl FusionStack {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        let half = (cin / 2).max(1);
        Ok(Self {
            convs: vec![
                Conv2d::new(&mut sub, "conv0", cin, half, 3)?,
                Conv2d::new(&mut sub, "conv1", half, half, 3)?,
                Conv2d::new(&mut sub, "conv2", half, cout, 3)?,
            ],
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.convs.iter().try_fold(x, |h, c| c.forward_relu(s, h))
    }
}

#[derive(Debug, Clone)]
struct CnnEnhancer {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
}

impl CnnEnhancer {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, width: usize) -> Result<Self> {
        let mut sub = pb.sub("cnn");
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { 3 * width } else { width };
            convs.push(Conv2d::new(&mut sub, &format!("conv{i}"), cin, width, 3)?);
            norms.push(BatchNorm2d::new(&mut sub, &format!("bn{i}"), width)?);
        }
        Ok(Self { convs, norms })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, rx: Var, ry: Var, d: Var) -> Result<Var> {
        let mut h = s.graph.concat_channels(&[rx, ry, d])?;
        for (c, n) in self.convs.iter().zip(&self.norms) {
            h = c.forward(s, h)?;
            h = n.forward(s, h)?;
            h = s.graph.relu(h);
        }
        s.graph.add(d, h)
    }
}

#[derive(Debug, Clone)]
enum Enhancer {
    Identity,
    Idet(Idet),
    Cnn(CnnEnhancer),
    NoTauDiff {
        tau_ref: PlainTransformer,
        tau_que: PlainTransformer,
        guidance: DiffGuidance,
        conv: Conv2d,
    },
    NoTauRefQue {
        conv_ref: Conv2d,
        conv_que: Conv2d,
        guidance: DiffGuidance,
        tau_diff: DiffTransformer,
    },
}

/// Per-scale projection of decoder features to the common width, shared by
/// both branches.
#[derive(Debug, Clone)]
struct Scale {
    proj: Option<Conv2d>,
    enhancer: Enhancer,
}

/// Everything the forward pass produces. Scale-indexed lists run coarse to
/// fine.
#[derive(Debug, Clone)]
pub struct ChangeMaps {
    /// Fused difference at a quarter of the input resolution.
    pub d: Var,
    /// Enhanced difference per scale (D^l hat).
    pub enhanced: Vec<Var>,
    /// Output of the coarse-to-fine fusion per scale (D^l hat prime).
    pub fused: Vec<Var>,
    /// Auxiliary logits: index 0 is the head on D, then one per fused scale.
    pub aux: Vec<Var>,
    /// Final 2-channel logits at input resolution.
    pub logits: Var,
}

/// Branch features that feed the decoding stage.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub d: Var,
    pub decoder_x: Vec<Var>,
    pub decoder_y: Vec<Var>,
    pub size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct MsIdet {
    pub config: MsIdetConfig,
    pub unet: UNet,
    pub fusion: DifferenceFusion,
    scales: Vec<Scale>,
    fuse_stacks: Vec<FusionStack>,
    heads: Vec<Conv2d>,
    d_head: Conv2d,
    final_conv: Option<Conv2d>,
}

impl MsIdet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &MsIdetConfig) -> Result<Self> {
        config.validate()?;
        let width = config.width();
        let unet = UNet::new(pb, &config.unet)?;
        let fusion = DifferenceFusion::new(pb, &config.unet, width)?;
        let dec = config.unet.decoder_schedule();
        let mut scales = Vec::new();
        let mut fuse_stacks = Vec::new();
        let mut heads = Vec::new();
        let active: Vec<usize> = match config.variant {
            Variant::SingleScale => vec![config.scales() - 1],
            _ => (0..config.scales()).collect(),
        };
        let chained = !matches!(config.variant, Variant::NaiveMultiscale | Variant::SingleScale);
        for (pos, &l) in active.iter().enumerate() {
            let mut sb = pb.sub(&format!("scale{l}"));
            let proj = if config.variant.uses_projection() {
                Some(Conv2d::new(&mut sb, "proj", dec[l], width, 1)?)
            } else {
                None
            };
            let sr = config.sr_ratios[l];
            let enhancer = match config.variant {
                Variant::NoEnhance => Enhancer::Identity,
                Variant::Full | Variant::NaiveMultiscale | Variant::SingleScale => Enhancer::Idet(Idet::new(&mut sb, &config.idet, sr)?),
                Variant::CnnEnhance => Enhancer::Cnn(CnnEnhancer::new(&mut sb, width)?),
                Variant::NoTauDiff => Enhancer::NoTauDiff {
                    tau_ref: PlainTransformer::new(&mut sb, "tau_ref", &config.idet, sr)?,
                    tau_que: PlainTransformer::new(&mut sb, "tau_que", &config.idet, sr)?,
                    guidance: DiffGuidance::new(&mut sb, &config.idet)?,
                    conv: Conv2d::new(&mut sb, "diff_conv", 2 * width, width, 3)?,
                },
                Variant::NoTauRefQue => Enhancer::NoTauRefQue {
                    conv_ref: Conv2d::new(&mut sb, "ref_conv", width, width, 3)?,
                    conv_que: Conv2d::new(&mut sb, "que_conv", width, width, 3)?,
                    guidance: DiffGuidance::new(&mut sb, &config.idet)?,
                    tau_diff: DiffTransformer::new(&mut sb, "tau_diff", &config.idet, sr)?,
                },
            };
            scales.push(Scale { proj, enhancer });
            let cin = if chained && pos > 0 { 2 * width } else { width };
            fuse_stacks.push(FusionStack::new(&mut sb, "fuse", cin, width)?);
            heads.push(Conv2d::new(&mut sb, "head", width, 2, 3)?);
        }
        let d_head = Conv2d::new(pb, "d_head", width, 2, 3)?;
        let final_conv = match config.variant {
            Variant::NaiveMultiscale => None,
            _ => Some(Conv2d::new(pb, "final", config.final_fusion_channels(), 2, 3)?),
        };
        Ok(Self {
            config: config.clone(),
            unet,
            fusion,
            scales,
            fuse_stacks,
            heads,
            d_head,
            final_conv,
        })
    }

    /// Scale indices (coarse to fine) that carry an enhancement branch.
    pub fn active_scales(&self) -> Vec<usize> {
        match self.config.variant {
            Variant::SingleScale => vec![self.config.scales() - 1],
            _ => (0..self.config.scales()).collect(),
        }
    }

    /// Backbone features of both images and their fused difference.
    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<Encoded> {
        let size = pair_size(s, x, y)?;
        let px = self.unet.forward(s, x)?;
        let py = self.unet.forward(s, y)?;
        let diffs = feature_difference(s, &px.encoder, &py.encoder)?;
        let d = self.fusion.forward(s, &diffs, size)?;
        Ok(Encoded {
            d,
            decoder_x: px.decoder,
            decoder_y: py.decoder,
            size,
        })
    }

    fn enhance<T: Scalar>(&self, s: &mut Session<'_, T>, scale: &Scale, rx: Var, ry: Var, d: Var) -> Result<Var> {
        let (_, _, h, w) = s.graph.value(d).dims4("enhance")?;
        let size = (h, w);
        let (rx, ry) = match &scale.proj {
            Some(p) => (p.forward(s, rx)?, p.forward(s, ry)?),
            None => (rx, ry),
        };
        let iterations = self.config.idet.iterations;
        match &scale.enhancer {
            Enhancer::Identity => Ok(d),
            Enhancer::Cnn(c) => c.forward(s, rx, ry, d),
            Enhancer::Idet(idet) => {
                let (tx, ty, td) = (tokenize(s, rx)?, tokenize(s, ry)?, tokenize(s, d)?);
                let out = idet.refine(s, tx, ty, td, size)?;
                detokenize(s, out, h, w)
            }
            Enhancer::NoTauDiff {
                tau_ref,
                tau_que,
                guidance,
                conv,
            } => {
                if iterations == 0 {
                    return Ok(d);
                }
                let (tx, ty) = (tokenize(s, rx)?, tokenize(s, ry)?);
                let (tx, ty) = (tau_ref.forward(s, tx, size)?, tau_que.forward(s, ty, size)?);
                let g = guidance.forward(s, tx, ty)?;
                let g = detokenize(s, g, h, w)?;
                let mut cur = d;
                for _ in 0..iterations {
                    let cat = s.graph.concat_channels(&[cur, g])?;
                    cur = conv.forward(s, cat)?;
                }
                Ok(cur)
            }
            Enhancer::NoTauRefQue {
                conv_ref,
                conv_que,
                guidance,
                tau_diff,
            } => {
                if iterations == 0 {
                    return Ok(d);
                }
                let (cx, cy) = (conv_ref.forward(s, rx)?, conv_que.forward(s, ry)?);
                let (tx, ty) = (tokenize(s, cx)?, tokenize(s, cy)?);
                let g = guidance.forward(s, tx, ty)?;
                let terms = tau_diff.guidance_terms(s, g, size)?;
                let mut cur = tokenize(s, d)?;
                for _ in 0..iterations {
                    cur = tau_diff.apply(s, cur, &terms)?;
                }
                detokenize(s, cur, h, w)
            }
        }
    }

    /// Enhancement, coarse-to-fine fusion and prediction from encoded
    /// features. `enc.d` may be replaced before calling this.
    pub fn decode<T: Scalar>(&self, s: &mut Session<'_, T>, enc: &Encoded) -> Result<ChangeMaps> {
        let (h, w) = enc.size;
        let d = enc.d;
        let chained = !matches!(self.config.variant, Variant::NaiveMultiscale | Variant::SingleScale);
        let mut enhanced = Vec::new();
        let mut fused: Vec<Var> = Vec::new();
        let mut aux = vec![self.d_head.forward(s, d)?];
        for (pos, l) in self.active_scales().into_iter().enumerate() {
            let (rx, ry) = (enc.decoder_x[l], enc.decoder_y[l]);
            let (_, _, sh, sw) = s.graph.value(rx).dims4("decode")?;
            let dl = s.graph.upsample_bilinear(d, sh, sw)?;
            let e = self.enhance(s, &self.scales[pos], rx, ry, dl)?;
            let input = match fused.last() {
                Some(&prev) if chained => {
                    let up = s.graph.upsample_bilinear(prev, sh, sw)?;
                    s.graph.concat_channels(&[e, up])?
                }
                _ => e,
            };
            let f = self.fuse_stacks[pos].forward(s, input)?;
            aux.push(self.heads[pos].forward(s, f)?);
            enhanced.push(e);
            fused.push(f);
        }
        let full: Vec<Var> = aux
            .iter()
            .map(|&m| s.graph.upsample_bilinear(m, h, w))
            .collect::<Result<_>>()?;
        let logits = match &self.final_conv {
            Some(conv) => {
                let cat = s.graph.concat_channels(&full)?;
                let c = s.graph.shape(cat)[1];
                let expected = self.config.final_fusion_channels();
                if c != expected {
                    return Err(Error::Config(format!("final fusion sees {c} channels, expected {expected}")));
                }
                conv.forward(s, cat)?
            }
            None => full[1..].iter().try_fold(full[0], |acc, &m| s.graph.add(acc, m))?,
        };
        Ok(ChangeMaps {
            d,
            enhanced,
            fused,
            aux,
            logits,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<ChangeMaps> {
        let enc = self.encode(s, x, y)?;
        self.decode(s, &enc)
    }
}
