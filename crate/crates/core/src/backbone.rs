//! Siamese UNet feature extractor, per-scale differences, their fusion, and
//! the plain convolutional change head built on top of them.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Session};
use crate::params::ParamBuilder;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of squeeze (and expand) levels.
    pub depth: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            depth: 5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Config(format!("degenerate UNet config {self:?}")));
        }
        Ok(())
    }

    /// Channels of squeeze level `l` (0-based, finest first).
    pub fn encoder_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Channels of the expand output that merges squeeze level `l`.
    pub fn decoder_channels(&self, l: usize) -> usize {
        self.encoder_channels(l.saturating_sub(1))
    }

    /// Channels of the expand outputs in coarse-to-fine order.
    pub fn decoder_schedule(&self) -> Vec<usize> {
        (0..self.depth).rev().map(|l| self.decoder_channels(l)).collect()
    }

    pub fn encoder_schedule(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.encoder_channels(l)).collect()
    }

    /// Height and width must survive `depth - 1` exact halvings; the last
    /// pooling step rounds up.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << (self.depth - 1);
        if h < 2 * m || w < 2 * m || h % m != 0 || w % m != 0 {
            return Err(Error::Input(format!(
                "image size {h}x{w} must be a multiple of {m} and at least {}",
                2 * m
            )));
        }
        Ok(())
    }
}

/// Per-image features of one branch.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Pooled squeeze outputs, finest first.
    pub encoder: Vec<Var>,
    /// Pre-pool squeeze outputs used as skip connections, finest first.
    pub skips: Vec<Var>,
    /// Expand outputs, coarsest first.
    pub decoder: Vec<Var>,
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            a: Conv2d::new(&mut sub, "conv_a", cin, cout, 3)?,
            b: Conv2d::new(&mut sub, "conv_b", cout, cout, 3)?,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.a.forward_relu(s, x)?;
        self.b.forward_relu(s, h)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    down: Vec<DoubleConv>,
    /// Indexed by the squeeze level each expand block merges.
    up: Vec<DoubleConv>,
}

impl UNet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut sub = pb.sub("unet");
        let mut down = Vec::with_capacity(config.depth);
        let mut up = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let cin = if l == 0 { config.in_channels } else { config.encoder_channels(l - 1) };
            down.push(DoubleConv::new(&mut sub, &format!("down{l}"), cin, config.encoder_channels(l))?);
        }
        for l in 0..config.depth {
            let below = if l + 1 == config.depth {
                config.encoder_channels(l)
            } else {
                config.decoder_channels(l + 1)
            };
            let cin = below + config.encoder_channels(l);
            up.push(DoubleConv::new(&mut sub, &format!("up{l}"), cin, config.decoder_channels(l))?);
        }
        Ok(Self {
            config: config.clone(),
            down,
            up,
        })
    }

    /// Squeeze path only. Returns (pooled outputs, skips), finest first.
    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let (_, c, h, w) = s.graph.value(x).dims4("unet")?;
        if c != self.config.in_channels {
            return Err(Error::dim("unet", format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        self.config.check_input(h, w)?;
        let mut pooled = Vec::with_capacity(self.config.depth);
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut cur = x;
        for block in &self.down {
            let sk = block.forward(s, cur)?;
            cur = s.graph.max_pool2d_ceil(sk, 2)?;
            skips.push(sk);
            pooled.push(cur);
        }
        Ok((pooled, skips))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<FeaturePyramid> {
        let (encoder, skips) = self.encode(s, x)?;
        let mut cur = *encoder.last().expect("depth >= 1");
        let mut decoder = Vec::with_capacity(self.config.depth);
        for l in (0..self.config.depth).rev() {
            let sk = skips[l];
            let (_, _, h, w) = s.graph.value(sk).dims4("unet")?;
            let up = s.graph.upsample_bilinear(cur, h, w)?;
            let cat = s.graph.concat_channels(&[up, sk])?;
            cur = self.up[l].forward(s, cat)?;
            decoder.push(cur);
        }
        Ok(FeaturePyramid { encoder, skips, decoder })
    }
}

/// D^l = |F^l_x - F^l_y| for every squeeze level.
pub fn feature_difference<T: Scalar>(s: &mut Session<'_, T>, fx: &[Var], fy: &[Var]) -> Result<Vec<Var>> {
    if fx.len() != fy.len() {
        return Err(Error::dim("feature_difference", format!("{} vs {} levels", fx.len(), fy.len())));
    }
    fx.iter()
        .zip(fy)
        .map(|(&a, &b)| {
            let d = s.graph.sub(a, b)?;
            Ok(s.graph.abs(d))
        })
        .collect()
}

/// Resizes every difference map to a quarter of the input resolution,
/// concatenates them and mixes them down to `out_channels`.
#[derive(Debug, Clone)]
pub struct DifferenceFusion {
    conv: Conv2d,
    pub out_channels: usize,
}

impl DifferenceFusion {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, unet: &UNetConfig, out_channels: usize) -> Result<Self> {
        let cin: usize = unet.encoder_schedule().iter().sum();
        Ok(Self {
            conv: Conv2d::new(pb, "fuse", cin, out_channels, 3)?,
            out_channels,
        })
    }

    /// Conv output before the ReLU.
    pub fn preactivation<T: Scalar>(&self, s: &mut Session<'_, T>, diffs: &[Var], (h, w): (usize, usize)) -> Result<Var> {
        let (th, tw) = (h / 4, w / 4);
        let resized = diffs
            .iter()
            .map(|&d| s.graph.upsample_bilinear(d, th, tw))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.graph.concat_channels(&resized)?;
        self.conv.forward(s, cat)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, diffs: &[Var], size: (usize, usize)) -> Result<Var> {
        let z = self.preactivation(s, diffs, size)?;
        Ok(s.graph.relu(z))
    }
}

/// Two 3x3 convs and a bilinear resize to full resolution, yielding
/// 2-channel change logits.
#[derive(Debug, Clone)]
pub struct BasicHead {
    a: Conv2d,
    b: Conv2d,
}

impl BasicHead {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let mut sub = pb.sub("head");
        Ok(Self {
            a: Conv2d::new(&mut sub, "conv_a", channels, channels, 3)?,
            b: Conv2d::new(&mut sub, "conv_b", channels, 2, 3)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, d: Var, (h, w): (usize, usize)) -> Result<Var> {
        let z = self.a.forward_relu(s, d)?;
        let z = self.b.forward(s, z)?;
        s.graph.upsample_bilinear(z, h, w)
    }
}

/// Backbone, fused difference and basic head with no feature enhancement.
#[derive(Debug, Clone)]
pub struct BasicCd {
    pub unet: UNet,
    pub fusion: DifferenceFusion,
    pub head: BasicHead,
}

impl BasicCd {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, unet: &UNetConfig, fused_channels: usize) -> Result<Self> {
        Ok(Self {
            unet: UNet::new(pb, unet)?,
            fusion: DifferenceFusion::new(pb, unet, fused_channels)?,
            head: BasicHead::new(pb, fused_channels)?,
        })
    }

    /// The fused difference map D for a pair.
    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<Var> {
        let size = pair_size(s, x, y)?;
        let (fx, _) = self.unet.encode(s, x)?;
        let (fy, _) = self.unet.encode(s, y)?;
        let diffs = feature_difference(s, &fx, &fy)?;
        self.fusion.forward(s, &diffs, size)
    }

    pub fn decode<T: Scalar>(&self, s: &mut Session<'_, T>, d: Var, size: (usize, usize)) -> Result<Var> {
        self.head.forward(s, d, size)
    }
}

/// Checks that X and Y are image batches of identical shape; returns (H, W).
pub fn pair_size<T: Scalar>(s: &Session<'_, T>, x: Var, y: Var) -> Result<(usize, usize)> {
    let sx = s.graph.shape(x);
    let sy = s.graph.shape(y);
    if sx != sy {
        return Err(Error::dim("pair", format!("X {sx:?} vs Y {sy:?}")));
    }
    let (_, _, h, w) = s.graph.value(x).dims4("pair")?;
    Ok((h, w))
}
