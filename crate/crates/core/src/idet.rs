//! Iterative difference-enhanced transformers: token conversion, efficient
//! multi-head self-attention, the plain and difference-guided transformers,
//! and the iterative refinement that combines them.

use crate::autodiff::{PoolKind, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, Session};
use crate::params::ParamBuilder;
use crate::tensor::{Scalar, Tensor};

/// What the MLP branch of the difference transformer normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TauDiffMlpInput {
    /// Both branches read the guidance D~; the MLP output is added to the
    /// attention residual Z.
    #[default]
    Guidance,
    /// The MLP reads Z, as in a standard pre-norm block.
    Residual,
}

impl TauDiffMlpInput {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Guidance => "guidance",
            Self::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "guidance" => Ok(Self::Guidance),
            "residual" => Ok(Self::Residual),
            other => Err(Error::Config(format!("unknown tau_diff MLP input {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdetConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Applications of the difference transformer (T).
    pub iterations: usize,
    pub tau_diff_mlp_input: TauDiffMlpInput,
}

impl Default for IdetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            mlp_ratio: 2,
            iterations: 2,
            tau_diff_mlp_input: TauDiffMlpInput::Guidance,
        }
    }
}

impl IdetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!("degenerate IDET config {self:?}")));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// `[N, C, H, W]` map to `[N, H*W, C]` tokens in row-major spatial order.
pub fn tokenize<T: Scalar>(s: &mut Session<'_, T>, map: Var) -> Result<Var> {
    let (n, c, h, w) = s.graph.value(map).dims4("tokenize")?;
    let flat = s.graph.reshape(map, &[n, c, h * w])?;
    s.graph.permute(flat, &[0, 2, 1])
}

/// Inverse of [`tokenize`].
pub fn detokenize<T: Scalar>(s: &mut Session<'_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let shape = s.graph.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != h * w {
        return Err(Error::dim("detokenize", format!("{shape:?} cannot hold a {h}x{w} grid")));
    }
    let (n, c) = (shape[0], shape[2]);
    let t = s.graph.permute(tokens, &[0, 2, 1])?;
    s.graph.reshape(t, &[n, c, h, w])
}

/// Tensor-level tokenization of a single `[C, H, W]` map to `[H*W, C]`.
pub fn tokenize_tensor<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = map.shape() else {
        return Err(Error::dim("tokenize", format!("expected [C,H,W], got {:?}", map.shape())));
    };
    let d = map.data();
    Ok(Tensor::from_fn(&[h * w, c], |i| d[(i % c) * h * w + i / c]))
}

pub fn detokenize_tensor<T: Scalar>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let &[t, c] = tokens.shape() else {
        return Err(Error::dim("detokenize", format!("expected [T,C], got {:?}", tokens.shape())));
    };
    if t != h * w {
        return Err(Error::dim("detokenize", format!("{t} tokens cannot fill {h}x{w}")));
    }
    let d = tokens.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| d[(i % (h * w)) * c + i / (h * w)]))
}

/// Multi-head self-attention whose keys and values come from an
/// average-pooled copy of the token grid.
#[derive(Debug, Clone)]
pub struct EfficientMsa {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    pub heads: usize,
    pub sr_ratio: usize,
}

impl EfficientMsa {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if sr_ratio == 0 {
            return Err(Error::Config("sr_ratio must be >= 1".into()));
        }
        let mut sub = pb.sub(name);
        Ok(Self {
            q: Linear::new(&mut sub, "q", channels, channels)?,
            k: Linear::new(&mut sub, "k", channels, channels)?,
            v: Linear::new(&mut sub, "v", channels, channels)?,
            proj: Linear::new(&mut sub, "proj", channels, channels)?,
            heads,
            sr_ratio,
        })
    }

    /// Output projection; zeroing it turns the block into a zero map.
    pub fn output_projection(&self) -> &Linear {
        &self.proj
    }

    fn split_heads<T: Scalar>(&self, s: &mut Session<'_, T>, t: Var) -> Result<Var> {
        let shape = s.graph.shape(t).to_vec();
        let (n, len, c) = (shape[0], shape[1], shape[2]);
        let dh = c / self.heads;
        let r = s.graph.reshape(t, &[n, len, self.heads, dh])?;
        let p = s.graph.permute(r, &[0, 2, 1, 3])?;
        s.graph.reshape(p, &[n * self.heads, len, dh])
    }

    /// `tokens` is `[N, h*w, C]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var, (h, w): (usize, usize)) -> Result<Var> {
        let shape = s.graph.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::dim("efficient_msa", format!("{shape:?} is not a {h}x{w} token grid")));
        }
        let (n, len, c) = (shape[0], shape[1], shape[2]);
        if c % self.heads != 0 {
            return Err(Error::dim("efficient_msa", format!("{c} channels vs {} heads", self.heads)));
        }
        let kv_src = if self.sr_ratio > 1 {
            if h % self.sr_ratio != 0 || w % self.sr_ratio != 0 {
                return Err(Error::Config(format!(
                    "token grid {h}x{w} is not divisible by sr_ratio {}",
                    self.sr_ratio
                )));
            }
            let map = detokenize(s, tokens, h, w)?;
            let pooled = s.graph.pool2d(PoolKind::Avg, map, self.sr_ratio, self.sr_ratio)?;
            tokenize(s, pooled)?
        } else {
            tokens
        };
        let q = self.q.forward(s, tokens)?;
        let k = self.k.forward(s, kv_src)?;
        let v = self.v.forward(s, kv_src)?;
        let (q, k, v) = (self.split_heads(s, q)?, self.split_heads(s, k)?, self.split_heads(s, v)?);
        let dh = c / self.heads;
        let scores = s.graph.bmm(q, k, false, true)?;
        let scores = s.graph.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = s.graph.softmax_lastdim(scores)?;
        let out = s.graph.bmm(attn, v, false, false)?;
        let out = s.graph.reshape(out, &[n, self.heads, len, dh])?;
        let out = s.graph.permute(out, &[0, 2, 1, 3])?;
        let out = s.graph.reshape(out, &[n, len, c])?;
        self.proj.forward(s, out)
    }
}

/// Pre-norm transformer: Z = MSA(Norm R) + R, out = MLP(Norm Z) + Z.
#[derive(Debug, Clone)]
pub struct PlainTransformer {
    norm1: LayerNorm,
    msa: EfficientMsa,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl PlainTransformer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &IdetConfig, sr_ratio: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut sub, "norm1", cfg.channels)?,
            msa: EfficientMsa::new(&mut sub, "msa", cfg.channels, cfg.heads, sr_ratio)?,
            norm2: LayerNorm::new(&mut sub, "norm2", cfg.channels)?,
            mlp: Mlp::new(&mut sub, "mlp", cfg.channels, cfg.mlp_ratio)?,
        })
    }

    pub fn msa(&self) -> &EfficientMsa {
        &self.msa
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, r: Var, size: (usize, usize)) -> Result<Var> {
        let a = self.norm1.forward(s, r)?;
        let a = self.msa.forward(s, a, size)?;
        let z = s.graph.add(a, r)?;
        let b = self.norm2.forward(s, z)?;
        let b = self.mlp.forward(s, b)?;
        s.graph.add(b, z)
    }
}

/// D~ = MLP(Norm |t_ref - t_que|)
#[derive(Debug, Clone)]
pub struct DiffGuidance {
    norm: LayerNorm,
    mlp: Mlp,
}

impl DiffGuidance {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &IdetConfig) -> Result<Self> {
        let mut sub = pb.sub("guidance");
        Ok(Self {
            norm: LayerNorm::new(&mut sub, "norm", cfg.channels)?,
            mlp: Mlp::new(&mut sub, "mlp", cfg.channels, cfg.mlp_ratio)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, t_ref: Var, t_que: Var) -> Result<Var> {
        let d = s.graph.sub(t_ref, t_que)?;
        let d = s.graph.abs(d);
        let d = self.norm.forward(s, d)?;
        self.mlp.forward(s, d)
    }
}

/// Difference transformer: Z = MSA(Norm D~) + D, then an MLP residual whose
/// input depends on [`TauDiffMlpInput`].
#[derive(Debug, Clone)]
pub struct DiffTransformer {
    norm1: LayerNorm,
    msa: EfficientMsa,
    norm2: LayerNorm,
    mlp: Mlp,
    mode: TauDiffMlpInput,
}

/// Branch outputs that depend only on the guidance and can be reused across
/// iterations.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceTerms {
    msa: Var,
    mlp: Option<Var>,
}

impl DiffTransformer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &IdetConfig, sr_ratio: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut sub, "norm1", cfg.channels)?,
            msa: EfficientMsa::new(&mut sub, "msa", cfg.channels, cfg.heads, sr_ratio)?,
            norm2: LayerNorm::new(&mut sub, "norm2", cfg.channels)?,
            mlp: Mlp::new(&mut sub, "mlp", cfg.channels, cfg.mlp_ratio)?,
            mode: cfg.tau_diff_mlp_input,
        })
    }

    pub fn msa(&self) -> &EfficientMsa {
        &self.msa
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn guidance_terms<T: Scalar>(&self, s: &mut Session<'_, T>, guide: Var, size: (usize, usize)) -> Result<GuidanceTerms> {
        let a = self.norm1.forward(s, guide)?;
        let msa = self.msa.forward(s, a, size)?;
        let mlp = match self.mode {
            TauDiffMlpInput::Guidance => {
                let b = self.norm2.forward(s, guide)?;
                Some(self.mlp.forward(s, b)?)
            }
            TauDiffMlpInput::Residual => None,
        };
        Ok(GuidanceTerms { msa, mlp })
    }

    pub fn apply<T: Scalar>(&self, s: &mut Session<'_, T>, d: Var, terms: &GuidanceTerms) -> Result<Var> {
        let z = s.graph.add(terms.msa, d)?;
        let m = match terms.mlp {
            Some(m) => m,
            None => {
                let b = self.norm2.forward(s, z)?;
                self.mlp.forward(s, b)?
            }
        };
        s.graph.add(m, z)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, d: Var, guide: Var, size: (usize, usize)) -> Result<Var> {
        let terms = self.guidance_terms(s, guide, size)?;
        self.apply(s, d, &terms)
    }
}

/// One IDET module for a single scale.
#[derive(Debug, Clone)]
pub struct Idet {
    pub config: IdetConfig,
    pub tau_ref: PlainTransformer,
    pub tau_que: PlainTransformer,
    pub guidance: DiffGuidance,
    pub tau_diff: DiffTransformer,
}

impl Idet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &IdetConfig, sr_ratio: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            tau_ref: PlainTransformer::new(pb, "tau_ref", cfg, sr_ratio)?,
            tau_que: PlainTransformer::new(pb, "tau_que", cfg, sr_ratio)?,
            guidance: DiffGuidance::new(pb, cfg)?,
            tau_diff: DiffTransformer::new(pb, "tau_diff", cfg, sr_ratio)?,
        })
    }

    /// Enhancement guidance D~ from reference and query tokens.
    pub fn guidance<T: Scalar>(&self, s: &mut Session<'_, T>, r_ref: Var, r_que: Var, size: (usize, usize)) -> Result<Var> {
        let t_ref = self.tau_ref.forward(s, r_ref, size)?;
        let t_que = self.tau_que.forward(s, r_que, size)?;
        self.guidance.forward(s, t_ref, t_que)
    }

    /// Computes D~ once, then applies the difference transformer
    /// `iterations` times to the difference tokens.
    pub fn refine<T: Scalar>(&self, s: &mut Session<'_, T>, r_ref: Var, r_que: Var, d: Var, size: (usize, usize)) -> Result<Var> {
        if self.config.iterations == 0 {
            return Ok(d);
        }
        let guide = self.guidance(s, r_ref, r_que, size)?;
        let terms = self.tau_diff.guidance_terms(s, guide, size)?;
        let mut cur = d;
        for _ in 0..self.config.iterations {
            cur = self.tau_diff.apply(s, cur, &terms)?;
        }
        Ok(cur)
    }
}
