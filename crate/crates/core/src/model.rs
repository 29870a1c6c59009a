//! Architecture selection shared by training, evaluation and the sweeps.

use crate::autodiff::Var;
use crate::backbone::{pair_size, BasicCd};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::idet::TauDiffMlpInput;
use crate::msidet::{ChangeMaps, Encoded, MsIdet, MsIdetConfig, Variant};
use crate::nn::Session;
use crate::params::{ParamBuilder, ParamStore};
use crate::rng::RngSeed;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arch {
    /// Backbone, fused difference and the two-conv head.
    Basic,
    #[default]
    MsIdet,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Basic => "basic",
            Arch::MsIdet => "msidet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Arch::Basic),
            "msidet" => Ok(Arch::MsIdet),
            other => Err(Error::Config(format!("unknown arch {other:?} (basic|msidet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// The basic model reads only the backbone settings and the width.
    pub net: MsIdetConfig,
}

pub const MODEL_KEYS: &[&str] = &[
    "arch",
    "variant",
    "in_channels",
    "base_channels",
    "depth",
    "width",
    "heads",
    "mlp_ratio",
    "iterations",
    "tau_diff_mlp_input",
    "sr_ratios",
];

impl ModelConfig {
    /// Human-readable label: the arch for the basic model, else the variant.
    pub fn label(&self) -> &'static str {
        match self.arch {
            Arch::Basic => "basic",
            Arch::MsIdet => self.net.variant.as_str(),
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let n = &self.net;
        let mut kv = KeyValues::new();
        kv.set("arch", self.arch.as_str());
        kv.set("variant", n.variant.as_str());
        kv.set("in_channels", n.unet.in_channels);
        kv.set("base_channels", n.unet.base_channels);
        kv.set("depth", n.unet.depth);
        kv.set("width", n.idet.channels);
        kv.set("heads", n.idet.heads);
        kv.set("mlp_ratio", n.idet.mlp_ratio);
        kv.set("iterations", n.idet.iterations);
        kv.set("tau_diff_mlp_input", n.idet.tau_diff_mlp_input.as_str());
        kv.set(
            "sr_ratios",
            n.sr_ratios.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        kv
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn update(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(a) = kv.get("arch") {
            self.arch = Arch::parse(a)?;
        }
        if let Some(v) = kv.get("variant") {
            self.net.variant = Variant::parse(v)?;
        }
        kv.apply("in_channels", &mut self.net.unet.in_channels)?;
        kv.apply("base_channels", &mut self.net.unet.base_channels)?;
        kv.apply("depth", &mut self.net.unet.depth)?;
        kv.apply("width", &mut self.net.idet.channels)?;
        kv.apply("heads", &mut self.net.idet.heads)?;
        kv.apply("mlp_ratio", &mut self.net.idet.mlp_ratio)?;
        kv.apply("iterations", &mut self.net.idet.iterations)?;
        if let Some(v) = kv.get("tau_diff_mlp_input") {
            self.net.idet.tau_diff_mlp_input = TauDiffMlpInput::parse(v)?;
        }
        if let Some(v) = kv.list("sr_ratios")? {
            self.net.sr_ratios = v;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.update(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            Arch::MsIdet => self.net.validate(),
            Arch::Basic => self.net.unet.validate(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Basic(BasicCd),
    MsIdet(MsIdet),
}

impl Model {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.arch {
            Arch::Basic => Model::Basic(BasicCd::new(pb, &cfg.net.unet, cfg.net.width())?),
            Arch::MsIdet => Model::MsIdet(MsIdet::new(pb, &cfg.net)?),
        })
    }

    /// Builds the model and a freshly initialized parameter store.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: RngSeed) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut ParamBuilder::new(&mut store, seed), cfg)?;
        Ok((model, store))
    }

    /// Runs everything up to and including the fused difference D.
    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<Encoded> {
        match self {
            Model::Basic(m) => {
                let size = pair_size(s, x, y)?;
                Ok(Encoded {
                    d: m.encode(s, x, y)?,
                    decoder_x: Vec::new(),
                    decoder_y: Vec::new(),
                    size,
                })
            }
            Model::MsIdet(m) => m.encode(s, x, y),
        }
    }

    pub fn decode<T: Scalar>(&self, s: &mut Session<'_, T>, enc: &Encoded) -> Result<ChangeMaps> {
        match self {
            Model::Basic(m) => Ok(ChangeMaps {
                d: enc.d,
                enhanced: Vec::new(),
                fused: Vec::new(),
                aux: Vec::new(),
                logits: m.decode(s, enc.d, enc.size)?,
            }),
            Model::MsIdet(m) => m.decode(s, enc),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<ChangeMaps> {
        let enc = self.encode(s, x, y)?;
        self.decode(s, &enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn config_roundtrips_through_text() {
        let mut c = ModelConfig::default();
        c.net.variant = Variant::CnnEnhance;
        c.net.idet.iterations = 3;
        c.net.sr_ratios = vec![1, 1, 1, 2, 4];
        let text = c.to_kv().to_string();
        let back = ModelConfig::from_kv(&KeyValues::parse(&text, Path::new("x")).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
