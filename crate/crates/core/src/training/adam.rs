//! Adam with bias correction and no weight decay.

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment buffers for every trainable parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

pub const STATE_PREFIX: &str = "optim";

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = |(_, p): (ParamId, &crate::params::Parameter<T>)| {
            if p.trainable {
                vec![T::zero(); p.value.numel()]
            } else {
                Vec::new()
            }
        };
        Ok(Self {
            config,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient keep their values and state.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &Tensor<T>)]) -> Result<()> {
        let mut summed: Vec<Option<Vec<T>>> = vec![None; store.len()];
        for &(id, g) in grads {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("{}: gradient {:?} vs parameter {:?}", p.name, g.shape(), p.value.shape()),
                ));
            }
            match &mut summed[id.index()] {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g.data().to_vec()),
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2_sqrt);
        let eps = T::of(c.eps);
        for (i, g) in summed.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(ParamId(i)).value.data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                w[j] -= step_size * m[j] / (v[j].sqrt() * inv_bc2 + eps);
            }
        }
        Ok(())
    }

    pub fn step_gradients(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step(store, &grads.param_grads())
    }

    /// Moment buffers as named records `optim/m/<param>` and `optim/v/<param>`.
    pub fn state_records(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            for (kind, buf) in [("m", &self.m[id.index()]), ("v", &self.v[id.index()])] {
                let t = Tensor::new(p.value.shape(), buf.iter().map(|v| v.as_f64() as f32).collect())
                    .expect("moment buffer matches parameter shape");
                out.push((format!("{STATE_PREFIX}/{kind}/{}", p.name), t));
            }
        }
        out
    }

    /// Restores moments saved by [`Adam::state_records`] and the step count.
    pub fn load_state(&mut self, store: &ParamStore<T>, records: &[(String, Tensor<f32>)], step: u64) -> Result<()> {
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            for kind in ["m", "v"] {
                let key = format!("{STATE_PREFIX}/{kind}/{}", p.name);
                let (_, t) = records
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state {key:?}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::dim("adam_state", format!("{key}: {:?} vs {:?}", t.shape(), p.value.shape())));
                }
                let dst = if kind == "m" { &mut self.m[id.index()] } else { &mut self.v[id.index()] };
                *dst = t.data().iter().map(|&v| T::of(v as f64)).collect();
            }
        }
        self.step = step;
        Ok(())
    }
}
