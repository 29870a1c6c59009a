//! Parameterized layers and the forward-pass session that binds them.

use crate::autodiff::{BatchStats, Graph, NormStats, Var};
use crate::error::Result;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Running-statistics momentum for batch norm buffers.
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// One forward pass: a fresh graph plus read access to the parameters.
/// Each parameter is bound into the graph at most once.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    stat_updates: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.graph.param(self.store, id);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Batch statistics gathered by training-mode batch norms, keyed by the
    /// (running mean, running var) buffers they should update.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, ParamId, BatchStats<T>)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Folds observed batch statistics into running buffers.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[(ParamId, ParamId, BatchStats<T>)]) {
    let m = T::of(BN_MOMENTUM);
    for (mean_id, var_id, stats) in updates {
        for (slot, &obs) in store.get_mut(*mean_id).value.data_mut().iter_mut().zip(&stats.mean) {
            *slot = (T::one() - m) * *slot + m * obs;
        }
        for (slot, &obs) in store.get_mut(*var_id).value.data_mut().iter_mut().zip(&stats.var) {
            *slot = (T::one() - m) * *slot + m * obs;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        let fan_in = cin * kernel * kernel;
        Ok(Self {
            weight: sub.uniform("weight", &[cout, cin, kernel, kernel], fan_in)?,
            bias: sub.uniform("bias", &[cout], fan_in)?,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        s.graph.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn forward_relu<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        Ok(s.graph.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            weight: sub.uniform("weight", &[cin, cout], cin)?,
            bias: sub.uniform("bias", &[cout], cin)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        s.graph.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            gain: sub.constant("gain", &[channels], 1.0)?,
            shift: sub.constant("shift", &[channels], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.shift));
        s.graph.layer_norm(x, g, b, NORM_EPS)
    }
}

/// linear -> GELU -> linear
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            fc1: Linear::new(&mut sub, "fc1", channels, channels * ratio)?,
            fc2: Linear::new(&mut sub, "fc2", channels * ratio, channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            gain: sub.constant("gain", &[channels], 1.0)?,
            shift: sub.constant("shift", &[channels], 0.0)?,
            running_mean: sub.buffer("running_mean", &[channels], 0.0)?,
            running_var: sub.buffer("running_var", &[channels], 1.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.shift));
        let stats = if s.training {
            NormStats::Batch
        } else {
            NormStats::Running {
                mean: s.store.get(self.running_mean).value.data().to_vec(),
                var: s.store.get(self.running_var).value.data().to_vec(),
            }
        };
        let (y, observed) = s.graph.batch_norm(x, g, b, NORM_EPS, stats)?;
        if let Some(obs) = observed {
            s.stat_updates.push((self.running_mean, self.running_var, obs));
        }
        Ok(y)
    }
}
