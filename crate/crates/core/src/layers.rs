//! Named parameter storage and the forward context shared by all modules.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, PaddingMode, RunningStats};
use crate::tensor::{Scalar, Tensor};

/// Learnable tensors keyed by dotted names such as `enc2.block0.ln.gamma`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Batch-norm running statistics keyed by layer prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferStore<T = f32> {
    stats: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> BufferStore<T> {
    pub fn new() -> Self {
        BufferStore { stats: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, stats: RunningStats<T>) {
        self.stats.insert(name.into(), stats);
    }

    pub fn get(&self, name: &str) -> Result<&RunningStats<T>> {
        self.stats
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RunningStats<T>> {
        self.stats.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RunningStats<T>)> {
        self.stats.iter()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn apply(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()> {
        for (name, batch) in updates {
            self.stats
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))?
                .update(batch);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BufferStore<U> {
        BufferStore {
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.cast(),
                            var: s.var.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass state: the tape, read-only parameters and the batch-norm
/// statistics collected in training mode.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub buffers: &'a BufferStore<T>,
    pub mode: Mode,
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, buffers: &'a BufferStore<T>, mode: Mode) -> Self {
        Ctx {
            tape,
            params,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        Ok(self.tape.param(name, t))
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: PaddingMode) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, b, stride, padding)
    }

    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, g, b)?;
                self.bn_updates.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let stats = self.buffers.get(prefix)?;
                self.tape.batch_norm_eval(x, g, b, stats)
            }
        }
    }

    /// `conv -> BN` with zero padding; the layers live at `{prefix}.conv` and
    /// `{prefix}.bn`.
    pub fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let y = self.conv(x, &format!("{prefix}.conv"), stride, PaddingMode::Zero)?;
        self.bn(y, &format!("{prefix}.bn"))
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm_channels(x, g, b)
    }
}

/// Parameter initialization helpers.
pub struct Init<'a, T: Scalar, R: Rng> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut BufferStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::of(dist.sample(self.rng)))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(name, value);
    }

    /// He-normal kernel and zero bias.
    pub fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = self.normal(&[c_out, c_in, k, k], std);
        self.params.insert(format!("{prefix}.w"), w);
        self.params.insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
    }

    pub fn bn(&mut self, prefix: &str, c: usize) {
        self.norm(prefix, c);
        self.buffers.insert(prefix, RunningStats::new(c));
    }

    pub fn conv_bn(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.conv(&format!("{prefix}.conv"), c_out, c_in, k);
        self.bn(&format!("{prefix}.bn"), c_out);
    }

    pub fn norm(&mut self, prefix: &str, c: usize) {
        self.params.insert(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()));
        self.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    }

    /// Weights `N(0, 1/d_in)`, zero bias.
    pub fn linear(&mut self, prefix: &str, d_out: usize, d_in: usize) {
        let w = self.normal(&[d_out, d_in], (1.0 / d_in as f64).sqrt());
        self.params.insert(format!("{prefix}.w"), w);
        self.params.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = self.normal(shape, std);
        self.params.insert(name, t);
    }
}
