//! Thin stateful wrappers that pair a kernel with its parameters and expose
//! them by name for the optimizer and checkpoints.

use crate::error::Result;
use crate::nn::{self, BatchNormParams, BnCache, ConvParams, ConvSpec, Mode, PreluParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable parameters are updated by the optimizer; buffers (running
/// statistics) are only checkpointed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

pub struct Named<'a, S> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: &'a Tensor<S>,
}

pub struct NamedMut<'a, S> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: &'a mut Tensor<S>,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<S> {
    pub spec: ConvSpec,
    pub params: ConvParams<S>,
}

impl<S: Scalar> Conv<S> {
    pub fn new(spec: ConvSpec, rng: &mut Rng) -> Self {
        Self { spec, params: ConvParams::glorot(&spec, rng) }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nn::conv2d_forward(x, &self.spec, &self.params)
    }

    pub fn backward(&mut self, g: &Tensor<S>, input: &Tensor<S>) -> Result<Tensor<S>> {
        nn::conv2d_backward(g, Some(input), &self.spec, &mut self.params)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a, S>>) {
        out.push(Named { name: join(prefix, "weight"), kind: TensorKind::Param, tensor: &self.params.weights });
        out.push(Named { name: join(prefix, "bias"), kind: TensorKind::Param, tensor: &self.params.bias });
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, S>>) {
        out.push(NamedMut { name: join(prefix, "weight"), kind: TensorKind::Param, tensor: &mut self.params.weights });
        out.push(NamedMut { name: join(prefix, "bias"), kind: TensorKind::Param, tensor: &mut self.params.bias });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<S> {
    pub params: BatchNormParams<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        Self { params: BatchNormParams::new(channels) }
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, BnCache<S>)> {
        nn::batchnorm_forward(x, &self.params, mode)
    }

    pub fn backward(&mut self, g: &Tensor<S>, cache: &BnCache<S>) -> Result<Tensor<S>> {
        nn::batchnorm_backward(g, cache, &mut self.params)
    }

    pub fn update(&mut self, cache: &BnCache<S>) {
        nn::batchnorm_update_running(&mut self.params, cache);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a, S>>) {
        let p = &self.params;
        out.push(Named { name: join(prefix, "gamma"), kind: TensorKind::Param, tensor: &p.gamma });
        out.push(Named { name: join(prefix, "beta"), kind: TensorKind::Param, tensor: &p.beta });
        out.push(Named { name: join(prefix, "running_mean"), kind: TensorKind::Buffer, tensor: &p.running_mean });
        out.push(Named { name: join(prefix, "running_var"), kind: TensorKind::Buffer, tensor: &p.running_var });
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, S>>) {
        let p = &mut self.params;
        out.push(NamedMut { name: join(prefix, "gamma"), kind: TensorKind::Param, tensor: &mut p.gamma });
        out.push(NamedMut { name: join(prefix, "beta"), kind: TensorKind::Param, tensor: &mut p.beta });
        out.push(NamedMut { name: join(prefix, "running_mean"), kind: TensorKind::Buffer, tensor: &mut p.running_mean });
        out.push(NamedMut { name: join(prefix, "running_var"), kind: TensorKind::Buffer, tensor: &mut p.running_var });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prelu<S> {
    pub params: PreluParams<S>,
}

impl<S: Scalar> Prelu<S> {
    pub fn new(channels: usize) -> Self {
        Self { params: PreluParams::new(channels) }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nn::prelu_forward(x, &self.params)
    }

    pub fn backward(&mut self, g: &Tensor<S>, input: &Tensor<S>) -> Result<Tensor<S>> {
        nn::prelu_backward(g, input, &mut self.params)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a, S>>) {
        out.push(Named { name: join(prefix, "slope"), kind: TensorKind::Param, tensor: &self.params.slope });
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, S>>) {
        out.push(NamedMut { name: join(prefix, "slope"), kind: TensorKind::Param, tensor: &mut self.params.slope });
    }
}

/// `conv -> batchnorm -> (optional) prelu`, the unit every block is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<S> {
    pub conv: Conv<S>,
    /// Second convolution of an asymmetric 5x1 / 1x5 pair.
    pub conv_b: Option<Conv<S>>,
    pub bn: BatchNorm<S>,
    pub act: Option<Prelu<S>>,
}

#[derive(Clone, Debug)]
pub struct ConvUnitCache<S> {
    input: Option<Tensor<S>>,
    mid: Option<Tensor<S>>,
    bn: BnCache<S>,
    pre_act: Option<Tensor<S>>,
}

impl<S: Scalar> ConvUnit<S> {
    pub fn new(spec: ConvSpec, activation: bool, rng: &mut Rng) -> Self {
        let out_c = spec.out_c;
        Self { conv: Conv::new(spec, rng), conv_b: None, bn: BatchNorm::new(out_c), act: activation.then(|| Prelu::new(out_c)) }
    }

    pub fn asymmetric(channels: usize, rng: &mut Rng) -> Self {
        let a = ConvSpec::new(channels, channels, 5, 1);
        let b = ConvSpec::new(channels, channels, 1, 5);
        Self {
            conv: Conv::new(a, rng),
            conv_b: Some(Conv::new(b, rng)),
            bn: BatchNorm::new(channels),
            act: Some(Prelu::new(channels)),
        }
    }

    pub fn specs(&self) -> Vec<ConvSpec> {
        std::iter::once(self.conv.spec).chain(self.conv_b.as_ref().map(|c| c.spec)).collect()
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode, keep: bool) -> Result<(Tensor<S>, ConvUnitCache<S>)> {
        let mut y = self.conv.forward(x)?;
        let mut mid = None;
        if let Some(cb) = &self.conv_b {
            let z = cb.forward(&y)?;
            mid = Some(std::mem::replace(&mut y, z));
        }
        let (b, bn) = self.bn.forward(&y, mode)?;
        let (out, pre_act) = match &self.act {
            Some(a) => (a.forward(&b)?, Some(b)),
            None => (b, None),
        };
        let cache = ConvUnitCache {
            input: keep.then(|| x.clone()),
            mid: if keep { mid } else { None },
            bn,
            pre_act: if keep { pre_act } else { None },
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, g: &Tensor<S>, cache: &ConvUnitCache<S>) -> Result<Tensor<S>> {
        let mut g = match (&mut self.act, &cache.pre_act) {
            (Some(a), Some(pre)) => a.backward(g, pre)?,
            (None, _) => g.clone(),
            (Some(_), None) => crate::error::bail!(State, "activation cache missing"),
        };
        g = self.bn.backward(&g, &cache.bn)?;
        let input = cache.input.as_ref();
        if let Some(cb) = &mut self.conv_b {
            let mid = cache.mid.as_ref();
            g = nn::conv2d_backward(&g, mid, &cb.spec, &mut cb.params)?;
        }
        nn::conv2d_backward(&g, input, &self.conv.spec, &mut self.conv.params)
    }

    pub fn update_stats(&mut self, cache: &ConvUnitCache<S>) {
        self.bn.update(&cache.bn);
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a, S>>) {
        self.conv.collect(&join(prefix, "conv"), out);
        if let Some(cb) = &self.conv_b {
            cb.collect(&join(prefix, "conv_b"), out);
        }
        self.bn.collect(&join(prefix, "bn"), out);
        if let Some(a) = &self.act {
            a.collect(&join(prefix, "prelu"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, S>>) {
        self.conv.collect_mut(&join(prefix, "conv"), out);
        if let Some(cb) = &mut self.conv_b {
            cb.collect_mut(&join(prefix, "conv_b"), out);
        }
        self.bn.collect_mut(&join(prefix, "bn"), out);
        if let Some(a) = &mut self.act {
            a.collect_mut(&join(prefix, "prelu"), out);
        }
    }
}

/// Dropout applied with a per-pass random stream.
pub(crate) fn dropout<S: Scalar>(
    x: Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Option<nn::DropoutMask<S>>)> {
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x, None));
    }
    nn::spatial_dropout(&x, rate, rng, mode)
}
