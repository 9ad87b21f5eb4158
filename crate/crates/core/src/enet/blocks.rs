//! Initial block, the three bottleneck shapes, and the output head.

use crate::error::{bail, Result};
use crate::nn::{self, BnCache, ConvSpec, DropoutMask, Mode, Padding, PoolIndices};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

use super::layers::{dropout, join, BatchNorm, Conv, ConvUnit, ConvUnitCache, Named, NamedMut, Prelu};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Regular,
    Downsample,
    Upsample,
    Dilated(usize),
    Asymmetric5,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Regular => "regular".into(),
            Variant::Downsample => "downsample".into(),
            Variant::Upsample => "upsample".into(),
            Variant::Dilated(r) => format!("dilated({r})"),
            Variant::Asymmetric5 => "asymmetric5".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BottleneckSpec {
    pub variant: Variant,
    pub in_c: usize,
    pub out_c: usize,
    pub internal_c: usize,
    pub dropout_rate: f64,
}

impl BottleneckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_c == 0 || self.out_c == 0 || self.internal_c == 0 {
            bail!(Parameter, "bottleneck channels must be positive: {self:?}");
        }
        match self.variant {
            Variant::Dilated(r) if ![2, 4, 8, 16].contains(&r) => bail!(Parameter, "dilation rate {r} not in {{2,4,8,16}}"),
            Variant::Regular | Variant::Dilated(_) | Variant::Asymmetric5 if self.in_c != self.out_c => {
                bail!(Parameter, "{} bottleneck must keep its width", self.variant.label())
            }
            Variant::Downsample if self.out_c < self.in_c => bail!(Parameter, "downsample cannot shrink channels"),
            _ => Ok(()),
        }
    }
}

/// `conv3x3/s2 (in -> out-in)` concatenated with `maxpool2x2 (in)`, then
/// batchnorm and PReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialBlock<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub conv: Conv<S>,
    pub bn: BatchNorm<S>,
    pub act: Prelu<S>,
}

#[derive(Clone, Debug)]
pub struct InitialCache<S> {
    x: Option<Tensor<S>>,
    /// Also consumed by the last decoder upsample.
    pub pool: PoolIndices,
    bn: BnCache<S>,
    pre_act: Option<Tensor<S>>,
}

impl<S: Scalar> InitialBlock<S> {
    pub fn new(in_c: usize, out_c: usize, rng: &mut Rng) -> Result<Self> {
        if out_c <= in_c {
            bail!(Parameter, "initial block needs more output ({out_c}) than input ({in_c}) channels");
        }
        let spec = ConvSpec::new(in_c, out_c - in_c, 3, 3).stride(2).padding(Padding::Explicit { h: 1, w: 1 });
        Ok(Self { in_c, out_c, conv: Conv::new(spec, rng), bn: BatchNorm::new(out_c), act: Prelu::new(out_c) })
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode, keep: bool) -> Result<(Tensor<S>, InitialCache<S>)> {
        let conv = self.conv.forward(x)?;
        let (pooled, pool) = nn::maxpool2x2_forward(x);
        let cat = conv.concat_channels(&pooled)?;
        let (b, bn) = self.bn.forward(&cat, mode)?;
        let y = self.act.forward(&b)?;
        Ok((y, InitialCache { x: keep.then(|| x.clone()), pool, bn, pre_act: keep.then_some(b) }))
    }

    pub fn backward(&mut self, g: &Tensor<S>, cache: &InitialCache<S>) -> Result<Tensor<S>> {
        let (Some(x), Some(pre)) = (cache.x.as_ref(), cache.pre_act.as_ref()) else {
            bail!(State, "initial block backward without cached forward pass");
        };
        let g = self.act.backward(g, pre)?;
        let g = self.bn.backward(&g, &cache.bn)?;
        let conv_c = self.out_c - self.in_c;
        let g_conv = g.slice_channels(0..conv_c)?;
        let g_pool = g.slice_channels(conv_c..self.out_c)?;
        let mut gx = self.conv.backward(&g_conv, x)?;
        gx.add_assign(&nn::maxpool2x2_backward(&g_pool, &cache.pool)?)?;
        Ok(gx)
    }

    pub fn update_stats(&mut self, cache: &InitialCache<S>) {
        self.bn.update(&cache.bn);
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        vec![self.conv.spec]
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a, S>>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.bn.collect(&join(prefix, "bn"), out);
        self.act.collect(&join(prefix, "prelu"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, S>>) {
        self.conv.collect_mut(&join(prefix, "conv"), out);
        self.bn.collect_mut(&join(prefix, "bn"), out);
        self.act.collect_mut(&join(prefix, "prelu"), out);
    }
}

/// Regular, dilated and asymmetric bottlenecks: identity shortcut in
/// parallel with `1x1 reduce -> middle conv -> 1x1 expand -> dropout`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainBlock<S> {
    pub spec: BottleneckSpec,
    pub reduce: ConvUnit<S>,
    pub middle: ConvUnit<S>,
    pub expand: ConvUnit<S>,
    pub out_act: Prelu<S>,
}

/// Downsampling bottleneck: 2x2 stride-2 convolution branch in parallel with
/// a max-pool shortcut (indices saved, channels zero-padded).
#[derive(Clone, Debug, PartialEq)]
pub struct DownBlock<S> {
    pub spec: BottleneckSpec,
    pub reduce: ConvUnit<S>,
    pub middle: ConvUnit<S>,
    pub expand: ConvUnit<S>,
    pub out_act: Prelu<S>,
}

/// Upsampling bottleneck: a 1x1 projection is unpooled with the indices of
/// the paired downsampling block; a 3x3 branch densifies the sparse map.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock<S> {
    pub spec: BottleneckSpec,
    pub project: ConvUnit<S>,
    pub middle: ConvUnit<S>,
    pub expand: ConvUnit<S>,
    pub out_act: Prelu<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Bottleneck<S> {
    Plain(PlainBlock<S>),
    Down(DownBlock<S>),
    Up(UpBlock<S>),
}

#[derive(Clone, Debug)]
pub struct BlockCache<S> {
    units: Vec<ConvUnitCache<S>>,
    mask: Option<DropoutMask<S>>,
    sum: Option<Tensor<S>>,
    /// Indices produced (downsample) or consumed (upsample) by this block.
    pub pool: Option<PoolIndices>,
    in_c: usize,
}

impl<S: Scalar> Bottleneck<S> {
    pub fn new(spec: BottleneckSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let BottleneckSpec { in_c, out_c, internal_c: k, .. } = spec;
        Ok(match spec.variant {
            Variant::Regular | Variant::Dilated(_) | Variant::Asymmetric5 => {
                let middle = match spec.variant {
                    Variant::Asymmetric5 => ConvUnit::asymmetric(k, rng),
                    Variant::Dilated(r) => ConvUnit::new(ConvSpec::new(k, k, 3, 3).dilation(r), true, rng),
                    _ => ConvUnit::new(ConvSpec::new(k, k, 3, 3), true, rng),
                };
                Bottleneck::Plain(PlainBlock {
                    spec,
                    reduce: ConvUnit::new(ConvSpec::new(in_c, k, 1, 1), true, rng),
                    middle,
                    expand: ConvUnit::new(ConvSpec::new(k, out_c, 1, 1), false, rng),
                    out_act: Prelu::new(out_c),
                })
            }
            Variant::Downsample => Bottleneck::Down(DownBlock {
                spec,
                reduce: ConvUnit::new(
                    ConvSpec::new(in_c, k, 2, 2).stride(2).padding(Padding::Explicit { h: 0, w: 0 }),
                    true,
                    rng,
                ),
                middle: ConvUnit::new(ConvSpec::new(k, k, 3, 3), true, rng),
                expand: ConvUnit::new(ConvSpec::new(k, out_c, 1, 1), false, rng),
                out_act: Prelu::new(out_c),
            }),
            Variant::Upsample => Bottleneck::Up(UpBlock {
                spec,
                project: ConvUnit::new(ConvSpec::new(in_c, out_c, 1, 1), false, rng),
                middle: ConvUnit::new(ConvSpec::new(out_c, k, 3, 3), true, rng),
                expand: ConvUnit::new(ConvSpec::new(k, out_c, 1, 1), false, rng),
                out_act: Prelu::new(out_c),
            }),
        })
    }

    pub fn spec(&self) -> &BottleneckSpec {
        match self {
            Bottleneck::Plain(b) => &b.spec,
            Bottleneck::Down(b) => &b.spec,
            Bottleneck::Up(b) => &b.spec,
        }
    }

    fn units(&self) -> [&ConvUnit<S>; 3] {
        match self {
            Bottleneck::Plain(b) => [&b.reduce, &b.middle, &b.expand],
            Bottleneck::Down(b) => [&b.reduce, &b.middle, &b.expand],
            Bottleneck::Up(b) => [&b.project, &b.middle, &b.expand],
        }
    }

    fn units_mut(&mut self) -> ([&mut ConvUnit<S>; 3], &mut Prelu<S>) {
        match self {
            Bottleneck::Plain(b) => ([&mut b.reduce, &mut b.middle, &mut b.expand], &mut b.out_act),
            Bottleneck::Down(b) => ([&mut b.reduce, &mut b.middle, &mut b.expand], &mut b.out_act),
            Bottleneck::Up(b) => ([&mut b.project, &mut b.middle, &mut b.expand], &mut b.out_act),
        }
    }

    fn out_act(&self) -> &Prelu<S> {
        match self {
            Bottleneck::Plain(b) => &b.out_act,
            Bottleneck::Down(b) => &b.out_act,
            Bottleneck::Up(b) => &b.out_act,
        }
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        self.units().iter().flat_map(|u| u.specs()).collect()
    }

    /// `unpool` must be supplied to (and only to) upsampling blocks.
    pub fn forward(
        &self,
        x: &Tensor<S>,
        unpool: Option<&PoolIndices>,
        mode: Mode,
        rng: &mut Rng,
        keep: bool,
    ) -> Result<(Tensor<S>, BlockCache<S>)> {
        let spec = *self.spec();
        let [u0, u1, u2] = self.units();
        let mut caches = Vec::with_capacity(3);
        let (shortcut, branch_in, pool) = match self {
            Bottleneck::Plain(_) => (x.clone(), None, None),
            Bottleneck::Down(_) => {
                let (pooled, idx) = nn::maxpool2x2_forward(x);
                let shortcut = if spec.out_c > spec.in_c {
                    pooled.concat_channels(&Tensor::zeros(pooled.dims().with_c(spec.out_c - spec.in_c)))?
                } else {
                    pooled
                };
                (shortcut, None, Some(idx))
            }
            Bottleneck::Up(_) => {
                let Some(idx) = unpool else {
                    bail!(State, "upsampling block needs pool indices");
                };
                let (p, c) = u0.forward(x, mode, keep)?;
                caches.push(c);
                let up = nn::maxunpool2x2(&p, idx, idx.input_dims)?;
                (up.clone(), Some(up), Some(idx.clone()))
            }
        };
        let mut h = match (&branch_in, self) {
            (Some(up), _) => up.clone(),
            (None, _) => {
                let (t, c) = u0.forward(x, mode, keep)?;
                caches.push(c);
                t
            }
        };
        for u in [u1, u2] {
            let (t, c) = u.forward(&h, mode, keep)?;
            caches.push(c);
            h = t;
        }
        let (h, mask) = dropout(h, spec.dropout_rate, mode, rng)?;
        let sum = shortcut.add(&h)?;
        let y = self.out_act().forward(&sum)?;
        Ok((y, BlockCache { units: caches, mask, sum: keep.then_some(sum), pool, in_c: spec.in_c }))
    }

    pub fn backward(&mut self, g: &Tensor<S>, cache: &BlockCache<S>) -> Result<Tensor<S>> {
        let Some(sum) = cache.sum.as_ref() else {
            bail!(State, "bottleneck backward without cached forward pass");
        };
        let is_up = matches!(self, Bottleneck::Up(_));
        let is_down = matches!(self, Bottleneck::Down(_));
        let ([u0, u1, u2], act) = self.units_mut();
        let g_sum = act.backward(g, sum)?;
        let g_branch = nn::spatial_dropout_backward(&g_sum, cache.mask.as_ref());
        let g = u2.backward(&g_branch, &cache.units[2])?;
        let g = u1.backward(&g, &cache.units[1])?;
        if is_up {
            let idx = cache.pool.as_ref().expect("upsample cache holds its indices");
            let mut g_up = g;
            g_up.add_assign(&g_sum)?;
            let g_proj = nn::maxunpool2x2_backward(&g_up, idx)?;
            return u0.backward(&g_proj, &cache.units[0]);
        }
        let mut gx = u0.backward(&g, &cache.units[0])?;
        if is_down {
            let idx = cache.pool.as_ref().expect("downsample cache holds its indices");
            let g_short = g_sum.slice_channels(0..cache.in_c)?;
            gx.add_assign(&nn::maxpool2x2_backward(&g_short, idx)?)?;
        } else {
            gx.add_assign(&g_sum)?;
        }
        Ok(gx)
    }

    pub fn update_stats(&mut self, cache: &BlockCache<S>) {
        let (units, _) = self.units_mut();
        for (u, c) in units.into_iter().zip(&cache.units) {
            u.update_stats(c);
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a, S>>) {
        let names = match self {
            Bottleneck::Up(_) => ["project", "middle", "expand"],
            _ => ["reduce", "middle", "expand"],
        };
        for (u, n) in self.units().into_iter().zip(names) {
            u.collect(&join(prefix, n), out);
        }
        self.out_act().collect(&join(prefix, "out"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, S>>) {
        let names = match self {
            Bottleneck::Up(_) => ["project", "middle", "expand"],
            _ => ["reduce", "middle", "expand"],
        };
        let (units, act) = self.units_mut();
        for (u, n) in units.into_iter().zip(names) {
            u.collect_mut(&join(prefix, n), out);
        }
        act.collect_mut(&join(prefix, "out"), out);
    }

    /// Output dims for an input of dims `d`.
    pub fn output_dims(&self, d: Dims) -> Dims {
        let s = self.spec();
        match s.variant {
            Variant::Downsample => Dims { c: s.out_c, h: d.h.div_ceil(2), w: d.w.div_ceil(2), ..d },
            Variant::Upsample => Dims { c: s.out_c, h: d.h * 2, w: d.w * 2, ..d },
            _ => d.with_c(s.out_c),
        }
    }
}

/// Final 1x1 convolution to two classes (softmax is applied by the model).
#[derive(Clone, Debug, PartialEq)]
pub struct Head<S> {
    pub conv: Conv<S>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<S> {
    x: Option<Tensor<S>>,
}

impl<S: Scalar> Head<S> {
    pub fn new(in_c: usize, rng: &mut Rng) -> Self {
        Self { conv: Conv::new(ConvSpec::new(in_c, 2, 1, 1), rng) }
    }

    pub fn forward(&self, x: &Tensor<S>, keep: bool) -> Result<(Tensor<S>, HeadCache<S>)> {
        Ok((self.conv.forward(x)?, HeadCache { x: keep.then(|| x.clone()) }))
    }

    pub fn backward(&mut self, g_logits: &Tensor<S>, cache: &HeadCache<S>) -> Result<Tensor<S>> {
        let Some(x) = cache.x.as_ref() else {
            bail!(State, "head backward without cached input");
        };
        self.conv.backward(g_logits, x)
    }
}
