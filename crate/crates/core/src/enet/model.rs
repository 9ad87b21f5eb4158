//! The 17-layer encoder/decoder: initial block, ten encoder bottlenecks,
//! five decoder bottlenecks and a 1x1 classifier.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Result};
use crate::nn::{ConvSpec, Mode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

use super::blocks::{BlockCache, Bottleneck, BottleneckSpec, Head, HeadCache, InitialBlock, InitialCache, Variant};
use super::layers::{Named, NamedMut, TensorKind};

/// Total spatial reduction at the bottom of the encoder.
pub const SPATIAL_FACTOR: usize = 8;
pub const LAYER_COUNT: usize = 17;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Region,
    Boundary,
    Fusion,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Region, Role::Boundary, Role::Fusion];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Region => "region",
            Role::Boundary => "boundary",
            Role::Fusion => "fusion",
        }
    }

    /// Input channels used by the pipeline: hematoxylin for the first two
    /// nets, the two probability maps for fusion.
    pub fn input_channels(&self) -> usize {
        match self {
            Role::Fusion => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region" => Ok(Role::Region),
            "boundary" => Ok(Role::Boundary),
            "fusion" => Ok(Role::Fusion),
            other => bail!(Config, "unknown role {other:?}"),
        }
    }
}

/// Channel widths derived from a multiplier of the base (16, 32, 64).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    pub initial: usize,
    pub stage1: usize,
    pub stage2: usize,
}

impl Widths {
    pub fn scaled(multiplier: f64) -> Self {
        let s = |base: f64| ((base * multiplier).ceil() as usize).max(2);
        Self { initial: s(16.0), stage1: s(32.0), stage2: s(64.0) }
    }
}

fn internal(out_c: usize) -> usize {
    out_c.div_ceil(4)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enet<S> {
    pub role: Role,
    pub width: f64,
    pub input_c: usize,
    pub initial: InitialBlock<S>,
    pub encoder: Vec<Bottleneck<S>>,
    pub decoder: Vec<Bottleneck<S>>,
    pub head: Head<S>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct EnetCache<S> {
    initial: InitialCache<S>,
    encoder: Vec<BlockCache<S>>,
    decoder: Vec<BlockCache<S>>,
    head: HeadCache<S>,
}

/// Where an upsampling decoder block takes its pool indices from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PoolSource {
    Encoder(usize),
    /// The initial block's max-pool, tiled over the decoder's channels.
    Initial,
}

/// Decoder position -> index source, deepest first.
const UNPOOL: [(usize, PoolSource); 3] = [(0, PoolSource::Encoder(5)), (2, PoolSource::Encoder(0)), (4, PoolSource::Initial)];

fn encoder_layout(w: Widths) -> Vec<(Variant, usize, usize)> {
    let (i, a, b) = (w.initial, w.stage1, w.stage2);
    vec![
        (Variant::Downsample, i, a),
        (Variant::Regular, a, a),
        (Variant::Dilated(2), a, a),
        (Variant::Asymmetric5, a, a),
        (Variant::Dilated(4), a, a),
        (Variant::Downsample, a, b),
        (Variant::Regular, b, b),
        (Variant::Dilated(8), b, b),
        (Variant::Asymmetric5, b, b),
        (Variant::Dilated(16), b, b),
    ]
}

fn decoder_layout(w: Widths) -> Vec<(Variant, usize, usize)> {
    let (i, a, b) = (w.initial, w.stage1, w.stage2);
    vec![
        (Variant::Upsample, b, a),
        (Variant::Regular, a, a),
        (Variant::Upsample, a, i),
        (Variant::Regular, i, i),
        (Variant::Upsample, i, i),
    ]
}

/// Build a model with the canonical layout. Encoder dropout is
/// [`DEFAULT_DROPOUT`]; the decoder has none.
pub fn build_enet<S: Scalar>(role: Role, width: f64, input_c: usize, rng: &mut Rng) -> Result<Enet<S>> {
    build_enet_with_dropout(role, width, input_c, DEFAULT_DROPOUT, rng)
}

pub fn build_enet_with_dropout<S: Scalar>(
    role: Role,
    width: f64,
    input_c: usize,
    dropout: f64,
    rng: &mut Rng,
) -> Result<Enet<S>> {
    if !(width.is_finite() && width > 0.0) {
        bail!(Parameter, "width multiplier must be positive, got {width}");
    }
    if !(1..=3).contains(&input_c) {
        bail!(Parameter, "input channels must be 1, 2 or 3, got {input_c}");
    }
    crate::nn::check_rate(dropout)?;
    let mut w = Widths::scaled(width);
    w.initial = w.initial.max(input_c + 1);
    let initial = InitialBlock::new(input_c, w.initial, rng)?;
    let mut make = |layout: Vec<(Variant, usize, usize)>, rate: f64| -> Result<Vec<Bottleneck<S>>> {
        layout
            .into_iter()
            .map(|(variant, in_c, out_c)| {
                let spec = BottleneckSpec { variant, in_c, out_c, internal_c: internal(out_c), dropout_rate: rate };
                Bottleneck::new(spec, rng)
            })
            .collect()
    };
    let encoder = make(encoder_layout(w), dropout)?;
    let decoder = make(decoder_layout(w), 0.0)?;
    let head = Head::new(w.initial, rng);
    Ok(Enet { role, width, input_c, initial, encoder, decoder, head })
}

/// Rows and columns of reflection padding needed to reach a multiple of
/// [`SPATIAL_FACTOR`].
pub fn required_padding(h: usize, w: usize) -> (usize, usize) {
    let up = |v: usize| v.div_ceil(SPATIAL_FACTOR) * SPATIAL_FACTOR - v;
    (up(h), up(w))
}

impl<S: Scalar> Enet<S> {
    pub fn layer_count(&self) -> usize {
        1 + self.encoder.len() + self.decoder.len() + 1
    }

    pub fn check_input(&self, d: Dims) -> Result<()> {
        if d.c != self.input_c {
            bail!(Shape, "{} net expects {} input channels, got {}", self.role, self.input_c, d.c);
        }
        let (ph, pw) = required_padding(d.h, d.w);
        if ph != 0 || pw != 0 {
            bail!(
                Shape,
                "spatial dims {}x{} must be divisible by {SPATIAL_FACTOR}; reflection-pad by {ph} rows and {pw} columns",
                d.h,
                d.w
            );
        }
        Ok(())
    }

    /// Class probabilities `(n, 2, h, w)` plus the cache for [`Enet::backward`].
    pub fn forward(&self, x: &Tensor<S>, mode: Mode, rng: &mut Rng) -> Result<(Tensor<S>, EnetCache<S>)> {
        let (logits, cache) = self.run(x, mode, rng, true)?;
        Ok((logits.channel_softmax()?, cache))
    }

    /// Inference-mode probabilities; no cache is retained and no randomness
    /// is consumed.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut rng = Rng::new(0);
        self.run(x, Mode::Infer, &mut rng, false)?.0.channel_softmax()
    }

    /// Output of the deepest encoder block, inference mode.
    pub fn encode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x.dims())?;
        let mut rng = Rng::new(0);
        let (mut h, _) = self.initial.forward(x, Mode::Infer, false)?;
        for b in &self.encoder {
            h = b.forward(&h, None, Mode::Infer, &mut rng, false)?.0;
        }
        Ok(h)
    }

    fn run(&self, x: &Tensor<S>, mode: Mode, rng: &mut Rng, keep: bool) -> Result<(Tensor<S>, EnetCache<S>)> {
        self.check_input(x.dims())?;
        let (mut h, initial) = self.initial.forward(x, mode, keep)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            let (y, c) = b.forward(&h, None, mode, rng, keep)?;
            encoder.push(c);
            h = y;
        }
        let mut decoder: Vec<BlockCache<S>> = Vec::with_capacity(self.decoder.len());
        for (k, b) in self.decoder.iter().enumerate() {
            let tiled;
            let idx = match UNPOOL.iter().find(|(dec, _)| *dec == k).map(|p| p.1) {
                Some(PoolSource::Encoder(e)) => Some(encoder[e].pool.as_ref().expect("downsample blocks record indices")),
                Some(PoolSource::Initial) => {
                    tiled = initial.pool.tiled_channels(b.spec().out_c);
                    Some(&tiled)
                }
                None => None,
            };
            let (y, c) = b.forward(&h, idx, mode, rng, keep)?;
            decoder.push(c);
            h = y;
        }
        let (logits, head) = self.head.forward(&h, keep)?;
        logits.debug_assert_finite("enet logits");
        Ok((logits, EnetCache { initial, encoder, decoder, head }))
    }

    /// Accumulate parameter gradients given `dL/dlogits`; returns `dL/dx`.
    pub fn backward(&mut self, cache: &EnetCache<S>, grad_logits: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = self.head.backward(grad_logits, &cache.head)?;
        for (b, c) in self.decoder.iter_mut().zip(&cache.decoder).rev() {
            g = b.backward(&g, c)?;
        }
        for (b, c) in self.encoder.iter_mut().zip(&cache.encoder).rev() {
            g = b.backward(&g, c)?;
        }
        self.initial.backward(&g, &cache.initial)
    }

    /// Fold the batch statistics of a training forward pass into every
    /// batchnorm layer's running statistics.
    pub fn update_running_stats(&mut self, cache: &EnetCache<S>) {
        self.initial.update_stats(&cache.initial);
        for (b, c) in self.encoder.iter_mut().zip(&cache.encoder) {
            b.update_stats(c);
        }
        for (b, c) in self.decoder.iter_mut().zip(&cache.decoder) {
            b.update_stats(c);
        }
    }

    pub fn named(&self) -> Vec<Named<'_, S>> {
        let mut out = Vec::new();
        self.initial.collect("initial", &mut out);
        for (i, b) in self.encoder.iter().enumerate() {
            b.collect(&format!("enc{i:02}"), &mut out);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.collect(&format!("dec{i:02}"), &mut out);
        }
        self.head.conv.collect("head.conv", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<NamedMut<'_, S>> {
        let mut out = Vec::new();
        self.initial.collect_mut("initial", &mut out);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.collect_mut(&format!("enc{i:02}"), &mut out);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.collect_mut(&format!("dec{i:02}"), &mut out);
        }
        self.head.conv.collect_mut("head.conv", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().filter(|n| n.kind == TensorKind::Param).map(|n| n.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for n in self.named_mut() {
            n.tensor.zero_grad();
        }
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut v = self.initial.conv_specs();
        for b in self.encoder.iter().chain(&self.decoder) {
            v.extend(b.conv_specs());
        }
        v.push(self.head.conv.spec);
        v
    }

    /// One line per layer with the output shape for an `h x w` input.
    pub fn describe(&self, h: usize, w: usize) -> String {
        let mut d = Dims { n: 1, c: self.input_c, h, w };
        let mut out = format!(
            "enet role={} width={} input_c={} layers={} params={}\n",
            self.role,
            self.width,
            self.input_c,
            self.layer_count(),
            self.param_count()
        );
        d = Dims { c: self.initial.out_c, h: d.h.div_ceil(2), w: d.w.div_ceil(2), ..d };
        out += &format!("{:>2} initial      {:>3} -> {:>3}  out {d}\n", 1, self.input_c, self.initial.out_c);
        for (i, b) in self.encoder.iter().chain(&self.decoder).enumerate() {
            let s = b.spec();
            d = b.output_dims(d);
            out += &format!(
                "{:>2} {:<12} {:>3} -> {:>3}  out {d}  internal {}  dropout {}\n",
                i + 2,
                s.variant.label(),
                s.in_c,
                s.out_c,
                s.internal_c,
                s.dropout_rate
            );
        }
        d = Dims { c: 2, h, w, ..d };
        out += &format!("{:>2} final 1x1    {:>3} -> {:>3}  out {d}\n", LAYER_COUNT, self.initial.out_c, 2);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(role: Role, input_c: usize) -> Enet<f64> {
        build_enet(role, 0.25, input_c, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn seventeen_layers_and_shapes() {
        let m = small(Role::Region, 1);
        assert_eq!(m.layer_count(), LAYER_COUNT);
        let x = Tensor::uniform(Dims::new(1, 1, 96, 128).unwrap(), 0.0, 1.0, &mut Rng::new(1));
        let p = m.infer(&x).unwrap();
        assert_eq!(p.dims(), Dims::new(1, 2, 96, 128).unwrap());
        for i in 0..96 * 128 {
            let s = p.data()[i] + p.data()[96 * 128 + i];
            assert!((s - 1.0).abs() < 1e-6);
        }
        let desc = m.describe(96, 128);
        assert_eq!(desc.lines().count(), 1 + LAYER_COUNT);
        assert!(desc.lines().last().unwrap().contains("(1,2,96,128)"));
    }

    #[test]
    fn kernels_are_allowed() {
        let m = small(Role::Fusion, 2);
        for s in m.conv_specs() {
            assert!(crate::nn::ALLOWED_KERNELS.contains(&(s.kh, s.kw)), "{s:?}");
        }
    }

    #[test]
    fn width_scaling_of_parameters() {
        let full: Enet<f32> = build_enet(Role::Region, 1.0, 1, &mut Rng::new(1)).unwrap();
        let quarter: Enet<f32> = build_enet(Role::Region, 0.25, 1, &mut Rng::new(1)).unwrap();
        assert_eq!(full.layer_count(), quarter.layer_count());
        let ratio = full.param_count() as f64 / quarter.param_count() as f64;
        assert!((10.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn bad_arguments() {
        assert!(build_enet::<f32>(Role::Region, 0.0, 1, &mut Rng::new(1)).is_err());
        assert!(build_enet::<f32>(Role::Region, -1.0, 1, &mut Rng::new(1)).is_err());
        assert!(build_enet::<f32>(Role::Region, 1.0, 4, &mut Rng::new(1)).is_err());
        let m = small(Role::Region, 1);
        let err = m.infer(&Tensor::zeros(Dims::new(1, 1, 90, 128).unwrap())).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(ref s) if s.contains("6 rows")), "{err}");
        assert!(m.infer(&Tensor::zeros(Dims::new(1, 2, 96, 128).unwrap())).is_err());
    }

    #[test]
    fn unpool_pairs_connect_matching_resolutions() {
        let m = small(Role::Region, 1);
        let x = Tensor::uniform(Dims::new(2, 1, 16, 24).unwrap(), 0.0, 1.0, &mut Rng::new(5));
        let (_, cache) = m.forward(&x, Mode::Train, &mut Rng::new(6)).unwrap();
        for (dec, src) in UNPOOL {
            let used = cache.decoder[dec].pool.as_ref().unwrap();
            match src {
                PoolSource::Encoder(e) => assert_eq!(cache.encoder[e].pool.as_ref(), Some(used)),
                PoolSource::Initial => assert_eq!(&cache.initial.pool.tiled_channels(used.dims.c), used),
            }
            assert!(used.is_consistent());
        }
    }

    #[test]
    fn infer_is_deterministic() {
        let m: Enet<f32> = build_enet(Role::Boundary, 0.25, 1, &mut Rng::new(9)).unwrap();
        let x = Tensor::uniform(Dims::new(1, 1, 32, 32).unwrap(), 0.0, 1.0, &mut Rng::new(2));
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut m = small(Role::Region, 1);
        let before = m.initial.bn.params.running_mean.clone();
        let x = Tensor::uniform(Dims::new(2, 1, 16, 16).unwrap(), 1.0, 2.0, &mut Rng::new(5));
        let (_, cache) = m.forward(&x, Mode::Train, &mut Rng::new(6)).unwrap();
        m.update_running_stats(&cache);
        assert_ne!(before, m.initial.bn.params.running_mean);
    }

    #[test]
    fn receptive_field_of_deepest_encoder_output() {
        // delta response: which input columns along the centre row can move
        // the deepest encoder output at the centre
        let m = small(Role::Region, 1);
        let d = Dims::new(1, 1, 128, 192).unwrap();
        let base = Tensor::uniform(d, 0.0, 0.1, &mut Rng::new(11));
        let y0 = m.encode(&base).unwrap();
        let yd = y0.dims();
        let (cy, cx) = (yd.h / 2, yd.w / 2);
        let probe = |t: &Tensor<f64>| -> Vec<f64> { (0..yd.c).map(|c| t.get(0, c, cy, cx)).collect() };
        let p0 = probe(&y0);
        let reaches = |col: usize| -> bool {
            let mut x = base.clone();
            for dy in 0..2 {
                x.set(0, 0, 8 * cy + dy, col, 50.0);
            }
            probe(&m.encode(&x).unwrap()).iter().zip(&p0).any(|(a, b)| (a - b).abs() > 1e-12)
        };
        let centre = 8 * cx;
        let left = (0..centre).find(|&c| reaches(c)).unwrap_or(centre);
        let right = (centre..d.w).rev().find(|&c| reaches(c)).unwrap_or(centre);
        assert!(right - left + 1 >= 64, "extent {left}..={right}");
    }
}
