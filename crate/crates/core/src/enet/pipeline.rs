//! Region, boundary and fusion networks chained behind stain decomposition.

use image::RgbImage;

use crate::error::{bail, Result};
use crate::post::{segment_instances, LabelMap, PostConfig};
use crate::stain::{decompose, grayscale_input, StainConfig};
use crate::tensor::{Dims, Tensor};

use super::model::{required_padding, Enet, Role};

/// What the first-stage networks see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputChannel {
    /// Normalized hematoxylin concentration from colour deconvolution.
    #[default]
    Hematoxylin,
    /// Inverted luminance, no deconvolution.
    Grayscale,
}

impl InputChannel {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputChannel::Hematoxylin => "hematoxylin",
            InputChannel::Grayscale => "grayscale",
        }
    }
}

impl std::str::FromStr for InputChannel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hematoxylin" => Ok(InputChannel::Hematoxylin),
            "grayscale" => Ok(InputChannel::Grayscale),
            other => bail!(Config, "unknown input channel {other:?}"),
        }
    }
}

/// `(1,1,h,w)` first-stage network input for an RGB patch.
pub fn network_input(rgb: &RgbImage, channel: InputChannel, stain: &StainConfig) -> Result<Tensor<f32>> {
    Ok(match channel {
        InputChannel::Hematoxylin => decompose(rgb, stain)?.hematoxylin_input(stain),
        InputChannel::Grayscale => grayscale_input(rgb, stain),
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Pads the bottom and right edges by reflection.
pub fn reflect_pad<S: crate::Scalar>(x: &Tensor<S>, ph: usize, pw: usize) -> Tensor<S> {
    if ph == 0 && pw == 0 {
        return x.clone();
    }
    let d = x.dims();
    let od = d.with_hw(d.h + ph, d.w + pw);
    let mut out = Tensor::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..od.h {
                let sy = reflect(y, d.h);
                for xx in 0..od.w {
                    dst[y * od.w + xx] = src[sy * d.w + reflect(xx, d.w)];
                }
            }
        }
    }
    out
}

/// Top-left `h x w` window of every plane.
pub fn crop<S: crate::Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let d = x.dims();
    if d.h == h && d.w == w {
        return x.clone();
    }
    let od = d.with_hw(h, w);
    let mut out = Tensor::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * d.w..y * d.w + w]);
            }
        }
    }
    out
}

/// Inference on any spatial size: reflection-pad to the network's
/// granularity, run, crop back.
pub fn infer_any_size(net: &Enet<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let d = x.dims();
    let (ph, pw) = required_padding(d.h, d.w);
    let probs = net.infer(&reflect_pad(x, ph, pw))?;
    Ok(crop(&probs, d.h, d.w))
}

/// Foreground probability planes, `h * w` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedMaps {
    pub height: usize,
    pub width: usize,
    pub region: Vec<f32>,
    pub boundary: Vec<f32>,
    pub fused: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPipeline {
    pub region: Enet<f32>,
    pub boundary: Enet<f32>,
    pub fusion: Enet<f32>,
    pub stain: StainConfig,
    pub post: PostConfig,
    pub channel: InputChannel,
}

/// `(1,2,h,w)` fusion input from the two first-stage probability tensors.
pub fn fusion_input(region: &Tensor<f32>, boundary: &Tensor<f32>) -> Result<Tensor<f32>> {
    region.slice_channels(1..2)?.concat_channels(&boundary.slice_channels(1..2)?)
}

impl FusedPipeline {
    pub fn new(region: Enet<f32>, boundary: Enet<f32>, fusion: Enet<f32>, stain: StainConfig, post: PostConfig) -> Result<Self> {
        for (net, role) in [(&region, Role::Region), (&boundary, Role::Boundary), (&fusion, Role::Fusion)] {
            if net.role != role || net.input_c != role.input_channels() {
                bail!(Precondition, "{role} slot holds a {} net with {} input channels", net.role, net.input_c);
            }
        }
        Ok(Self { region, boundary, fusion, stain, post, channel: InputChannel::Hematoxylin })
    }

    pub fn fused_infer(&self, rgb: &RgbImage) -> Result<FusedMaps> {
        let x = network_input(rgb, self.channel, &self.stain)?;
        self.fused_infer_tensor(&x)
    }

    pub fn fused_infer_tensor(&self, x: &Tensor<f32>) -> Result<FusedMaps> {
        let d = x.dims();
        let r = infer_any_size(&self.region, x)?;
        let b = infer_any_size(&self.boundary, x)?;
        let f = infer_any_size(&self.fusion, &fusion_input(&r, &b)?)?;
        let fg = |t: &Tensor<f32>| t.plane(0, 1).to_vec();
        Ok(FusedMaps { height: d.h, width: d.w, region: fg(&r), boundary: fg(&b), fused: fg(&f) })
    }

    pub fn segment(&self, rgb: &RgbImage) -> Result<(FusedMaps, LabelMap)> {
        let maps = self.fused_infer(rgb)?;
        let labels = segment_instances(&maps.fused, maps.height, maps.width, &self.post)?;
        Ok((maps, labels))
    }
}

/// A probability plane as a `(1,1,h,w)` tensor.
pub fn plane_tensor(values: &[f32], h: usize, w: usize) -> Result<Tensor<f32>> {
    Tensor::from_vec(Dims { n: 1, c: 1, h, w }, values.to_vec())
}
