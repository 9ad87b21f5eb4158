//! Beer-Lambert colour deconvolution of H&E images into hematoxylin and
//! eosin concentration maps, and the forward model that renders them.

use image::RgbImage;

use crate::error::{bail, Result};
use crate::tensor::{Dims, Tensor};

/// Standard H&E optical-density directions before normalization.
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

/// `|det(M^T M)|` below this is treated as collinear stains.
const DEGENERATE_DET: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct StainConfig {
    /// Unit-length OD directions: hematoxylin, eosin.
    pub stains: [[f64; 3]; 2],
    pub background: [f64; 3],
    /// Pixels whose total OD is below this decompose to zero.
    pub od_floor: f64,
    /// Lower bound on the per-image normalizer so near-empty patches are not
    /// stretched to full range.
    pub norm_floor: f64,
    /// Percentile used to normalize the hematoxylin channel.
    pub percentile: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self::new(HEMATOXYLIN, EOSIN).expect("default stains are independent")
    }
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        bail!(Config, "stain direction {v:?} has no length");
    }
    Ok(v.map(|x| x / n))
}

impl StainConfig {
    /// Normalizes both directions and rejects collinear pairs.
    pub fn new(h: [f64; 3], e: [f64; 3]) -> Result<Self> {
        let cfg = Self {
            stains: [normalize(h)?, normalize(e)?],
            background: [255.0; 3],
            od_floor: 0.0,
            norm_floor: 0.25,
            percentile: 0.99,
        };
        cfg.unmixing()?;
        Ok(cfg)
    }

    /// Rows of the pseudo-inverse `(M^T M)^-1 M^T`.
    pub fn unmixing(&self) -> Result<[[f64; 3]; 2]> {
        let [h, e] = self.stains;
        let dot = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (a, b, d) = (dot(&h, &h), dot(&h, &e), dot(&e, &e));
        let det = a * d - b * b;
        if !(det.abs() > DEGENERATE_DET) {
            bail!(Config, "stain directions are collinear (det {det:.3e})");
        }
        let row = |p: f64, q: f64| [0, 1, 2].map(|k| (p * h[k] + q * e[k]) / det);
        Ok([row(d, -b), row(-b, a)])
    }
}

/// `od_k = -ln(max(rgb_k, 1) / I0)`, clamped at zero.
pub fn rgb_to_od(rgb: [u8; 3], background: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| od_channel(rgb[k] as f64, background[k]))
}

fn od_channel(v: f64, i0: f64) -> f64 {
    (-(v.max(1.0) / i0).ln()).max(0.0)
}

/// Raw (un-normalized) non-negative stain concentrations.
#[derive(Clone, Debug, PartialEq)]
pub struct StainImage {
    pub height: usize,
    pub width: usize,
    pub hematoxylin: Vec<f64>,
    pub eosin: Vec<f64>,
}

impl StainImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, hematoxylin: vec![0.0; height * width], eosin: vec![0.0; height * width] }
    }

    /// Hematoxylin divided by its per-image percentile (never less than
    /// `norm_floor`) and clipped to `[0, 1]`, as a `(1,1,h,w)` tensor.
    pub fn hematoxylin_input(&self, cfg: &StainConfig) -> Tensor<f32> {
        normalized_input(&self.hematoxylin, self.height, self.width, cfg)
    }
}

fn normalized_input(values: &[f64], h: usize, w: usize, cfg: &StainConfig) -> Tensor<f32> {
    let scale = percentile(values, cfg.percentile).max(cfg.norm_floor);
    let data = values.iter().map(|v| (v / scale).clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec(Dims { n: 1, c: 1, h, w }, data).expect("sized by image")
}

/// Nearest-rank percentile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    let (_, kth, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    *kth
}

/// Least-squares concentrations of one pixel's OD, negatives clamped to zero.
pub fn unmix_od(od: [f64; 3], pinv: &[[f64; 3]; 2], od_floor: f64) -> [f64; 2] {
    if od.iter().sum::<f64>() < od_floor {
        return [0.0, 0.0];
    }
    pinv.map(|r| (r[0] * od[0] + r[1] * od[1] + r[2] * od[2]).max(0.0))
}

pub fn decompose(img: &RgbImage, cfg: &StainConfig) -> Result<StainImage> {
    let pinv = cfg.unmixing()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = StainImage::zeros(h, w);
    for (i, p) in img.pixels().enumerate() {
        let [ch, ce] = unmix_od(rgb_to_od(p.0, cfg.background), &pinv, cfg.od_floor);
        out.hematoxylin[i] = ch;
        out.eosin[i] = ce;
    }
    Ok(out)
}

/// `I0 * exp(-(M c))` per channel, before quantization.
pub fn compose_pixel(c: [f64; 2], cfg: &StainConfig) -> [f64; 3] {
    let [h, e] = cfg.stains;
    [0, 1, 2].map(|k| cfg.background[k] * (-(h[k] * c[0] + e[k] * c[1])).exp())
}

/// Forward model rounded to 8 bits.
pub fn compose(stains: &StainImage, cfg: &StainConfig) -> Result<RgbImage> {
    let n = stains.height * stains.width;
    if stains.hematoxylin.len() != n || stains.eosin.len() != n {
        bail!(Shape, "stain maps do not match {}x{}", stains.height, stains.width);
    }
    let mut img = RgbImage::new(stains.width as u32, stains.height as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        let c = [stains.hematoxylin[i].max(0.0), stains.eosin[i].max(0.0)];
        p.0 = compose_pixel(c, cfg).map(quantize);
    }
    Ok(img)
}

pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Concentrations recovered from an unquantized forward-model pixel.
pub fn unmix_continuous(rgb: [f64; 3], cfg: &StainConfig) -> Result<[f64; 2]> {
    let pinv = cfg.unmixing()?;
    let od = [0, 1, 2].map(|k| -(rgb[k] / cfg.background[k]).ln());
    Ok(unmix_od(od, &pinv, cfg.od_floor))
}

/// Baseline network input without colour deconvolution: inverted luminance
/// (dark nuclei high), per-image percentile normalized like hematoxylin.
pub fn grayscale_input(img: &RgbImage, cfg: &StainConfig) -> Tensor<f32> {
    let v: Vec<f64> = img
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0.map(|c| c as f64);
            1.0 - (0.299 * r + 0.587 * g + 0.114 * b) / 255.0
        })
        .collect();
    normalized_input(&v, img.height() as usize, img.width() as usize, cfg)
}
