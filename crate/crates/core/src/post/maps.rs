//! Binary masks and instance label maps.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn same_dims(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            bail!(Shape, "mask is {}x{}, expected {h}x{w}", self.height, self.width);
        }
        Ok(())
    }
}

/// Foreground where the probability is at least `t`.
pub fn threshold_prob(prob: &[f32], height: usize, width: usize, t: f64) -> Result<BinaryMask> {
    if prob.len() != height * width {
        bail!(Shape, "{} probabilities for a {height}x{width} map", prob.len());
    }
    Ok(BinaryMask { height, width, bits: prob.iter().map(|p| *p as f64 >= t).collect() })
}

/// Foreground channel (index 1) of a `(1,2,h,w)` probability tensor.
pub fn foreground_channel(probs: &Tensor<f32>) -> Result<Vec<f32>> {
    let d = probs.dims();
    if d.n != 1 || d.c != 2 {
        bail!(Shape, "expected (1,2,h,w) probabilities, got {d}");
    }
    Ok(probs.plane(0, 1).to_vec())
}

/// 0 is background; instances are `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl LabelMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, ids: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, bits: self.ids.iter().map(|v| *v != 0).collect() }
    }

    /// Pixel count per id, index 0 is background.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0usize; self.max_id() as usize + 1];
        for &v in &self.ids {
            a[v as usize] += 1;
        }
        a
    }

    /// Distinct non-zero ids in ascending order.
    pub fn id_set(&self) -> Vec<u32> {
        self.areas().iter().enumerate().skip(1).filter(|(_, a)| **a > 0).map(|(i, _)| i as u32).collect()
    }

    /// Ids are exactly `1..=K` with no gaps.
    pub fn is_contiguous(&self) -> bool {
        self.areas().iter().skip(1).all(|a| *a > 0)
    }

    /// Ids renumbered `1..=K` in row-major order of first occurrence.
    pub fn renumbered(&self) -> Self {
        let mut map = std::collections::HashMap::new();
        let ids = self
            .ids
            .iter()
            .map(|&v| {
                if v == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(v).or_insert(next)
                }
            })
            .collect();
        Self { ids, ..*self }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut ids = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            ids.extend_from_slice(&self.ids[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self { height: h, width: w, ids }
    }

    /// Pixels with a 4-neighbour of a different id (including the image
    /// border for instances touching it).
    pub fn contours(&self) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        BinaryMask::from_fn(h, w, |y, x| {
            let v = self.get(y, x);
            if v == 0 {
                return false;
            }
            let differs = |yy: isize, xx: isize| {
                yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || self.get(yy as usize, xx as usize) != v
            };
            let (y, x) = (y as isize, x as isize);
            differs(y - 1, x) || differs(y + 1, x) || differs(y, x - 1) || differs(y, x + 1)
        })
    }

    /// 16-bit grayscale PNG, gray value = id.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut data = Vec::with_capacity(self.ids.len());
        for &v in &self.ids {
            let Ok(v) = u16::try_from(v) else {
                bail!(Format, "instance id {v} does not fit a 16-bit PNG");
            };
            data.push(v);
        }
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, data).expect("buffer sized by map");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        if !matches!(img.color(), image::ColorType::L16 | image::ColorType::L8) {
            bail!(Format, "{} is not a grayscale label map ({:?})", path.display(), img.color());
        }
        let g = img.into_luma16();
        let (w, h) = g.dimensions();
        Ok(Self { height: h as usize, width: w as usize, ids: g.into_raw().into_iter().map(u32::from).collect() })
    }
}

pub(crate) const NEIGHBOURS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// In-bounds 8-neighbour flat indices of `i`.
pub(crate) fn neighbours8(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((i / w) as isize, (i % w) as isize);
    NEIGHBOURS_8.iter().filter_map(move |(dy, dx)| {
        let (yy, xx) = (y + dy, x + dx);
        (yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize).then(|| yy as usize * w + xx as usize)
    })
}
