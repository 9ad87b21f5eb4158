//! Exact squared Euclidean distance transform by separable lower envelopes
//! of parabolas.

use super::maps::BinaryMask;

/// Squared distance from each foreground pixel to the nearest background
/// pixel; background is 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u32>,
}

impl DistanceMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.values[y * self.width + x]
    }
}

/// Value given to every pixel of a mask with no background at all; larger
/// than any distance realizable inside the image.
pub fn no_background_value(height: usize, width: usize) -> u32 {
    (height * height + width * width) as u32
}

const INF: i64 = i64::MAX / 4;

/// One-dimensional transform `d(q) = min_p (q - p)^2 + f(p)` over the
/// finite entries of `f`.
fn envelope_1d(f: &[i64], out: &mut [i64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq >= INF {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                break;
            };
            let pf = p as f64;
            let s = ((fq as f64 + qf * qf) - (f[p] as f64 + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().expect("one boundary per site") {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = INF);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as i64 - p as i64;
        *o = d * d + f[p];
    }
}

pub fn distance_transform(mask: &BinaryMask) -> DistanceMap {
    let (h, w) = (mask.height, mask.width);
    if !mask.bits.iter().any(|b| !*b) {
        let s = no_background_value(h, w);
        return DistanceMap { height: h, width: w, values: vec![s; h * w] };
    }
    let mut grid: Vec<i64> = mask.bits.iter().map(|&fg| if fg { INF } else { 0 }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0i64; h];
    let mut out = vec![0i64; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        envelope_1d(&col, &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        envelope_1d(&row, &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    DistanceMap { height: h, width: w, values: grid.into_iter().map(|d| d as u32).collect() }
}

/// Quadratic-time reference: scan every background pixel for every
/// foreground pixel.
pub fn distance_transform_brute(mask: &BinaryMask) -> DistanceMap {
    let (h, w) = (mask.height, mask.width);
    let bg: Vec<(i64, i64)> = (0..h * w).filter(|&i| !mask.bits[i]).map(|i| ((i / w) as i64, (i % w) as i64)).collect();
    let values = (0..h * w)
        .map(|i| {
            if !mask.bits[i] {
                return 0;
            }
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            bg.iter()
                .map(|(by, bx)| ((y - by).pow(2) + (x - bx).pow(2)) as u32)
                .min()
                .unwrap_or_else(|| no_background_value(h, w))
        })
        .collect();
    DistanceMap { height: h, width: w, values }
}
