//! Watershed seeds: h-maxima of the distance map.

use std::collections::VecDeque;

use super::distance::DistanceMap;
use super::maps::{neighbours8, BinaryMask, LabelMap};

/// Grayscale reconstruction by dilation of `marker` under `mask`
/// (`marker <= mask` pointwise), restricted to the pixels where `domain`
/// is set, with 8-connectivity.
pub fn reconstruct_by_dilation(marker: &[u32], mask: &[u32], domain: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut r = marker.to_vec();
    let mut queue = VecDeque::new();
    // raster and anti-raster passes, then a queue for what remains unstable
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !domain[i] {
                continue;
            }
            let mut m = r[i];
            for j in neighbours8(i, h, w).filter(|&j| j < i && domain[j]) {
                m = m.max(r[j]);
            }
            r[i] = m.min(mask[i]);
        }
    }
    for i in (0..h * w).rev() {
        if !domain[i] {
            continue;
        }
        let mut m = r[i];
        for j in neighbours8(i, h, w).filter(|&j| j > i && domain[j]) {
            m = m.max(r[j]);
        }
        r[i] = m.min(mask[i]);
        if neighbours8(i, h, w).any(|j| j > i && domain[j] && r[j] < r[i] && r[j] < mask[j]) {
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours8(i, h, w) {
            if domain[j] && r[j] < r[i] && r[j] != mask[j] {
                r[j] = r[i].min(mask[j]);
                queue.push_back(j);
            }
        }
    }
    r
}

/// Labels each 8-connected plateau of `values` within `domain` that has no
/// strictly higher neighbour in `domain`. Ids follow row-major first
/// occurrence.
pub fn regional_maxima(values: &[u32], domain: &[bool], h: usize, w: usize) -> LabelMap {
    let mut seen = vec![false; h * w];
    let mut ids = vec![0u32; h * w];
    let mut next = 1;
    let mut stack = Vec::new();
    let mut plateau = Vec::new();
    for s in 0..h * w {
        if !domain[s] || seen[s] {
            continue;
        }
        let v = values[s];
        let mut is_max = true;
        plateau.clear();
        stack.push(s);
        seen[s] = true;
        while let Some(i) = stack.pop() {
            plateau.push(i);
            for j in neighbours8(i, h, w).filter(|&j| domain[j]) {
                if values[j] > v {
                    is_max = false;
                } else if values[j] == v && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if is_max {
            for &i in &plateau {
                ids[i] = next;
            }
            next += 1;
        }
    }
    // the outer scan reaches each plateau at its first row-major pixel
    LabelMap { height: h, width: w, ids }
}

/// Regional maxima of the h-maxima transform of `dist` over the foreground
/// of `mask`. `h = u32::MAX` gives one marker per connected component.
pub fn extract_markers(dist: &DistanceMap, mask: &BinaryMask, h: u32) -> LabelMap {
    let (hh, ww) = (dist.height, dist.width);
    let marker: Vec<u32> = dist.values.iter().map(|d| d.saturating_sub(h)).collect();
    let rec = reconstruct_by_dilation(&marker, &dist.values, &mask.bits, hh, ww);
    regional_maxima(&rec, &mask.bits, hh, ww)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::post::distance::distance_transform;
    use crate::rng::Rng;

    fn discs(h: usize, w: usize, centres: &[(f64, f64)], r: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            centres.iter().any(|(cy, cx)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
        })
    }

    #[test]
    fn single_disc_one_marker() {
        let m = discs(16, 16, &[(8.0, 8.0)], 5.0);
        let mk = extract_markers(&distance_transform(&m), &m, 2);
        assert_eq!(mk.max_id(), 1);
        assert_eq!(mk.get(8, 8), 1);
    }

    #[test]
    fn two_merged_discs_two_markers() {
        let m = discs(16, 24, &[(8.0, 8.5), (8.0, 15.5)], 5.0);
        let d = distance_transform(&m);
        let mk = extract_markers(&d, &m, 2);
        assert_eq!(mk.max_id(), 2);
        assert!(mk.ids.iter().zip(&m.bits).all(|(id, fg)| *id == 0 || *fg));
    }

    #[test]
    fn empty_and_infinite_depth() {
        let e = BinaryMask::empty(5, 5);
        assert_eq!(extract_markers(&distance_transform(&e), &e, 2).max_id(), 0);
        let m = discs(16, 24, &[(8.0, 5.0), (8.0, 18.0)], 4.0);
        let mk = extract_markers(&distance_transform(&m), &m, u32::MAX);
        assert_eq!(mk.max_id(), 2);
        assert_eq!(mk.foreground(), m);
    }

    /// Reconstruction reference: iterate geodesic dilation to stability.
    fn reconstruct_naive(marker: &[u32], mask: &[u32], domain: &[bool], h: usize, w: usize) -> Vec<u32> {
        let mut r = marker.to_vec();
        loop {
            let prev = r.clone();
            for i in 0..h * w {
                if domain[i] {
                    let m = neighbours8(i, h, w).filter(|&j| domain[j]).map(|j| prev[j]).fold(prev[i], u32::max);
                    r[i] = m.min(mask[i]);
                }
            }
            if r == prev {
                return r;
            }
        }
    }

    #[test]
    fn reconstruction_matches_naive() {
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let (h, w) = (1 + rng.below(10), 1 + rng.below(10));
            let mask: Vec<u32> = (0..h * w).map(|_| rng.below(10) as u32).collect();
            let marker: Vec<u32> = mask.iter().map(|m| m.saturating_sub(rng.below(4) as u32)).collect();
            let domain: Vec<bool> = (0..h * w).map(|_| rng.bernoulli(0.8)).collect();
            assert_eq!(reconstruct_by_dilation(&marker, &mask, &domain, h, w), reconstruct_naive(&marker, &mask, &domain, h, w));
        }
    }

    #[test]
    fn maxima_have_no_higher_neighbour() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let (h, w) = (2 + rng.below(10), 2 + rng.below(10));
            let v: Vec<u32> = (0..h * w).map(|_| rng.below(4) as u32).collect();
            let dom = vec![true; h * w];
            let lm = regional_maxima(&v, &dom, h, w);
            assert!(lm.is_contiguous());
            let global = *v.iter().max().unwrap();
            for i in 0..h * w {
                if v[i] == global {
                    assert_ne!(lm.ids[i], 0);
                }
                if lm.ids[i] != 0 {
                    assert!(neighbours8(i, h, w).all(|j| v[j] <= v[i]));
                }
            }
        }
    }
}
