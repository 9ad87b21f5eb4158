//! Marker-controlled flooding, connected components and instance cleanup.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{bail, Result};

use super::distance::{distance_transform, DistanceMap};
use super::maps::{neighbours8, threshold_prob, BinaryMask, LabelMap};
use super::markers::extract_markers;

/// Marker pixels ordered by id, then row-major.
fn seed_order(markers: &LabelMap) -> Vec<usize> {
    let mut seeds: Vec<usize> = (0..markers.ids.len()).filter(|&i| markers.ids[i] != 0).collect();
    seeds.sort_by_key(|&i| (markers.ids[i], i));
    seeds
}

/// Flood `-dist` from the markers over the mask foreground. The next pixel
/// claimed is the frontier pixel of greatest distance; among equals, the
/// one that joined the frontier first. Seeds join in [`seed_order`] and
/// every newly labeled pixel enqueues its neighbours in row-major order, so
/// equal levels grow breadth-first from all basins at once.
pub fn watershed(dist: &DistanceMap, markers: &LabelMap, mask: &BinaryMask) -> Result<LabelMap> {
    let (h, w) = (dist.height, dist.width);
    if markers.height != h || markers.width != w {
        bail!(Shape, "markers are {}x{}, distance map {h}x{w}", markers.height, markers.width);
    }
    mask.same_dims(h, w)?;
    for (i, (&id, &fg)) in markers.ids.iter().zip(&mask.bits).enumerate() {
        if id != 0 && !fg {
            bail!(Input, "marker {id} at ({}, {}) lies outside the mask", i / w, i % w);
        }
    }
    let mut out = markers.clone();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<_>, q: usize, id: u32| {
        heap.push(Reverse((Reverse(dist.values[q]), seq, id, q)));
        seq += 1;
    };
    for i in seed_order(markers) {
        for q in neighbours8(i, h, w) {
            if mask.bits[q] && out.ids[q] == 0 {
                push(&mut heap, q, markers.ids[i]);
            }
        }
    }
    while let Some(Reverse((_, _, id, p))) = heap.pop() {
        if out.ids[p] != 0 {
            continue;
        }
        out.ids[p] = id;
        for q in neighbours8(p, h, w) {
            if mask.bits[q] && out.ids[q] == 0 {
                push(&mut heap, q, id);
            }
        }
    }
    Ok(out)
}

/// Quadratic reference for [`watershed`]. Each unlabeled pixel remembers
/// when and by whom it was first touched; every step rescans the image for
/// the touched pixel of greatest distance, earliest touch first.
pub fn watershed_brute(dist: &DistanceMap, markers: &LabelMap, mask: &BinaryMask) -> LabelMap {
    let (h, w) = (dist.height, dist.width);
    let mut out = markers.clone();
    let mut touch: Vec<Option<(u64, u32)>> = vec![None; h * w];
    let mut clock = 0u64;
    let mut visit = |out: &LabelMap, touch: &mut Vec<Option<(u64, u32)>>, p: usize| {
        for q in neighbours8(p, h, w) {
            if mask.bits[q] && out.ids[q] == 0 && touch[q].is_none() {
                touch[q] = Some((clock, out.ids[p]));
            }
            clock += 1;
        }
    };
    for i in seed_order(markers) {
        visit(&out, &mut touch, i);
    }
    loop {
        let mut best: Option<(Reverse<u32>, u64, usize)> = None;
        for q in 0..h * w {
            if out.ids[q] != 0 {
                continue;
            }
            if let Some((t, _)) = touch[q] {
                let cand = (Reverse(dist.values[q]), t, q);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
        match best {
            Some((_, _, q)) => {
                out.ids[q] = touch[q].expect("touched").1;
                visit(&out, &mut touch, q);
            }
            None => return out,
        }
    }
}

/// 8-connected components, ids in row-major order of first pixel.
pub fn connected_components(mask: &BinaryMask) -> LabelMap {
    let (h, w) = (mask.height, mask.width);
    let mut ids = vec![0u32; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for s in 0..h * w {
        if !mask.bits[s] || ids[s] != 0 {
            continue;
        }
        next += 1;
        ids[s] = next;
        stack.push(s);
        while let Some(i) = stack.pop() {
            for j in neighbours8(i, h, w) {
                if mask.bits[j] && ids[j] == 0 {
                    ids[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    LabelMap { height: h, width: w, ids }
}

/// Drops instances smaller than `min_area` and renumbers the rest.
pub fn finalize_instances(labels: &LabelMap, min_area: usize) -> LabelMap {
    let areas = labels.areas();
    let ids = labels.ids.iter().map(|&v| if areas[v as usize] < min_area { 0 } else { v }).collect();
    LabelMap { ids, ..*labels }.renumbered()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostConfig {
    pub prob_threshold: f64,
    pub marker_h: u32,
    pub min_area: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self { prob_threshold: 0.5, marker_h: 2, min_area: 30 }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            bail!(Config, "probability threshold must lie in (0, 1), got {}", self.prob_threshold);
        }
        Ok(())
    }
}

/// Threshold, distance transform, markers, watershed and cleanup.
pub fn segment_instances(prob: &[f32], height: usize, width: usize, cfg: &PostConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let mask = threshold_prob(prob, height, width, cfg.prob_threshold)?;
    let dist = distance_transform(&mask);
    let markers = extract_markers(&dist, &mask, cfg.marker_h);
    let labels = watershed(&dist, &markers, &mask)?;
    Ok(finalize_instances(&labels, cfg.min_area))
}

/// Threshold and connected components without any splitting.
pub fn components_from_prob(prob: &[f32], height: usize, width: usize, cfg: &PostConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let mask = threshold_prob(prob, height, width, cfg.prob_threshold)?;
    Ok(finalize_instances(&connected_components(&mask), cfg.min_area))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn discs(h: usize, w: usize, centres: &[(f64, f64)], r: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            centres.iter().any(|(cy, cx)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
        })
    }

    #[test]
    fn single_blob_single_label() {
        let m = discs(16, 16, &[(8.0, 8.0)], 6.0);
        let d = distance_transform(&m);
        let mk = extract_markers(&d, &m, 2);
        let l = watershed(&d, &mk, &m).unwrap();
        assert_eq!(l.foreground(), m);
        assert_eq!(l.id_set(), vec![1]);
    }

    #[test]
    fn two_discs_match_brute_force() {
        let m = discs(16, 24, &[(8.0, 8.5), (8.0, 15.5)], 5.0);
        let d = distance_transform(&m);
        let mk = extract_markers(&d, &m, 2);
        let l = watershed(&d, &mk, &m).unwrap();
        assert_eq!(l.id_set(), vec![1, 2]);
        assert_eq!(l, watershed_brute(&d, &mk, &m));
    }

    #[test]
    fn empty_and_errors() {
        let e = BinaryMask::empty(4, 4);
        let d = distance_transform(&e);
        assert_eq!(watershed(&d, &LabelMap::empty(4, 4), &e).unwrap(), LabelMap::empty(4, 4));
        let mut mk = LabelMap::empty(4, 4);
        mk.ids[5] = 1;
        assert!(matches!(watershed(&d, &mk, &e), Err(crate::Error::Input(_))));
        assert!(watershed(&d, &LabelMap::empty(3, 4), &e).is_err());
    }

    #[test]
    fn small_objects_removed() {
        let mut l = LabelMap::empty(10, 10);
        for i in 0..10 {
            l.ids[i] = 4;
        }
        for i in 50..90 {
            l.ids[i] = 2;
        }
        let f = finalize_instances(&l, 30);
        assert_eq!(f.id_set(), vec![1]);
        assert_eq!(f.areas()[1], 40);
        assert_eq!(finalize_instances(&l, 1).ids, l.renumbered().ids);
    }

    #[test]
    fn infinite_depth_reduces_to_components() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let m = BinaryMask::from_fn(12, 12, |_, _| false);
            let m = BinaryMask { bits: m.bits.iter().map(|_| rng.bernoulli(0.5)).collect(), ..m };
            let d = distance_transform(&m);
            let mk = extract_markers(&d, &m, u32::MAX);
            assert_eq!(watershed(&d, &mk, &m).unwrap(), connected_components(&m));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn two_markers_match_flooding_oracle(seed in 0u64..1_000_000) {
            let mut rng = Rng::new(seed);
            let (h, w) = (4 + rng.below(21), 4 + rng.below(21));
            let c: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64), rng.uniform(1.5, 7.0)))
                .collect();
            let m = BinaryMask::from_fn(h, w, |y, x| {
                c.iter().any(|(cy, cx, r)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r) || rng_free(y, x, seed)
            });
            let fg: Vec<usize> = (0..h * w).filter(|&i| m.bits[i]).collect();
            prop_assume!(fg.len() >= 2);
            let a = fg[rng.below(fg.len())];
            let b = fg[rng.below(fg.len())];
            prop_assume!(a != b);
            let mut mk = LabelMap::empty(h, w);
            mk.ids[a] = 1;
            mk.ids[b] = 2;
            let d = distance_transform(&m);
            prop_assert_eq!(watershed(&d, &mk, &m).unwrap(), watershed_brute(&d, &mk, &m));
        }
    }

    /// Sparse deterministic speckle so masks are not only clean discs.
    fn rng_free(y: usize, x: usize, seed: u64) -> bool {
        let mut r = Rng::new(seed ^ ((y as u64) << 32 | x as u64));
        r.bernoulli(0.08)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partitions_foreground(seed in 0u64..10_000, h in 2u32..5) {
            let mut rng = Rng::new(seed);
            let (hh, ww) = (4 + rng.below(12), 4 + rng.below(12));
            let m = BinaryMask::from_fn(hh, ww, |_, _| false);
            let m = BinaryMask { bits: m.bits.iter().map(|_| rng.bernoulli(0.7)).collect(), ..m };
            let d = distance_transform(&m);
            let mk = extract_markers(&d, &m, h);
            let l = watershed(&d, &mk, &m).unwrap();
            // every marker-reachable foreground pixel is labeled, nothing else
            let reachable = connected_components(&m);
            let seeded: std::collections::HashSet<u32> =
                mk.ids.iter().zip(&reachable.ids).filter(|(a, _)| **a != 0).map(|(_, c)| *c).collect();
            for i in 0..hh * ww {
                prop_assert_eq!(l.ids[i] != 0, m.bits[i] && seeded.contains(&reachable.ids[i]));
            }
            prop_assert_eq!(l.id_set(), mk.id_set());
            prop_assert_eq!(&l, &watershed(&d, &mk, &m).unwrap());
        }
    }
}
