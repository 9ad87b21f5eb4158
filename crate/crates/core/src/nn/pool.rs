//! 2x2 max pooling that remembers its argmax positions, and the matching
//! sparse unpooling used by the decoder.

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

/// For each pooled element, the flat index into the pre-pool tensor of the
/// selected maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    /// Dims of the pooled output.
    pub dims: Dims,
    /// Dims of the tensor that was pooled.
    pub input_dims: Dims,
    pub indices: Vec<usize>,
}

impl PoolIndices {
    /// Every index addresses an element of its own (replication-clamped) window.
    pub fn is_consistent(&self) -> bool {
        let (d, id) = (self.dims, self.input_dims);
        if self.indices.len() != d.len() {
            return false;
        }
        for n in 0..d.n {
            for c in 0..d.c {
                for oy in 0..d.h {
                    for ox in 0..d.w {
                        let idx = self.indices[d.index(n, c, oy, ox)];
                        if !window_contains(id, n, c, oy, ox, idx) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

impl PoolIndices {
    /// The same per-plane argmax positions repeated over `c` channels;
    /// channel `k` reuses the positions of source channel `k % source_c`.
    pub fn tiled_channels(&self, c: usize) -> PoolIndices {
        let (d, id) = (self.dims, self.input_dims);
        let (dims, input_dims) = (d.with_c(c), id.with_c(c));
        let mut indices = Vec::with_capacity(dims.len());
        for n in 0..d.n {
            for k in 0..c {
                let src = k % d.c;
                let shift = input_dims.index(n, k, 0, 0);
                let from = id.index(n, src, 0, 0);
                let start = d.index(n, src, 0, 0);
                indices.extend(self.indices[start..start + d.plane()].iter().map(|&i| i - from + shift));
            }
        }
        PoolIndices { dims, input_dims, indices }
    }
}

fn window_contains(id: Dims, n: usize, c: usize, oy: usize, ox: usize, idx: usize) -> bool {
    if idx >= id.len() {
        return false;
    }
    let plane_start = id.index(n, c, 0, 0);
    if idx < plane_start || idx >= plane_start + id.plane() {
        return false;
    }
    let local = idx - plane_start;
    let (y, x) = (local / id.w, local % id.w);
    let ys = [(2 * oy).min(id.h - 1), (2 * oy + 1).min(id.h - 1)];
    let xs = [(2 * ox).min(id.w - 1), (2 * ox + 1).min(id.w - 1)];
    ys.contains(&y) && xs.contains(&x)
}

/// Max over non-overlapping 2x2 windows. Odd extents are padded by
/// replicating the last row/column. Ties keep the first (smallest) index.
pub fn maxpool2x2_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, PoolIndices) {
    let d = x.dims();
    let (oh, ow) = (d.h.div_ceil(2), d.w.div_ceil(2));
    let od = d.with_hw(oh, ow);
    let mut out = Vec::with_capacity(od.len());
    let mut indices = Vec::with_capacity(od.len());
    let src = x.data();
    for n in 0..d.n {
        for c in 0..d.c {
            let base = d.index(n, c, 0, 0);
            for oy in 0..oh {
                let ys = [2 * oy, (2 * oy + 1).min(d.h - 1)];
                for ox in 0..ow {
                    let xs = [2 * ox, (2 * ox + 1).min(d.w - 1)];
                    let mut best = base + ys[0] * d.w + xs[0];
                    for &y in &ys {
                        for &xx in &xs {
                            let i = base + y * d.w + xx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    indices.push(best);
                }
            }
        }
    }
    let pooled = Tensor::from_vec(od, out).expect("pool output sized by construction");
    (pooled, PoolIndices { dims: od, input_dims: d, indices })
}

/// Routes the upstream gradient to the saved argmax positions.
pub fn maxpool2x2_backward<S: Scalar>(upstream: &Tensor<S>, idx: &PoolIndices) -> Result<Tensor<S>> {
    if upstream.dims() != idx.dims {
        bail!(Shape, "pool backward: upstream {} vs pooled {}", upstream.dims(), idx.dims);
    }
    let mut g = vec![S::zero(); idx.input_dims.len()];
    for (&i, &v) in idx.indices.iter().zip(upstream.data()) {
        g[i] += v;
    }
    Tensor::from_vec(idx.input_dims, g)
}

/// Scatter `x` to the recorded argmax positions of a tensor shaped
/// `out_dims`; every other position is zero.
pub fn maxunpool2x2<S: Scalar>(x: &Tensor<S>, idx: &PoolIndices, out_dims: Dims) -> Result<Tensor<S>> {
    if x.dims() != idx.dims {
        bail!(Shape, "unpool input {} does not match pooled dims {}", x.dims(), idx.dims);
    }
    if out_dims != idx.input_dims {
        bail!(Shape, "unpool target {out_dims} does not match pre-pool dims {}", idx.input_dims);
    }
    let d = idx.dims;
    let mut out = vec![S::zero(); out_dims.len()];
    let src = x.data();
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in 0..d.h {
                for ox in 0..d.w {
                    let k = d.index(n, c, oy, ox);
                    let target = idx.indices[k];
                    if !window_contains(out_dims, n, c, oy, ox, target) {
                        bail!(Corruption, "index {target} for pooled element {k} is outside its window");
                    }
                    out[target] = src[k];
                }
            }
        }
    }
    Tensor::from_vec(out_dims, out)
}

/// Gradient of unpooling: gather from the saved positions.
pub fn maxunpool2x2_backward<S: Scalar>(upstream: &Tensor<S>, idx: &PoolIndices) -> Result<Tensor<S>> {
    if upstream.dims() != idx.input_dims {
        bail!(Shape, "unpool backward: upstream {} vs {}", upstream.dims(), idx.input_dims);
    }
    let g = upstream.data();
    let data = idx.indices.iter().map(|&i| g[i]).collect();
    Tensor::from_vec(idx.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tiled_indices_stay_consistent() {
        let x = Tensor::<f64>::uniform(Dims::new(2, 2, 6, 5).unwrap(), -1.0, 1.0, &mut Rng::new(4));
        let (_, idx) = maxpool2x2_forward(&x);
        let t = idx.tiled_channels(5);
        assert!(t.is_consistent());
        assert_eq!(t.dims, Dims::new(2, 5, 3, 3).unwrap());
        let d = t.input_dims;
        for (k, src) in [(0, 0), (3, 1), (4, 0)] {
            let a = t.indices[t.dims.index(1, k, 1, 2)] - d.index(1, k, 0, 0);
            let b = idx.indices[idx.dims.index(1, src, 1, 2)] - idx.input_dims.index(1, src, 0, 0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn picks_max_and_index() {
        let x = Tensor::<f64>::from_vec(Dims::new(1, 1, 2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2_forward(&x);
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.indices, vec![3]);
    }

    #[test]
    fn constant_input_ties_pick_first() {
        let x = Tensor::<f64>::filled(Dims::new(1, 2, 4, 4).unwrap(), 3.0);
        let (y, idx) = maxpool2x2_forward(&x);
        assert!(y.data().iter().all(|v| *v == 3.0));
        let d = x.dims();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    assert_eq!(idx.indices[idx.dims.index(0, c, oy, ox)], d.index(0, c, 2 * oy, 2 * ox));
                }
            }
        }
    }

    #[test]
    fn odd_extent_replicates_edge() {
        let x = Tensor::<f64>::from_vec(Dims::new(1, 1, 3, 3).unwrap(), (0..9).map(|v| v as f64).collect()).unwrap();
        let (y, idx) = maxpool2x2_forward(&x);
        assert_eq!(y.dims(), Dims::new(1, 1, 2, 2).unwrap());
        assert_eq!(y.data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(idx.is_consistent());
    }

    #[test]
    fn unpool_scatter_example() {
        let y = Tensor::<f64>::from_vec(Dims::new(1, 1, 1, 1).unwrap(), vec![4.0]).unwrap();
        let idx = PoolIndices {
            dims: y.dims(),
            input_dims: Dims::new(1, 1, 2, 2).unwrap(),
            indices: vec![3],
        };
        let u = maxunpool2x2(&y, &idx, idx.input_dims).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn out_of_window_index_is_corruption() {
        let y = Tensor::<f64>::from_vec(Dims::new(1, 1, 1, 2).unwrap(), vec![1.0, 2.0]).unwrap();
        let idx = PoolIndices {
            dims: y.dims(),
            input_dims: Dims::new(1, 1, 2, 4).unwrap(),
            indices: vec![0, 1],
        };
        assert!(matches!(maxunpool2x2(&y, &idx, idx.input_dims), Err(crate::Error::Corruption(_))));
        let idx = PoolIndices { indices: vec![0, 99], ..idx };
        assert!(matches!(maxunpool2x2(&y, &idx, idx.input_dims), Err(crate::Error::Corruption(_))));
    }

    #[test]
    fn unpool_round_trip_and_mass() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let x = Tensor::<f64>::uniform(Dims::new(2, 3, 6, 8).unwrap(), -1.0, 1.0, &mut rng);
            let (y, idx) = maxpool2x2_forward(&x);
            assert!(idx.is_consistent());
            let u = maxunpool2x2(&y, &idx, x.dims()).unwrap();
            assert!((u.sum() - y.sum()).abs() < 1e-12);
            // integer values make the mass comparison exact regardless of order
            let xi = x.map(|v| (v * 100.0).round());
            let (yi, ii) = maxpool2x2_forward(&xi);
            assert_eq!(maxunpool2x2(&yi, &ii, xi.dims()).unwrap().sum(), yi.sum());
            let (y2, _) = maxpool2x2_forward(&u);
            // maxima survive unless a window's max was negative (zeros win then)
            for (a, b) in y.data().iter().zip(y2.data()) {
                assert_eq!(*b, a.max(0.0));
            }
            let pos = x.map(|v| v.abs() + 0.1);
            let (yp, ip) = maxpool2x2_forward(&pos);
            let (yp2, _) = maxpool2x2_forward(&maxunpool2x2(&yp, &ip, pos.dims()).unwrap());
            assert_eq!(yp, yp2);
        }
    }

    #[test]
    fn backward_routes_to_saved_indices() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::uniform(Dims::new(1, 1, 4, 4).unwrap(), -1.0, 1.0, &mut rng);
        let (_, idx) = maxpool2x2_forward(&x);
        let up = Tensor::uniform(idx.dims, -1.0, 1.0, &mut rng);
        let g = maxpool2x2_backward(&up, &idx).unwrap();
        // finite-difference oracle on the scalar loss <up, pool(x)>
        let h = 1e-5;
        for i in 0..16 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let f = |t: &Tensor<f64>| -> f64 {
                let (y, _) = maxpool2x2_forward(t);
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
            if !idx.indices.contains(&i) {
                assert_eq!(g.data()[i], 0.0);
            }
        }
    }
}
