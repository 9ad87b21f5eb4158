//! Rank-4 tensors in row-major `n -> c -> h -> w` layout.

use std::fmt;
use std::ops::Range;

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    /// Checked constructor: every extent must be positive and the element
    /// count must fit in `usize`.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            bail!(Dimension, "all extents must be >= 1, got ({n},{c},{h},{w})");
        }
        let len = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w));
        if len.is_none() {
            bail!(Dimension, "element count of ({n},{c},{h},{w}) overflows");
        }
        Ok(Self { n, c, h, w })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `h x w` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense tensor with an optional gradient buffer of identical length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Dims,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

/// Binary elementwise operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

/// Right-hand side of an elementwise operation.
pub enum Operand<'a, S> {
    Tensor(&'a Tensor<S>),
    Scalar(S),
}

impl<S: Scalar> Tensor<S> {
    pub fn filled(dims: Dims, value: S) -> Self {
        Self { dims, data: vec![value; dims.len()], grad: None }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, S::zero())
    }

    /// Uniform fill in `[lo, hi)` drawn from `rng` in storage order.
    pub fn uniform(dims: Dims, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..dims.len()).map(|_| S::from_f64(rng.uniform(lo, hi))).collect();
        Self { dims, data, grad: None }
    }

    pub fn from_vec(dims: Dims, data: Vec<S>) -> Result<Self> {
        if data.len() != dims.len() {
            bail!(Shape, "buffer of {} elements does not fit dims {dims}", data.len());
        }
        Ok(Self { dims, data, grad: None })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.dims.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.dims.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `h x w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut [S] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); len])
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }

    /// Simultaneous mutable access to values and gradient.
    pub fn data_and_grad_mut(&mut self) -> (&mut [S], &mut [S]) {
        let len = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![S::zero(); len]);
        (&mut self.data, grad)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    #[inline]
    pub(crate) fn debug_assert_finite(&self, what: &str) {
        debug_assert!(self.is_finite(), "non-finite value in {what}");
    }

    /// Same values, different dims of equal element count.
    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if dims.len() != self.data.len() {
            bail!(Shape, "cannot reshape {} into {dims}", self.dims);
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Pure elementwise arithmetic; neither operand is modified.
    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_, S>) -> Result<Self> {
        let apply = |a: S, b: S| match op {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
        };
        let data = match rhs {
            Operand::Tensor(b) => {
                if b.dims != self.dims {
                    bail!(Shape, "elementwise {op:?} on {} and {}", self.dims, b.dims);
                }
                self.data.iter().zip(&b.data).map(|(&x, &y)| apply(x, y)).collect()
            }
            Operand::Scalar(k) => self.data.iter().map(|&x| apply(x, k)).collect(),
        };
        Ok(Self { dims: self.dims, data, grad: None })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(ElementwiseOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(ElementwiseOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(ElementwiseOp::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if other.dims != self.dims {
            bail!(Shape, "accumulate {} into {}", other.dims, self.dims);
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// Channel concatenation: `self` occupies channels `[0, self.c)`.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.dims, other.dims);
        if a.n != b.n || a.h != b.h || a.w != b.w {
            bail!(Shape, "concat_channels needs equal n,h,w: {a} vs {b}");
        }
        let dims = a.with_c(a.c + b.c);
        let mut data = Vec::with_capacity(dims.len());
        let (pa, pb) = (a.c * a.plane(), b.c * b.plane());
        for n in 0..a.n {
            data.extend_from_slice(&self.data[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&other.data[n * pb..(n + 1) * pb]);
        }
        Ok(Self { dims, data, grad: None })
    }

    /// Copy of the channels in `range`.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        let d = self.dims;
        if range.start >= range.end || range.end > d.c {
            bail!(Shape, "channel range {range:?} outside 0..{}", d.c);
        }
        let dims = d.with_c(range.end - range.start);
        let p = d.plane();
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..d.n {
            let start = (n * d.c + range.start) * p;
            let end = (n * d.c + range.end) * p;
            data.extend_from_slice(&self.data[start..end]);
        }
        Ok(Self { dims, data, grad: None })
    }

    /// Samples `range` of the batch.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        let d = self.dims;
        if range.start >= range.end || range.end > d.n {
            bail!(Shape, "batch range {range:?} outside 0..{}", d.n);
        }
        let per = d.c * d.plane();
        let dims = Dims { n: range.end - range.start, ..d };
        Ok(Self { dims, data: self.data[range.start * per..range.end * per].to_vec(), grad: None })
    }

    /// Stack tensors of identical `(c,h,w)` along the batch axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let Some(first) = items.first() else {
            bail!(Shape, "cannot stack zero tensors");
        };
        let d = first.dims;
        let mut data = Vec::with_capacity(d.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.dims.c, t.dims.h, t.dims.w) != (d.c, d.h, d.w) {
                bail!(Shape, "stack: {} vs {}", t.dims, d);
            }
            n += t.dims.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self { dims: Dims { n, ..d }, data, grad: None })
    }

    /// Per-pixel softmax across channels, stabilized by max subtraction.
    pub fn channel_softmax(&self) -> Result<Self> {
        let d = self.dims;
        if d.c < 2 {
            bail!(Shape, "channel_softmax needs >= 2 channels, got {}", d.c);
        }
        let p = d.plane();
        let mut out = vec![S::zero(); d.len()];
        for n in 0..d.n {
            let base = n * d.c * p;
            for i in 0..p {
                let mut max = S::neg_infinity();
                for c in 0..d.c {
                    max = max.max(self.data[base + c * p + i]);
                }
                let mut total = S::zero();
                for c in 0..d.c {
                    let e = (self.data[base + c * p + i] - max).exp();
                    out[base + c * p + i] = e;
                    total += e;
                }
                for c in 0..d.c {
                    out[base + c * p + i] /= total;
                }
            }
        }
        Ok(Self { dims: d, data: out, grad: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: (usize, usize, usize, usize), v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Dims::new(dims.0, dims.1, dims.2, dims.3).unwrap(), v).unwrap()
    }

    #[test]
    fn zero_fill() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2).unwrap());
        assert_eq!(x.data(), &[0.0; 4]);
        assert!(!x.has_grad());
    }

    #[test]
    fn uniform_fill_is_seeded() {
        let d = Dims::new(1, 2, 1, 1).unwrap();
        let a = Tensor::<f32>::uniform(d, -1.0, 1.0, &mut crate::rng::Rng::new(7));
        let b = Tensor::<f32>::uniform(d, -1.0, 1.0, &mut crate::rng::Rng::new(7));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(Dims::new(0, 1, 1, 1).is_err());
        assert!(Dims::new(usize::MAX, 2, 2, 2).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let a = t((1, 1, 1, 2), vec![1.0, 2.0]);
        let b = t((1, 1, 1, 2), vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.scale(0.0).data(), &[0.0, 0.0]);
        let ones = Tensor::filled(a.dims(), 1.0);
        assert_eq!(a.mul(&ones).unwrap(), a);
        let c = t((1, 1, 2, 1), vec![1.0, 2.0]);
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn concat_shapes() {
        let a = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let b = t((1, 1, 2, 2), vec![5.0, 6.0, 7.0, 8.0]);
        let ab = a.concat_channels(&b).unwrap();
        assert_eq!(ab.dims(), Dims::new(1, 2, 2, 2).unwrap());
        assert_eq!(ab.slice_channels(0..1).unwrap(), a);
        let bad = t((1, 1, 3, 2), vec![0.0; 6]);
        assert!(a.concat_channels(&bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let x = t((1, 2, 1, 3), vec![0.0, 1000.0, 1.0, 0.0, 0.0, 2.0]);
        let p = x.channel_softmax().unwrap();
        assert_eq!(p.get(0, 0, 0, 0), 0.5);
        assert_eq!(p.get(0, 1, 0, 0), 0.5);
        assert!((p.get(0, 0, 0, 1) - 1.0).abs() < 1e-12);
        assert!(p.get(0, 1, 0, 1) < 1e-12);
        // direct evaluation of e^1/(e^1+e^2), e^2/(e^1+e^2)
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        assert!((p.get(0, 0, 0, 2) - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((p.get(0, 0, 0, 2) - 0.2689).abs() < 1e-4);
        assert!((p.get(0, 1, 0, 2) - 0.7311).abs() < 1e-4);
        assert!(t((1, 1, 1, 1), vec![0.0]).channel_softmax().is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(vals in prop::collection::vec(-50.0f64..50.0, 3 * 2 * 5)) {
            let x = t((2, 3, 1, 5), vals);
            let p = x.channel_softmax().unwrap();
            for n in 0..2 {
                for i in 0..5 {
                    let s: f64 = (0..3).map(|c| p.get(n, c, 0, i)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    for c in 0..3 {
                        let v = p.get(n, c, 0, i);
                        prop_assert!(v >= 0.0 && v <= 1.0);
                    }
                }
            }
        }

        #[test]
        fn concat_then_slice_is_identity(
            a in prop::collection::vec(-5.0f64..5.0, 2 * 2 * 6),
            b in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 6),
        ) {
            let ta = t((2, 2, 2, 3), a);
            let tb = t((2, 3, 2, 3), b);
            let ab = ta.concat_channels(&tb).unwrap();
            prop_assert_eq!(ab.slice_channels(0..2).unwrap(), ta);
            prop_assert_eq!(ab.slice_channels(2..5).unwrap(), tb);
        }

        #[test]
        fn elementwise_is_pure(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let ta = t((1, 1, 2, 3), a);
            let tb = t((1, 1, 2, 3), b);
            let (ca, cb) = (ta.clone(), tb.clone());
            for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul] {
                let _ = ta.elementwise(op, Operand::Tensor(&tb)).unwrap();
                let _ = ta.elementwise(op, Operand::Scalar(2.5)).unwrap();
            }
            let bits = |x: &Tensor<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&ta), bits(&ca));
            prop_assert_eq!(bits(&tb), bits(&cb));
        }
    }
}
