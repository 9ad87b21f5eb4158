//! Direct-summation 2-D convolution (cross-correlation, no kernel flip).

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

/// Kernel shapes the architecture is allowed to use.
pub const ALLOWED_KERNELS: [(usize, usize); 5] = [(3, 3), (1, 1), (5, 1), (1, 5), (2, 2)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size equals input size at stride 1 (odd kernels only).
    Same,
    Explicit { h: usize, w: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride-1, dilation-1, same-padded convolution.
    pub fn new(in_c: usize, out_c: usize, kh: usize, kw: usize) -> Self {
        Self { in_c, out_c, kh, kw, dilation: 1, stride: 1, padding: Padding::Same }
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_c == 0 || self.out_c == 0 {
            bail!(Parameter, "convolution channels must be positive: {self:?}");
        }
        if !ALLOWED_KERNELS.contains(&(self.kh, self.kw)) {
            bail!(Parameter, "kernel {}x{} not in the allowed set", self.kh, self.kw);
        }
        if self.dilation == 0 {
            bail!(Parameter, "dilation must be >= 1");
        }
        if !(self.stride == 1 || self.stride == 2) {
            bail!(Parameter, "stride must be 1 or 2, got {}", self.stride);
        }
        if self.padding == Padding::Same && (self.kh % 2 == 0 || self.kw % 2 == 0) {
            bail!(Parameter, "same padding requires an odd kernel, got {}x{}", self.kh, self.kw);
        }
        Ok(())
    }

    /// Effective kernel extent `(k-1)*dilation + 1` along each axis.
    pub fn extent(&self) -> (usize, usize) {
        ((self.kh - 1) * self.dilation + 1, (self.kw - 1) * self.dilation + 1)
    }

    pub fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => {
                let (eh, ew) = self.extent();
                (eh / 2, ew / 2)
            }
            Padding::Explicit { h, w } => (h, w),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.extent();
        let (ph, pw) = self.pads();
        if eh > h + 2 * ph || ew > w + 2 * pw {
            bail!(Shape, "kernel extent {eh}x{ew} exceeds padded input {}x{}", h + 2 * ph, w + 2 * pw);
        }
        Ok(((h + 2 * ph - eh) / self.stride + 1, (w + 2 * pw - ew) / self.stride + 1))
    }

    pub fn weight_count(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }
}

/// Weights shaped `(out_c, in_c, kh, kw)` and bias `(1, out_c, 1, 1)`; the
/// gradient accumulators live in the tensors' grad buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<S> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> ConvParams<S> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Self {
            weights: Tensor::zeros(Dims { n: spec.out_c, c: spec.in_c, h: spec.kh, w: spec.kw }),
            bias: Tensor::zeros(Dims { n: 1, c: spec.out_c, h: 1, w: 1 }),
        }
    }

    /// Glorot-uniform weights, `b = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(spec: &ConvSpec, rng: &mut Rng) -> Self {
        let area = spec.kh * spec.kw;
        let bound = (6.0 / ((spec.in_c * area + spec.out_c * area) as f64)).sqrt();
        let dims = Dims { n: spec.out_c, c: spec.in_c, h: spec.kh, w: spec.kw };
        Self {
            weights: Tensor::uniform(dims, -bound, bound, rng),
            bias: Tensor::zeros(Dims { n: 1, c: spec.out_c, h: 1, w: 1 }),
        }
    }

    fn check(&self, spec: &ConvSpec) -> Result<()> {
        let wd = self.weights.dims();
        if (wd.n, wd.c, wd.h, wd.w) != (spec.out_c, spec.in_c, spec.kh, spec.kw) || self.bias.len() != spec.out_c {
            bail!(Shape, "parameters {wd} do not match spec {spec:?}");
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.weights.zero_grad();
        self.bias.zero_grad();
    }
}

/// Range of output columns `ox` for which `ox*stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo.max(0) as usize).min(out_len);
    let hi = (hi.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

pub fn conv2d_forward<S: Scalar>(x: &Tensor<S>, spec: &ConvSpec, p: &ConvParams<S>) -> Result<Tensor<S>> {
    spec.validate()?;
    p.check(spec)?;
    let d = x.dims();
    if d.c != spec.in_c {
        bail!(Shape, "convolution expects {} input channels, got {}", spec.in_c, d.c);
    }
    let (oh, ow) = spec.output_hw(d.h, d.w)?;
    let od = Dims { n: d.n, c: spec.out_c, h: oh, w: ow };
    let (ph, pw) = spec.pads();
    let (kh, kw, dil, st) = (spec.kh, spec.kw, spec.dilation, spec.stride);
    let wts = p.weights.data();
    let bias = p.bias.data();
    let mut out = vec![S::zero(); od.len()];
    for n in 0..d.n {
        for oc in 0..spec.out_c {
            let oplane = &mut out[od.index(n, oc, 0, 0)..od.index(n, oc, 0, 0) + oh * ow];
            oplane.iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..spec.in_c {
                let iplane = x.plane(n, ic);
                for ky in 0..kh {
                    let dy = (ky * dil) as isize - ph as isize;
                    let (y0, y1) = valid_range(dy, st, d.h, oh);
                    for kx in 0..kw {
                        let wv = wts[((oc * spec.in_c + ic) * kh + ky) * kw + kx];
                        let dx = (kx * dil) as isize - pw as isize;
                        let (x0, x1) = valid_range(dx, st, d.w, ow);
                        if x0 == x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy * st) as isize + dy;
                            let irow = &iplane[iy as usize * d.w..(iy as usize + 1) * d.w];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            if st == 1 {
                                let ix0 = (x0 as isize + dx) as usize;
                                for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ((ox * st) as isize + dx) as usize;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_vec(od, out)?;
    t.debug_assert_finite("conv2d output");
    Ok(t)
}

/// Gradient of the convolution with respect to its input; weight and bias
/// gradients are accumulated into `p`.
pub fn conv2d_backward<S: Scalar>(
    upstream: &Tensor<S>,
    cached_input: Option<&Tensor<S>>,
    spec: &ConvSpec,
    p: &mut ConvParams<S>,
) -> Result<Tensor<S>> {
    let Some(x) = cached_input else {
        bail!(State, "convolution backward called without a cached forward input");
    };
    spec.validate()?;
    p.check(spec)?;
    let d = x.dims();
    let (oh, ow) = spec.output_hw(d.h, d.w)?;
    let od = Dims { n: d.n, c: spec.out_c, h: oh, w: ow };
    if upstream.dims() != od {
        bail!(Shape, "upstream gradient {} does not match forward output {od}", upstream.dims());
    }
    let (ph, pw) = spec.pads();
    let (kh, kw, dil, st) = (spec.kh, spec.kw, spec.dilation, spec.stride);
    let mut gin = vec![S::zero(); d.len()];
    let g = upstream.data();
    {
        let bgrad = p.bias.grad_mut();
        for n in 0..d.n {
            for oc in 0..spec.out_c {
                let start = od.index(n, oc, 0, 0);
                bgrad[oc] += g[start..start + oh * ow].iter().copied().sum::<S>();
            }
        }
    }
    let (wts, wgrad) = p.weights.data_and_grad_mut();
    for n in 0..d.n {
        for oc in 0..spec.out_c {
            let gstart = od.index(n, oc, 0, 0);
            let gplane = &g[gstart..gstart + oh * ow];
            for ic in 0..spec.in_c {
                let iplane = x.plane(n, ic);
                let istart = d.index(n, ic, 0, 0);
                let giplane = &mut gin[istart..istart + d.h * d.w];
                for ky in 0..kh {
                    let dy = (ky * dil) as isize - ph as isize;
                    let (y0, y1) = valid_range(dy, st, d.h, oh);
                    for kx in 0..kw {
                        let widx = ((oc * spec.in_c + ic) * kh + ky) * kw + kx;
                        let wv = wts[widx];
                        let dx = (kx * dil) as isize - pw as isize;
                        let (x0, x1) = valid_range(dx, st, d.w, ow);
                        let mut acc = S::zero();
                        for oy in y0..y1 {
                            let iy = ((oy * st) as isize + dy) as usize;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                            let girow = &mut giplane[iy * d.w..(iy + 1) * d.w];
                            for ox in x0..x1 {
                                let ix = ((ox * st) as isize + dx) as usize;
                                let gv = grow[ox];
                                acc += gv * irow[ix];
                                girow[ix] += wv * gv;
                            }
                        }
                        wgrad[widx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(d, gin)
}

/// A 5x5 receptive field factored as a 5x1 convolution followed by a 1x5
/// convolution, both stride 1 with same padding.
pub fn asymmetric_conv5<S: Scalar>(x: &Tensor<S>, p_5x1: &ConvParams<S>, p_1x5: &ConvParams<S>) -> Result<Tensor<S>> {
    let (first, second) = asymmetric_specs(p_5x1, p_1x5)?;
    let mid = conv2d_forward(x, &first, p_5x1)?;
    conv2d_forward(&mid, &second, p_1x5)
}

pub fn asymmetric_specs<S: Scalar>(p_5x1: &ConvParams<S>, p_1x5: &ConvParams<S>) -> Result<(ConvSpec, ConvSpec)> {
    let a = p_5x1.weights.dims();
    let b = p_1x5.weights.dims();
    if (a.h, a.w) != (5, 1) || (b.h, b.w) != (1, 5) || b.c != a.n {
        bail!(Shape, "asymmetric pair needs 5x1 then 1x5 kernels with chained channels, got {a} and {b}");
    }
    Ok((ConvSpec::new(a.c, a.n, 5, 1), ConvSpec::new(b.c, b.n, 1, 5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Dims::new(1, 1, h, w).unwrap(), v).unwrap()
    }

    /// Independent per-output-pixel summation with the same accumulation order.
    fn naive(x: &Tensor<f64>, spec: &ConvSpec, p: &ConvParams<f64>) -> Tensor<f64> {
        let d = x.dims();
        let (oh, ow) = spec.output_hw(d.h, d.w).unwrap();
        let (ph, pw) = spec.pads();
        let mut out = Tensor::zeros(Dims::new(d.n, spec.out_c, oh, ow).unwrap());
        for n in 0..d.n {
            for oc in 0..spec.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[oc];
                        for ic in 0..spec.in_c {
                            for ky in 0..spec.kh {
                                for kx in 0..spec.kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - ph as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += p.weights.get(oc, ic, ky, kx) * x.get(n, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(n, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::uniform(Dims::new(1, 1, 6, 7).unwrap(), -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(1, 1, 3, 3);
        let mut p = ConvParams::zeros(&spec);
        p.weights.set(0, 0, 1, 1, 1.0);
        assert_eq!(conv2d_forward(&x, &spec, &p).unwrap(), x);
    }

    #[test]
    fn one_by_one_scales() {
        let x = img(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let spec = ConvSpec::new(1, 1, 1, 1);
        let mut p = ConvParams::zeros(&spec);
        p.weights.data_mut()[0] = 2.0;
        assert_eq!(conv2d_forward(&x, &spec, &p).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn dilated_delta_response_taps() {
        let (h, w) = (11, 11);
        let mut x = Tensor::<f64>::zeros(Dims::new(1, 1, h, w).unwrap());
        x.set(0, 0, 5, 5, 1.0);
        let spec = ConvSpec::new(1, 1, 3, 3).dilation(2);
        let mut p = ConvParams::zeros(&spec);
        p.weights.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let y = conv2d_forward(&x, &spec, &p).unwrap();
        for yy in 0..h {
            for xx in 0..w {
                let dy = yy as isize - 5;
                let dx = xx as isize - 5;
                let tap = [-2, 0, 2].contains(&dy) && [-2, 0, 2].contains(&dx);
                assert_eq!(y.get(0, 0, yy, xx) != 0.0, tap, "at ({yy},{xx})");
            }
        }
    }

    #[test]
    fn matches_naive_oracle_bitwise() {
        let mut rng = Rng::new(11);
        for (kh, kw, dil, st, pad) in [
            (3, 3, 1, 1, Padding::Same),
            (3, 3, 2, 1, Padding::Same),
            (3, 3, 4, 1, Padding::Same),
            (5, 1, 1, 1, Padding::Same),
            (3, 3, 16, 1, Padding::Same),
            (1, 5, 1, 1, Padding::Same),
            (2, 2, 1, 2, Padding::Explicit { h: 0, w: 0 }),
            (3, 3, 1, 2, Padding::Explicit { h: 1, w: 1 }),
            (1, 1, 1, 1, Padding::Same),
        ] {
            let spec = ConvSpec::new(3, 2, kh, kw).dilation(dil).stride(st).padding(pad);
            let p = ConvParams {
                weights: Tensor::uniform(Dims::new(2, 3, kh, kw).unwrap(), -1.0, 1.0, &mut rng),
                bias: Tensor::uniform(Dims::new(1, 2, 1, 1).unwrap(), -1.0, 1.0, &mut rng),
            };
            let x = Tensor::uniform(Dims::new(2, 3, 8, 10).unwrap(), -1.0, 1.0, &mut rng);
            let fast = conv2d_forward(&x, &spec, &p).unwrap();
            let slow = naive(&x, &spec, &p);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&fast), bits(&slow), "{spec:?}");
        }
    }

    #[test]
    fn channel_mismatch_and_bad_kernels() {
        let x = Tensor::<f64>::zeros(Dims::new(1, 2, 4, 4).unwrap());
        let spec = ConvSpec::new(1, 1, 3, 3);
        assert!(conv2d_forward(&x, &spec, &ConvParams::zeros(&spec)).is_err());
        assert!(ConvSpec::new(1, 1, 5, 5).validate().is_err());
        assert!(ConvSpec::new(1, 1, 2, 2).validate().is_err()); // same padding, even kernel
        assert!(ConvSpec::new(1, 1, 3, 3).stride(3).validate().is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let spec = ConvSpec::new(2, 3, 3, 3);
        let mut p = ConvParams::<f64>::glorot(&spec, &mut rng);
        let x = Tensor::uniform(Dims::new(1, 2, 5, 5).unwrap(), -1.0, 1.0, &mut rng);
        let g = Tensor::zeros(Dims::new(1, 3, 5, 5).unwrap());
        let gi = conv2d_backward(&g, Some(&x), &spec, &mut p).unwrap();
        assert!(gi.data().iter().all(|v| *v == 0.0));
        assert!(p.weights.grad().unwrap().iter().all(|v| *v == 0.0));
        assert!(p.bias.grad().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bias_gradient_is_upstream_channel_sum() {
        let mut rng = Rng::new(6);
        let spec = ConvSpec::new(2, 3, 3, 3);
        let mut p = ConvParams::<f64>::glorot(&spec, &mut rng);
        let x = Tensor::uniform(Dims::new(2, 2, 4, 4).unwrap(), -1.0, 1.0, &mut rng);
        let g = Tensor::uniform(Dims::new(2, 3, 4, 4).unwrap(), -1.0, 1.0, &mut rng);
        conv2d_backward(&g, Some(&x), &spec, &mut p).unwrap();
        for oc in 0..3 {
            let want: f64 = (0..2).map(|n| g.plane(n, oc).iter().sum::<f64>()).sum();
            assert!((p.bias.grad().unwrap()[oc] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_cache_is_state_error() {
        let spec = ConvSpec::new(1, 1, 1, 1);
        let mut p = ConvParams::<f64>::zeros(&spec);
        let g = Tensor::zeros(Dims::new(1, 1, 2, 2).unwrap());
        assert!(matches!(conv2d_backward(&g, None, &spec, &mut p), Err(crate::Error::State(_))));
    }

    #[test]
    fn asymmetric_pair_is_rank_one_kernel() {
        let mut rng = Rng::new(8);
        let (a, b) = (ConvSpec::new(1, 1, 5, 1), ConvSpec::new(1, 1, 1, 5));
        let pa = ConvParams::<f64>::glorot(&a, &mut rng);
        let pb = ConvParams::<f64>::glorot(&b, &mut rng);
        let mut x = Tensor::zeros(Dims::new(1, 1, 9, 9).unwrap());
        x.set(0, 0, 4, 4, 1.0);
        let y = asymmetric_conv5(&x, &pa, &pb).unwrap();
        // cross-correlation of a delta gives the flipped outer product
        for i in 0..5 {
            for j in 0..5 {
                let want = pa.weights.data()[4 - i] * pb.weights.data()[4 - j];
                assert!((y.get(0, 0, 2 + i, 2 + j) - want).abs() < 1e-14);
            }
        }
        let outside: f64 = y.data().iter().map(|v| v.abs()).sum::<f64>()
            - (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).map(|(i, j)| y.get(0, 0, 2 + i, 2 + j).abs()).sum::<f64>();
        assert!(outside.abs() < 1e-14);
    }

    #[test]
    fn asymmetric_zero_and_identity() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f64>::uniform(Dims::new(1, 1, 7, 7).unwrap(), -1.0, 1.0, &mut rng);
        let (a, b) = (ConvSpec::new(1, 1, 5, 1), ConvSpec::new(1, 1, 1, 5));
        let zero = ConvParams::<f64>::zeros(&a);
        let pb = ConvParams::glorot(&b, &mut rng);
        assert!(asymmetric_conv5(&x, &zero, &pb).unwrap().data().iter().all(|v| *v == 0.0));
        let mut ia = ConvParams::zeros(&a);
        ia.weights.data_mut()[2] = 1.0;
        let mut ib = ConvParams::zeros(&b);
        ib.weights.data_mut()[2] = 1.0;
        assert_eq!(asymmetric_conv5(&x, &ia, &ib).unwrap(), x);
    }
}
