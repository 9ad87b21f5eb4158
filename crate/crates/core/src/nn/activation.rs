use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

/// Per-channel slope applied to negative inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreluParams<S> {
    pub slope: Tensor<S>,
}

impl<S: Scalar> PreluParams<S> {
    pub fn new(channels: usize) -> Self {
        Self { slope: Tensor::filled(Dims { n: 1, c: channels, h: 1, w: 1 }, S::from_f64(0.25)) }
    }
}

pub fn prelu_forward<S: Scalar>(x: &Tensor<S>, p: &PreluParams<S>) -> Result<Tensor<S>> {
    let d = x.dims();
    if d.c != p.slope.len() {
        bail!(Shape, "prelu has {} slopes, input has {} channels", p.slope.len(), d.c);
    }
    let mut y = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let a = p.slope.data()[c];
            y.plane_mut(n, c).iter_mut().for_each(|v| {
                if *v <= S::zero() {
                    *v = a * *v;
                }
            });
        }
    }
    Ok(y)
}

pub fn prelu_backward<S: Scalar>(upstream: &Tensor<S>, input: &Tensor<S>, p: &mut PreluParams<S>) -> Result<Tensor<S>> {
    let d = input.dims();
    if upstream.dims() != d {
        bail!(Shape, "prelu backward: upstream {} vs {}", upstream.dims(), d);
    }
    let mut gin = upstream.clone();
    let mut slope_grad = vec![S::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let a = p.slope.data()[c];
            let xs = input.plane(n, c);
            for (g, &xv) in gin.plane_mut(n, c).iter_mut().zip(xs) {
                if xv <= S::zero() {
                    slope_grad[c] += *g * xv;
                    *g = a * *g;
                }
            }
        }
    }
    let sg = p.slope.grad_mut();
    for c in 0..d.c {
        sg[c] += slope_grad[c];
    }
    Ok(gin)
}
