use crate::error::{bail, Result};
use crate::nn::Mode;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-(sample, channel) multipliers: 0 for dropped channels, `1/(1-rate)`
/// for survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<S> {
    pub scale: Vec<S>,
}

impl<S: Scalar> DropoutMask<S> {
    pub fn kept(&self) -> usize {
        self.scale.iter().filter(|s| **s != S::zero()).count()
    }
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        bail!(Parameter, "dropout rate must lie in [0, 1), got {rate}");
    }
    Ok(())
}

/// Spatial dropout: whole channels are zeroed. Inference mode and rate 0 are
/// the identity.
pub fn spatial_dropout<S: Scalar>(
    x: &Tensor<S>,
    rate: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<(Tensor<S>, Option<DropoutMask<S>>)> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let d = x.dims();
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let scale: Vec<S> = (0..d.n * d.c).map(|_| if rng.bernoulli(rate) { S::zero() } else { keep }).collect();
    let mut y = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let s = scale[n * d.c + c];
            y.plane_mut(n, c).iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok((y, Some(DropoutMask { scale })))
}

pub fn spatial_dropout_backward<S: Scalar>(upstream: &Tensor<S>, mask: Option<&DropoutMask<S>>) -> Tensor<S> {
    let Some(mask) = mask else {
        return upstream.clone();
    };
    let d = upstream.dims();
    let mut g = upstream.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let s = mask.scale[n * d.c + c];
            g.plane_mut(n, c).iter_mut().for_each(|v| *v *= s);
        }
    }
    g
}
