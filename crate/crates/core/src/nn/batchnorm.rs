use crate::error::{bail, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<S: Scalar> BatchNormParams<S> {
    /// gamma 1, beta 0, running statistics of a standard normal.
    pub fn new(channels: usize) -> Self {
        let d = Dims { n: 1, c: channels, h: 1, w: 1 };
        Self {
            gamma: Tensor::filled(d, S::one()),
            beta: Tensor::zeros(d),
            running_mean: Tensor::zeros(d),
            running_var: Tensor::filled(d, S::one()),
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<S> {
    mode: Mode,
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

pub fn batchnorm_forward<S: Scalar>(x: &Tensor<S>, p: &BatchNormParams<S>, mode: Mode) -> Result<(Tensor<S>, BnCache<S>)> {
    let d = x.dims();
    if d.c != p.channels() {
        bail!(Shape, "batchnorm has {} channels, input has {}", p.channels(), d.c);
    }
    let count = d.n * d.plane();
    let mut mean = vec![0.0f64; d.c];
    let mut var = vec![0.0f64; d.c];
    let mut unbiased = vec![0.0f64; d.c];
    match mode {
        Mode::Train => {
            for c in 0..d.c {
                let mut s = 0.0;
                for n in 0..d.n {
                    s += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for n in 0..d.n {
                    ss += x.plane(n, c).iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = ss / count as f64;
                unbiased[c] = if count > 1 { ss / (count - 1) as f64 } else { 0.0 };
            }
        }
        Mode::Infer => {
            for c in 0..d.c {
                mean[c] = p.running_mean.data()[c].as_f64();
                var[c] = p.running_var.data()[c].as_f64();
            }
        }
    }
    let inv_std: Vec<S> = var.iter().map(|v| S::from_f64(1.0 / (v + p.epsilon).sqrt())).collect();
    let mut xhat = Tensor::zeros(d);
    let mut y = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let (m, is) = (S::from_f64(mean[c]), inv_std[c]);
            let (g, b) = (p.gamma.data()[c], p.beta.data()[c]);
            let src = x.plane(n, c);
            let xh = xhat.plane_mut(n, c);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - m) * is;
            }
            let xh = xhat.plane(n, c).to_vec();
            for (o, v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *o = g * v + b;
            }
        }
    }
    y.debug_assert_finite("batchnorm output");
    Ok((y, BnCache { mode, xhat, inv_std, batch_mean: mean, batch_var_unbiased: unbiased }))
}

/// Fold the batch statistics of a training-mode forward pass into the
/// running statistics.
pub fn batchnorm_update_running<S: Scalar>(p: &mut BatchNormParams<S>, cache: &BnCache<S>) {
    if cache.mode != Mode::Train {
        return;
    }
    let mom = p.momentum;
    for c in 0..p.channels() {
        let rm = &mut p.running_mean.data_mut()[c];
        *rm = S::from_f64(mom * rm.as_f64() + (1.0 - mom) * cache.batch_mean[c]);
        let rv = &mut p.running_var.data_mut()[c];
        *rv = S::from_f64(mom * rv.as_f64() + (1.0 - mom) * cache.batch_var_unbiased[c]);
    }
}

/// Forward pass that also updates running statistics in training mode.
pub fn batchnorm<S: Scalar>(x: &Tensor<S>, p: &mut BatchNormParams<S>, mode: Mode) -> Result<(Tensor<S>, BnCache<S>)> {
    let (y, cache) = batchnorm_forward(x, p, mode)?;
    batchnorm_update_running(p, &cache);
    Ok((y, cache))
}

pub fn batchnorm_backward<S: Scalar>(upstream: &Tensor<S>, cache: &BnCache<S>, p: &mut BatchNormParams<S>) -> Result<Tensor<S>> {
    let d = cache.xhat.dims();
    if upstream.dims() != d {
        bail!(Shape, "batchnorm backward: upstream {} vs {}", upstream.dims(), d);
    }
    let count = S::from_usize(d.n * d.plane());
    let mut sum_g = vec![S::zero(); d.c];
    let mut sum_gx = vec![S::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            for (&g, &xh) in upstream.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                sum_g[c] += g;
                sum_gx[c] += g * xh;
            }
        }
    }
    {
        let gg = p.gamma.grad_mut();
        for c in 0..d.c {
            gg[c] += sum_gx[c];
        }
    }
    {
        let bg = p.beta.grad_mut();
        for c in 0..d.c {
            bg[c] += sum_g[c];
        }
    }
    let mut gin = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let gamma = p.gamma.data()[c];
            let is = cache.inv_std[c];
            let up = upstream.plane(n, c);
            let xh = cache.xhat.plane(n, c);
            let out = gin.plane_mut(n, c);
            match cache.mode {
                Mode::Train => {
                    let k = gamma * is / count;
                    for i in 0..out.len() {
                        out[i] = k * (count * up[i] - sum_g[c] - xh[i] * sum_gx[c]);
                    }
                }
                Mode::Infer => {
                    for i in 0..out.len() {
                        out[i] = gamma * is * up[i];
                    }
                }
            }
        }
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn standardized_input_passes_through() {
        // +-1 in equal numbers: zero mean, unit variance per channel
        let d = Dims::new(2, 3, 4, 5).unwrap();
        let mut rng = Rng::new(1);
        let mut x = Tensor::<f64>::zeros(d);
        for n in 0..2 {
            for c in 0..3 {
                let mut signs: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
                rng.shuffle(&mut signs);
                x.plane_mut(n, c).copy_from_slice(&signs);
            }
        }
        let mut p = BatchNormParams::new(3);
        let (y, _) = batchnorm(&x, &mut p, Mode::Train).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::uniform(Dims::new(2, 2, 3, 3).unwrap(), -3.0, 3.0, &mut rng);
        let mut p = BatchNormParams::new(2);
        p.gamma.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.beta.data_mut().copy_from_slice(&[0.5, -1.5]);
        for mode in [Mode::Train, Mode::Infer] {
            let (y, _) = batchnorm(&x, &mut p, mode).unwrap();
            for n in 0..2 {
                assert!(y.plane(n, 0).iter().all(|v| *v == 0.5));
                assert!(y.plane(n, 1).iter().all(|v| *v == -1.5));
            }
        }
    }

    #[test]
    fn running_stats_track_batches() {
        let mut rng = Rng::new(3);
        let mut p = BatchNormParams::<f64>::new(1);
        for _ in 0..200 {
            let x = Tensor::uniform(Dims::new(4, 1, 8, 8).unwrap(), 1.0, 3.0, &mut rng);
            batchnorm(&x, &mut p, Mode::Train).unwrap();
        }
        assert!((p.running_mean.data()[0] - 2.0).abs() < 0.05);
        assert!((p.running_var.data()[0] - 1.0 / 3.0).abs() < 0.05);
        assert!(p.running_var.data()[0] >= 0.0);
    }

    #[test]
    fn infer_mode_uses_running_stats() {
        let mut p = BatchNormParams::<f64>::new(1);
        p.running_mean.data_mut()[0] = 2.0;
        p.running_var.data_mut()[0] = 4.0 - 1e-5;
        let x = Tensor::from_vec(Dims::new(1, 1, 1, 2).unwrap(), vec![2.0, 4.0]).unwrap();
        let (y, _) = batchnorm(&x, &mut p, Mode::Infer).unwrap();
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
        assert_eq!(p.running_mean.data()[0], 2.0);
    }
}
