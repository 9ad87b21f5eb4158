//! Finite-difference checks for hand-written backward passes.

use crate::enet::{build_enet, Enet, Role, TensorKind};
use crate::nn::{self, BatchNormParams, ConvParams, ConvSpec, Mode, Padding, PreluParams};
use crate::rng::Rng;
use crate::tensor::{Dims, Tensor};

/// Central-difference step used by the checks.
pub const STEP: f64 = 1e-5;
/// Denominator floor for [`relative_error`] in the suite below.
pub const FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps gradients that are
/// zero up to rounding from producing huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at `t[i]`.
pub fn numeric_partial(t: &mut Tensor<f64>, i: usize, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let orig = t.data()[i];
    t.data_mut()[i] = orig + h;
    let plus = f(t);
    t.data_mut()[i] = orig - h;
    let minus = f(t);
    t.data_mut()[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Largest relative error between `analytic[i]` and the central difference
/// of `f` at every index of `x`.
pub fn max_input_error(x: &Tensor<f64>, analytic: &Tensor<f64>, floor: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut x = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let n = numeric_partial(&mut x, i, STEP, &mut f);
        worst = worst.max(relative_error(analytic.data()[i], n, floor));
    }
    worst
}

/// `<a, b>` over all elements.
pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error of each per-layer check over `instances` random
/// cases.
pub fn layer_suite(instances: usize) -> Vec<(&'static str, f64)> {
    vec![
        ("convolution", convolution(instances)),
        ("batchnorm", batchnorm_both_modes(instances)),
        ("prelu", prelu(instances)),
        ("pool/unpool", pooling_and_unpooling(instances)),
        ("spatial dropout", spatial_dropout_fixed_mask(instances)),
        ("softmax cross-entropy", softmax_cross_entropy(instances)),
    ]
}

fn dims(rng: &mut Rng, c: usize) -> Dims {
    Dims::new(1 + rng.below(2), c, 2 + 2 * rng.below(3), 2 + 2 * rng.below(3)).unwrap()
}

fn check_params(p: &mut Tensor<f64>, analytic: &[f64], mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let n = numeric_partial(p, i, STEP, &mut f);
        worst = worst.max(relative_error(analytic[i], n, FLOOR));
    }
    worst
}

/// Input, weight and bias gradients of every kernel shape the model uses.
pub fn convolution(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(100);
    let configs = [
        (3, 3, 1, 1, Padding::Same),
        (3, 3, 2, 1, Padding::Same),
        (5, 1, 1, 1, Padding::Same),
        (1, 5, 1, 1, Padding::Same),
        (1, 1, 1, 1, Padding::Same),
        (2, 2, 1, 2, Padding::Explicit { h: 0, w: 0 }),
        (3, 3, 1, 2, Padding::Explicit { h: 1, w: 1 }),
    ];
    for k in 0..instances {
        let (kh, kw, dil, st, pad) = configs[k % configs.len()];
        let (ic, oc) = (1 + rng.below(3), 1 + rng.below(3));
        let spec = ConvSpec::new(ic, oc, kh, kw).dilation(dil).stride(st).padding(pad);
        let x = Tensor::uniform(dims(&mut rng, ic).with_hw(6, 8), -1.0, 1.0, &mut rng);
        let mut p = ConvParams::glorot(&spec, &mut rng);
        p.bias = Tensor::uniform(p.bias.dims(), -0.5, 0.5, &mut rng);
        let y = nn::conv2d_forward(&x, &spec, &p).unwrap();
        let up = Tensor::uniform(y.dims(), -1.0, 1.0, &mut rng);
        let gx = nn::conv2d_backward(&up, Some(&x), &spec, &mut p).unwrap();
        let loss = |x: &Tensor<f64>, p: &ConvParams<f64>| dot(&up, &nn::conv2d_forward(x, &spec, p).unwrap());
        let ex = max_input_error(&x, &gx, FLOOR, |x| loss(x, &p));
        let gw = p.weights.grad().unwrap().to_vec();
        let gb = p.bias.grad().unwrap().to_vec();
        let mut w = p.weights.clone();
        let ew = check_params(&mut w, &gw, |w| loss(&x, &ConvParams { weights: w.clone(), bias: p.bias.clone() }));
        let mut b = p.bias.clone();
        let eb = check_params(&mut b, &gb, |b| loss(&x, &ConvParams { weights: p.weights.clone(), bias: b.clone() }));
        worst = worst.max(ex.max(ew).max(eb));
    }
    worst
}

/// Batch normalization in training and inference mode.
pub fn batchnorm_both_modes(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(101);
    for k in 0..instances {
        let mode = if k % 2 == 0 { Mode::Train } else { Mode::Infer };
        let c = 1 + rng.below(3);
        let x = Tensor::uniform(dims(&mut rng, c), -2.0, 2.0, &mut rng);
        let mut p = BatchNormParams::new(c);
        p.gamma = Tensor::uniform(p.gamma.dims(), 0.5, 1.5, &mut rng);
        p.beta = Tensor::uniform(p.beta.dims(), -0.5, 0.5, &mut rng);
        p.running_mean = Tensor::uniform(p.gamma.dims(), -0.5, 0.5, &mut rng);
        p.running_var = Tensor::uniform(p.gamma.dims(), 0.5, 2.0, &mut rng);
        let (y, cache) = nn::batchnorm_forward(&x, &p, mode).unwrap();
        let up = Tensor::uniform(y.dims(), -1.0, 1.0, &mut rng);
        let gx = nn::batchnorm_backward(&up, &cache, &mut p).unwrap();
        let loss = |x: &Tensor<f64>, p: &BatchNormParams<f64>| dot(&up, &nn::batchnorm_forward(x, p, mode).unwrap().0);
        let ex = max_input_error(&x, &gx, FLOOR, |x| loss(x, &p));
        let gg = p.gamma.grad().unwrap().to_vec();
        let gb = p.beta.grad().unwrap().to_vec();
        let base = p.clone();
        let mut g = p.gamma.clone();
        let eg = check_params(&mut g, &gg, |g| loss(&x, &BatchNormParams { gamma: g.clone(), ..base.clone() }));
        let mut b = p.beta.clone();
        let eb = check_params(&mut b, &gb, |b| loss(&x, &BatchNormParams { beta: b.clone(), ..base.clone() }));
        worst = worst.max(ex.max(eg).max(eb));
    }
    worst
}

pub fn prelu(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(102);
    for _ in 0..instances {
        let c = 1 + rng.below(3);
        let x = Tensor::uniform(dims(&mut rng, c), -1.0, 1.0, &mut rng);
        let mut p = PreluParams::new(c);
        p.slope = Tensor::uniform(p.slope.dims(), 0.05, 0.5, &mut rng);
        let up = Tensor::uniform(x.dims(), -1.0, 1.0, &mut rng);
        let gx = nn::prelu_backward(&up, &x, &mut p).unwrap();
        let loss = |x: &Tensor<f64>, p: &PreluParams<f64>| dot(&up, &nn::prelu_forward(x, p).unwrap());
        let ex = max_input_error(&x, &gx, FLOOR, |x| loss(x, &p));
        let gs = p.slope.grad().unwrap().to_vec();
        let mut s = p.slope.clone();
        let es = check_params(&mut s, &gs, |s| loss(&x, &PreluParams { slope: s.clone() }));
        worst = worst.max(ex.max(es));
    }
    worst
}

pub fn pooling_and_unpooling(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(103);
    for _ in 0..instances {
        let c = 1 + rng.below(3);
        let d = Dims::new(1 + rng.below(2), c, 2 + rng.below(5), 2 + rng.below(5)).unwrap();
        let x = Tensor::uniform(d, -1.0, 1.0, &mut rng);
        let (y, idx) = nn::maxpool2x2_forward(&x);
        let up = Tensor::uniform(y.dims(), -1.0, 1.0, &mut rng);
        let gx = nn::maxpool2x2_backward(&up, &idx).unwrap();
        let ep = max_input_error(&x, &gx, FLOOR, |x| dot(&up, &nn::maxpool2x2_forward(x).0));

        let v = Tensor::uniform(y.dims(), -1.0, 1.0, &mut rng);
        let up2 = Tensor::uniform(d, -1.0, 1.0, &mut rng);
        let gv = nn::maxunpool2x2_backward(&up2, &idx).unwrap();
        let eu = max_input_error(&v, &gv, FLOOR, |v| dot(&up2, &nn::maxunpool2x2(v, &idx, d).unwrap()));
        worst = worst.max(ep.max(eu));
    }
    worst
}

/// Spatial dropout with its mask held fixed.
pub fn spatial_dropout_fixed_mask(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(104);
    for k in 0..instances {
        let x = Tensor::uniform(dims(&mut rng, 4), -1.0, 1.0, &mut rng);
        let seed = 500 + k as u64;
        let (y, mask) = nn::spatial_dropout(&x, 0.3, &mut Rng::new(seed), Mode::Train).unwrap();
        let up = Tensor::uniform(y.dims(), -1.0, 1.0, &mut rng);
        let gx = nn::spatial_dropout_backward(&up, mask.as_ref());
        let e = max_input_error(&x, &gx, FLOOR, |x| {
            dot(&up, &nn::spatial_dropout(x, 0.3, &mut Rng::new(seed), Mode::Train).unwrap().0)
        });
        worst = worst.max(e);
    }
    worst
}

/// Softmax followed by weighted pixel cross-entropy, w.r.t. logits.
pub fn softmax_cross_entropy(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(106);
    for _ in 0..instances {
        let logits = Tensor::uniform(dims(&mut rng, 2), -3.0, 3.0, &mut rng);
        let d = logits.dims();
        let labels: Vec<u8> = (0..d.n * d.plane()).map(|_| rng.below(2) as u8).collect();
        let weights = [rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)];
        let probs = logits.channel_softmax().unwrap();
        let (_, g) = nn::pixel_cross_entropy(&probs, &labels, &weights).unwrap();
        let e = max_input_error(&logits, &g, FLOOR, |l| {
            nn::pixel_cross_entropy(&l.channel_softmax().unwrap(), &labels, &weights).unwrap().0
        });
        worst = worst.max(e);
    }
    worst
}

fn sample_model_gradients(model: &mut Enet<f64>, x: &Tensor<f64>, mode: Mode, rng: &mut Rng) -> f64 {
    let d = x.dims();
    let labels: Vec<u8> = (0..d.n * d.plane()).map(|_| rng.below(2) as u8).collect();
    let weights = [1.0, 1.5];
    let loss = |m: &Enet<f64>| -> f64 {
        let (p, _) = m.forward(x, mode, &mut Rng::new(0)).unwrap();
        nn::pixel_cross_entropy(&p, &labels, &weights).unwrap().0
    };
    let (p, cache) = model.forward(x, mode, &mut Rng::new(0)).unwrap();
    let (_, g) = nn::pixel_cross_entropy(&p, &labels, &weights).unwrap();
    model.zero_grad();
    model.backward(&cache, &g).unwrap();

    let params: Vec<(usize, usize)> = model
        .named()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.kind == TensorKind::Param)
        .flat_map(|(t, n)| (0..n.tensor.len()).map(move |i| (t, i)))
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..64 {
        let (t, i) = params[rng.below(params.len())];
        let analytic = model.named()[t].tensor.grad().unwrap()[i];
        let orig = model.named()[t].tensor.data()[i];
        let mut probe = model.clone();
        probe.named_mut()[t].tensor.data_mut()[i] = orig + STEP;
        let plus = loss(&probe);
        probe.named_mut()[t].tensor.data_mut()[i] = orig - STEP;
        let minus = loss(&probe);
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic, numeric, FLOOR));
    }
    worst
}

/// End to end through all 17 layers on a `(1,1,8,8)` input. Batchnorm runs on running statistics:
/// the deepest maps of an 8x8 input are 1x1, where batch statistics of a
/// single sample are degenerate.
pub fn whole_model_inference() -> f64 {
    let mut rng = Rng::new(107);
    let mut model = build_enet::<f64>(Role::Region, 0.25, 1, &mut rng).unwrap();
    // move the running statistics and affine terms away from the identity
    for n in model.named_mut() {
        let d = n.tensor.dims();
        if n.name.ends_with("running_var") || n.name.ends_with("gamma") {
            *n.tensor = Tensor::uniform(d, 0.5, 1.5, &mut rng);
        } else if n.name.ends_with("running_mean") || n.name.ends_with("beta") || n.name.ends_with("bias") {
            *n.tensor = Tensor::uniform(d, -0.2, 0.2, &mut rng);
        }
    }
    let x = Tensor::uniform(Dims::new(1, 1, 8, 8).unwrap(), 0.0, 1.0, &mut rng);
    sample_model_gradients(&mut model, &x, Mode::Infer, &mut rng)
}

/// Training mode on a `(2,2,16,16)` fusion input: batch statistics and dropout masks are part of the graph.
pub fn whole_model_training() -> f64 {
    let mut rng = Rng::new(108);
    let mut model = build_enet::<f64>(Role::Fusion, 0.25, 2, &mut rng).unwrap();
    let x = Tensor::uniform(Dims::new(2, 2, 16, 16).unwrap(), 0.0, 1.0, &mut rng);
    sample_model_gradients(&mut model, &x, Mode::Train, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn quadratic_partial() {
        let mut t = Tensor::from_vec(Dims::new(1, 1, 1, 2).unwrap(), vec![3.0, -1.0]).unwrap();
        let d = numeric_partial(&mut t, 0, 1e-4, |t| t.data()[0].powi(2) + t.data()[1]);
        assert!((d - 6.0).abs() < 1e-8);
        assert_eq!(t.data(), &[3.0, -1.0]);
        assert!(relative_error(1.0, 1.0 + 1e-9, 1e-6) < 1e-8);
        assert_eq!(relative_error(0.0, 1e-12, 1e-6), 1e-6);
    }
}
