//! Oracles and fixtures shared by the integration tests. Everything here is
//! written from the formulas directly and never calls the code it checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapnet::autograd::gradcheck::{central_difference, relative_error};
use sapnet::autograd::{Tape, Tensor, Var};
use sapnet::derain::{DerainWeights, ModelConfig};
use sapnet::ImageTensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    ImageTensor::from_tensor(random_tensor(&[3, h, w], 0.0, 1.0, seed))
}

/// Relative error between the tape gradient of `f` at `at` and central
/// differences of its forward value.
pub fn input_gradcheck(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, at: &Tensor) -> f64 {
    let tape = Tape::new();
    let x = tape.input(at.clone());
    let out = f(x);
    let grads = tape.backward(out);
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(at.shape().to_vec()));
    let numeric = central_difference(
        |t| {
            let tape = Tape::new();
            f(tape.constant(t)).item()
        },
        at,
        FD_STEP,
    );
    relative_error(&analytic, &numeric)
}

/// Relative error of the gradient of `loss` with respect to the tensors of
/// `state` (as listed by `tensors`), checked on up to `samples` evenly
/// spaced entries per tensor.
pub fn param_gradcheck<S: Clone>(
    state: &S,
    tensors: fn(&mut S) -> Vec<&mut Tensor>,
    samples: usize,
    loss: impl for<'t> Fn(&'t Tape, &S) -> Var<'t>,
) -> f64 {
    let mut own = state.clone();
    let tape = Tape::new();
    let out = loss(&tape, &own);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = tensors(&mut own).into_iter().map(|t| grads.param_or_zeros(t)).collect();
    let value = |s: &S| {
        let tape = Tape::new();
        loss(&tape, s).item()
    };
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (ti, grad) in analytic.iter().enumerate() {
        let numel = grad.numel();
        let stride = (numel / samples).max(1);
        for idx in (0..numel).step_by(stride).take(samples) {
            let orig = tensors(&mut own)[ti].data()[idx];
            tensors(&mut own)[ti].data_mut()[idx] = orig + FD_STEP;
            let up = value(&own);
            tensors(&mut own)[ti].data_mut()[idx] = orig - FD_STEP;
            let down = value(&own);
            tensors(&mut own)[ti].data_mut()[idx] = orig;
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(grad.data()[idx]);
        }
    }
    let len = a.len();
    relative_error(&Tensor::from_vec([len], a), &Tensor::from_vec([len], n))
}

pub fn derain_tensors(w: &mut DerainWeights) -> Vec<&mut Tensor> {
    w.tensors_mut()
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Closed-form parameter count of the derain network, layer by layer.
pub fn param_count_oracle(cfg: &ModelConfig) -> usize {
    let (c, k) = (cfg.channels, cfg.kernel);
    let input = conv_params(6, c, k);
    let lstm = 4 * conv_params(2 * c, c, k) + 3 * c;
    let hidden = c.div_ceil(cfg.reduction);
    let attention = match cfg.attention {
        sapnet::attention::AttentionKind::None => 0,
        _ => (c * hidden + hidden) + (hidden * c + c),
    };
    let blocks = cfg.dilations.len() * cfg.block_repeats * (conv_params(c, c, k) + attention);
    let output = conv_params(c, 3, k);
    input + lstm + blocks + output
}

/// Mean SSIM by explicit loops: 11x11 Gaussian window (sigma 1.5), valid
/// positions only, per channel, `C1 = 0.01^2`, `C2 = 0.03^2`.
pub fn naive_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    const N: usize = 11;
    let mut g = [[0.0; N]; N];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = a.dims();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for y in 0..=h - N {
            for x in 0..=w - N {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in g.iter().enumerate() {
                    for (j, &gij) in row.iter().enumerate() {
                        let wt = gij / total;
                        let p = a.get(ch, y + i, x + j);
                        let q = b.get(ch, y + i, x + j);
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Four 32x32 synthetic pairs used by the training checks.
pub fn smoke_pairs() -> Vec<sapnet::data::PairedSample> {
    sapnet::data::synthetic_pairs(4, 32, &sapnet::data::RainParams::default(), 7)
}
