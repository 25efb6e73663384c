//! Central finite-difference checks for every layer and the full model.
//!
//! Each layer is reduced to a scalar by a fixed random projection
//! `L = Σ r ⊙ y`, so the analytic input/parameter gradients come from one
//! backward call with `r` as the upstream gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::nn::{
    cross_entropy, l2_penalty, softmax_batch, softmax_cross_entropy_grad, AvgPool, BatchNorm, Conv2d, Dense, Dropout,
    InputGeometry, Layer, ModelSpec, Network, Relu, Tensor,
};
use rfp_core::preprocess::PipelineVariant;

const STEP: f64 = 1e-5;
/// Smaller step for the whole network: with thousands of ReLU units a
/// ±1e-5 nudge to a first-layer weight occasionally moves one across zero.
const MODEL_STEP: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between `analytic[i]` and the central difference
/// of `f` when entry `i` is shifted by ±STEP.
fn max_err(analytic: &[f64], mut f: impl FnMut(usize, f64) -> f64) -> f64 {
    analytic
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let num = (f(i, STEP) - f(i, -STEP)) / (2.0 * STEP);
            rel_err(a, num)
        })
        .fold(0.0, f64::max)
}

/// Checks input and parameter gradients of a single layer in train mode.
fn check_layer(mut layer: Layer, x: Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let y = layer.forward_train(&x, None).unwrap();
    let r = random(y.shape(), rng);
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let gx = layer.backward(&r).unwrap().unwrap();
    let objective = |layer: &mut Layer, x: &Tensor| dot(&layer.forward_train(x, None).unwrap(), &r);

    let mut worst = max_err(gx.data(), |i, d| {
        let mut xp = x.clone();
        xp.data_mut()[i] += d;
        objective(&mut layer, &xp)
    });
    let n_params = layer.params_mut().len();
    for k in 0..n_params {
        let analytic = layer.params_mut()[k].grad.data().to_vec();
        let e = max_err(&analytic, |i, d| {
            layer.params_mut()[k].value.data_mut()[i] += d;
            let v = objective(&mut layer, &x);
            layer.params_mut()[k].value.data_mut()[i] -= d;
            v
        });
        worst = worst.max(e);
    }
    worst
}

pub fn conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = Layer::Conv(Conv2d::new(3, 2, 3, 4, &mut rng));
    let x = random(&[2, 5, 4, 3], &mut rng);
    check_layer(layer, x, &mut rng)
}

pub fn pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 7, 5, 2], &mut rng);
    check_layer(Layer::Pool(AvgPool::new(3, 2)), x, &mut rng)
}

pub fn batch_norm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for shape in [vec![4, 6], vec![4, 3, 2, 3]] {
        let mut bn = BatchNorm::new(*shape.last().unwrap());
        for v in bn.gamma.value.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in bn.beta.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x = random(&shape, &mut rng);
        worst = worst.max(check_layer(Layer::Norm(bn), x, &mut rng));
    }
    worst
}

pub fn dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = Layer::Dense(Dense::new(5, 4, &mut rng));
    let x = random(&[3, 5], &mut rng);
    check_layer(layer, x, &mut rng)
}

pub fn relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random(&[3, 8], &mut rng);
    // Keep inputs away from the kink so the central difference is smooth.
    for v in x.data_mut() {
        *v += 0.1 * v.signum();
    }
    check_layer(Layer::Relu(Relu::default()), x, &mut rng)
}

/// Dropout with a frozen mask: the RNG is reseeded for every evaluation.
pub fn dropout(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[4, 10], &mut rng);
    let mut d = Dropout::new(0.5);
    let run = |d: &mut Dropout, x: &Tensor| d.forward_train(x, Some(&mut ChaCha8Rng::seed_from_u64(seed ^ 7)));
    let y = run(&mut d, &x);
    let r = random(y.shape(), &mut rng);
    let gx = d.backward(&r);
    max_err(gx.data(), |i, delta| {
        let mut xp = x.clone();
        xp.data_mut()[i] += delta;
        dot(&run(&mut d, &xp), &r)
    })
}

pub fn softmax_ce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random(&[5, 2], &mut rng);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..2)).collect();
    let g = softmax_cross_entropy_grad(&softmax_batch(&z), &labels).unwrap();
    max_err(g.data(), |i, d| {
        let mut zp = z.clone();
        zp.data_mut()[i] += d;
        cross_entropy(&softmax_batch(&zp), &labels).unwrap()
    })
}

pub fn l2(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&[4, 3], &mut rng);
    let lambda = 1e-2;
    let analytic: Vec<f64> = w.data().iter().map(|v| 2.0 * lambda * v).collect();
    max_err(&analytic, |i, d| {
        let mut wp = w.clone();
        wp.data_mut()[i] += d;
        l2_penalty([&wp], lambda)
    })
}

/// Full reference model (train-mode BN, dropout frozen, L2 on) against
/// finite differences on randomly chosen parameter entries of every tensor.
///
/// Convolution biases feed straight into batch norm, so their true gradient
/// is exactly zero; for those the analytic value must be at roundoff level
/// instead. An entry that misses the tolerance is retried at a ten times
/// smaller step, which only helps when a ReLU kink sat inside the interval.
pub fn full_model(variant: PipelineVariant, seed: u64, entries_per_tensor: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec::reference(variant, InputGeometry::default());
    let conv_tensors = 8 * spec.branches.len();
    let inputs: Vec<Tensor> = spec
        .branches
        .iter()
        .map(|b| random(&[4, b.input[0], b.input[1], b.input[2]], &mut rng))
        .collect();
    let labels = vec![0, 1, 1, 0];
    let mut net = Network::new(spec, seed).unwrap();
    let lambda = 1e-4;
    net.loss_and_grad(&inputs, &labels, lambda, None).unwrap();
    let grads: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        if k < conv_tensors && k % 4 == 1 {
            let largest = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(if largest <= 1e-12 { 0.0 } else { f64::INFINITY });
            continue;
        }
        for _ in 0..entries_per_tensor {
            let i = rng.random_range(0..g.len());
            let mut central = |h: f64| {
                let mut loss_at = |d: f64| {
                    net.params_mut()[k].value.data_mut()[i] += d;
                    let (l, _) = net.loss_and_grad(&inputs, &labels, lambda, None).unwrap();
                    net.params_mut()[k].value.data_mut()[i] -= d;
                    l
                };
                (loss_at(h) - loss_at(-h)) / (2.0 * h)
            };
            let mut err = rel_err(g[i], central(MODEL_STEP));
            if err > 1e-3 {
                err = err.min(rel_err(g[i], central(MODEL_STEP / 10.0)));
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Named per-layer checks, each reporting its worst relative error.
pub fn layer_suite(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv(seed)),
        ("avg_pool", pool(seed)),
        ("batch_norm", batch_norm(seed)),
        ("dense", dense(seed)),
        ("relu", relu(seed)),
        ("dropout", dropout(seed)),
        ("softmax_cross_entropy", softmax_ce(seed)),
        ("l2_penalty", l2(seed)),
    ]
}
