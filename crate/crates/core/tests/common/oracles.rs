//! Independent reference computations shared by the integration suites.

use ndarray::{Array2, Array3, Array4, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfp_core::preprocess::{dft1_time, dft2_shift, PipelineVariant, Preprocessor};
use rfp_core::CsiWindow;

/// Direct double sum, zero frequency at `(rows/2, cols/2)`.
pub fn naive_dft2_shift(x: &Array2<f64>) -> Array2<Complex64> {
    let (r, c) = x.dim();
    let mut out = Array2::zeros((r, c));
    for u in 0..r {
        for v in 0..c {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..r {
                for b in 0..c {
                    let ang = -std::f64::consts::TAU * ((u * a) as f64 / r as f64 + (v * b) as f64 / c as f64);
                    acc += x[[a, b]] * Complex64::from_polar(1.0, ang);
                }
            }
            out[[(u + r / 2) % r, (v + c / 2) % c]] = acc;
        }
    }
    out
}

pub fn naive_dft1_shift(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for m in 0..n {
        let acc: Complex64 = x
            .iter()
            .enumerate()
            .map(|(i, &v)| v * Complex64::from_polar(1.0, -std::f64::consts::TAU * (m * i) as f64 / n as f64))
            .sum();
        out[(m + n / 2) % n] = acc;
    }
    out
}

pub fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let scale = b.iter().map(|v| v.norm()).fold(1e-300, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

pub fn random_window(rng: &mut ChaCha8Rng, len: usize, n_f: usize) -> CsiWindow {
    let x = Array4::from_shape_fn((len, n_f, 3, 3), |_| {
        Complex64::from_polar(rng.random_range(0.2..2.0), rng.random_range(-3.2..3.2))
    });
    CsiWindow {
        first_timestamp_us: 0,
        last_timestamp_us: 1_270_000,
        x,
        label: None,
    }
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Applies a random common rotation per frame and a random rotation per
/// (frame, subcarrier) shared by all receive antennas.
pub fn common_phase_impairments(w: &CsiWindow, rng: &mut ChaCha8Rng) -> CsiWindow {
    let mut hurt = w.clone();
    for (i, mut frame) in hurt.x.axis_iter_mut(Axis(0)).enumerate() {
        let cfo = Complex64::from_polar(1.0, rng.random_range(-10.0..10.0) * (i + 1) as f64);
        for mut sub in frame.axis_iter_mut(Axis(0)) {
            let sto = Complex64::from_polar(1.0, rng.random_range(-3.2..3.2));
            sub.mapv_inplace(|z| z * cfo * sto);
        }
    }
    hurt
}

/// Worst relative error of `dft2_shift` against the direct sum over random
/// inputs up to 16 x 8.
pub fn dft2_worst_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (r, c) = (rng.random_range(1..=16), rng.random_range(1..=8));
        let x = Array2::from_shape_fn((r, c), |_| rng.random_range(-5.0..5.0));
        let fast = dft2_shift(x.view());
        let slow = naive_dft2_shift(&x);
        worst = worst.max(rel_err(fast.as_slice().unwrap(), slow.as_slice().unwrap()));
    }
    worst
}

pub fn dft1_worst_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..=16);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        worst = worst.max(rel_err(&dft1_time(&x), &naive_dft1_shift(&x)));
    }
    worst
}

/// Largest change of either reference input under common phase impairments.
pub fn impairment_worst_change(seed: u64, windows: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pre = Preprocessor::new(128, 14, 50).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..windows {
        let w = random_window(&mut rng, 128, 14);
        let clean = pre.make_input(&w, PipelineVariant::WithDft).unwrap();
        let hurt = common_phase_impairments(&w, &mut rng);
        let got = pre.make_input(&hurt, PipelineVariant::WithDft).unwrap();
        for (a, b) in got.tensors.iter().zip(&clean.tensors) {
            worst = worst.max(max_abs_diff(a, b));
        }
    }
    worst
}
