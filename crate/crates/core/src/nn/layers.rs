use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{NnError, Param, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;


fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<(), NnError> {
    if x.shape().len() != rank {
        return Err(NnError::ShapeMismatch(format!(
            "{what} expects rank {rank}, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Valid-padding 2-D convolution. Weights are stored `kh × kw × C_in × C_out`
/// so the innermost loop runs over output channels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    /// Skip the input gradient (first layer of a branch).
    pub input_grad: bool,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = uniform_init(&[kh, kw, cin, cout], kh * kw * cin, rng);
        Self::from_weights(weight, Tensor::zeros(&[cout])).expect("consistent shapes")
    }

    /// From an HWIO weight tensor and a bias vector.
    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self, NnError> {
        let &[kh, kw, cin, cout] = weight.shape() else {
            return Err(NnError::ShapeMismatch(format!("conv weight {:?}", weight.shape())));
        };
        if bias.shape() != [cout] {
            return Err(NnError::ShapeMismatch(format!("conv bias {:?}", bias.shape())));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            input_grad: true,
            kh,
            kw,
            cin,
            cout,
            cache: None,
        })
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.cin, self.cout)
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize), NnError> {
        expect_rank(x, 4, "conv2d")?;
        let &[n, h, w, c] = x.shape() else { unreachable!() };
        if c != self.cin {
            return Err(NnError::ShapeMismatch(format!("conv2d expects {} channels, got {c}", self.cin)));
        }
        if self.kh > h || self.kw > w {
            return Err(NnError::KernelLargerThanInput {
                kh: self.kh,
                kw: self.kw,
                h,
                w,
            });
        }
        Ok((n, h, w, h - self.kh + 1, w - self.kw + 1))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (n, h, w, ho, wo) = self.geometry(x)?;
        let mut out = vec![0.0; n * ho * wo * self.cout];
        let in_stride = h * w * self.cin;
        out.par_chunks_mut(ho * wo * self.cout)
            .zip(x.data().par_chunks(in_stride))
            .for_each(|(o, xs)| self.forward_sample(xs, w, ho, wo, o));
        Tensor::new(vec![n, ho, wo, self.cout], out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn forward_sample(&self, x: &[f64], w: usize, ho: usize, wo: usize, out: &mut [f64]) {
        match self.cout {
            8 => self.forward_fixed::<8>(x, w, ho, wo, out),
            16 => self.forward_fixed::<16>(x, w, ho, wo, out),
            _ => self.forward_any(x, w, ho, wo, out),
        }
    }

    fn forward_fixed<const C: usize>(&self, x: &[f64], w: usize, ho: usize, wo: usize, out: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            unsafe { self.forward_fixed_avx2::<C>(x, w, ho, wo, out) };
            return;
        }
        self.forward_fixed_body::<C>(x, w, ho, wo, out)
    }

    /// Same arithmetic in the same order, only wider vectors; the results
    /// are bit-identical to the baseline build.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn forward_fixed_avx2<const C: usize>(&self, x: &[f64], w: usize, ho: usize, wo: usize, out: &mut [f64]) {
        self.forward_fixed_body::<C>(x, w, ho, wo, out)
    }

    /// Output channels known at compile time so the accumulators stay in
    /// registers. Neighbouring output pixels are computed in pairs to
    /// give the adds independent dependency chains; each output still sums
    /// bias, then taps in (ky, kx, ci) order.
    #[inline(always)]
    fn forward_fixed_body<const C: usize>(&self, x: &[f64], w: usize, ho: usize, wo: usize, out: &mut [f64]) {
        const P: usize = 2;
        for y in 0..ho {
            let mut xo = 0;
            while xo + P <= wo {
                self.pixels::<C, P>(x, w, y, xo, &mut out[(y * wo + xo) * C..][..P * C]);
                xo += P;
            }
            for xo in xo..wo {
                self.pixels::<C, 1>(x, w, y, xo, &mut out[(y * wo + xo) * C..][..C]);
            }
        }
    }

    #[inline(always)]
    fn pixels<const C: usize, const P: usize>(&self, x: &[f64], w: usize, y: usize, xo: usize, out: &mut [f64]) {
        let (cin, row) = (self.cin, self.kw * self.cin);
        let b: &[f64; C] = self.bias.value.data().try_into().expect("bias length");
        let mut acc = [*b; P];
        for (ky, wk) in self.weight.value.data().chunks_exact(row * C).enumerate() {
            let xin = &x[((y + ky) * w + xo) * cin..][..row + (P - 1) * cin];
            for (e, ww) in wk.chunks_exact(C).enumerate() {
                for (p, acc) in acc.iter_mut().enumerate() {
                    let a = xin[p * cin + e];
                    for (s, &v) in acc.iter_mut().zip(ww) {
                        *s += a * v;
                    }
                }
            }
        }
        for (o, acc) in out.chunks_exact_mut(C).zip(&acc) {
            o.copy_from_slice(acc);
        }
    }

    fn forward_any(&self, x: &[f64], w: usize, ho: usize, wo: usize, out: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        let row = self.kw * cin;
        let wt = self.weight.value.data();
        let b = self.bias.value.data();
        for y in 0..ho {
            for xo in 0..wo {
                let o = &mut out[(y * wo + xo) * cout..][..cout];
                o.copy_from_slice(b);
                for ky in 0..self.kh {
                    let xin = &x[((y + ky) * w + xo) * cin..][..row];
                    let wk = &wt[ky * row * cout..][..row * cout];
                    for (&a, ww) in xin.iter().zip(wk.chunks_exact(cout)) {
                        for (s, &v) in o.iter_mut().zip(ww) {
                            *s += a * v;
                        }
                    }
                }
            }
        }
    }

    /// Accumulates weight/bias gradients; returns the input gradient unless
    /// `input_grad` is off.
    pub fn backward(&mut self, g: &Tensor) -> Result<Option<Tensor>, NnError> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("conv2d backward without forward".into()))?;
        let (n, h, w, ho, wo) = self.geometry(&x)?;
        if g.shape() != [n, ho, wo, self.cout] {
            return Err(NnError::ShapeMismatch(format!("conv2d grad {:?}", g.shape())));
        }
        let in_stride = h * w * self.cin;
        let want_gx = self.input_grad;
        let wlen = self.weight.value.len();
        let this = &*self;
        // Per-sample partial sums reduced in sample order keep the result
        // independent of the thread count.
        let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = x
            .data()
            .par_chunks(in_stride)
            .zip(g.data().par_chunks(ho * wo * this.cout))
            .map(|(xs, gs)| {
                let mut gx = if want_gx { vec![0.0; in_stride] } else { Vec::new() };
                let mut gw = vec![0.0; wlen];
                let mut gb = vec![0.0; this.cout];
                this.backward_sample(xs, gs, w, ho, wo, &mut gx, &mut gw, &mut gb);
                (gx, gw, gb)
            })
            .collect();
        let mut gx_all = Vec::with_capacity(if want_gx { n * in_stride } else { 0 });
        for (gx, gw, gb) in parts {
            for (a, b) in self.weight.grad.data_mut().iter_mut().zip(&gw) {
                *a += b;
            }
            for (a, b) in self.bias.grad.data_mut().iter_mut().zip(&gb) {
                *a += b;
            }
            gx_all.extend(gx);
        }
        if want_gx {
            Ok(Some(Tensor::new(x.shape().to_vec(), gx_all)?))
        } else {
            Ok(None)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_sample(
        &self,
        x: &[f64],
        g: &[f64],
        w: usize,
        ho: usize,
        wo: usize,
        gx: &mut [f64],
        gw: &mut [f64],
        gb: &mut [f64],
    ) {
        match self.cout {
            8 => self.backward_fixed::<8>(x, g, w, ho, wo, gx, gw, gb),
            16 => self.backward_fixed::<16>(x, g, w, ho, wo, gx, gw, gb),
            _ => self.backward_any(x, g, w, ho, wo, gx, gw, gb),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_fixed<const C: usize>(
        &self,
        x: &[f64],
        g: &[f64],
        w: usize,
        ho: usize,
        wo: usize,
        gx: &mut [f64],
        gw: &mut [f64],
        gb: &mut [f64],
    ) {
        let (cin, row) = (self.cin, self.kw * self.cin);
        let wt = self.weight.value.data();
        let want_gx = !gx.is_empty();
        for (p, go) in g.chunks_exact(C).enumerate().take(ho * wo) {
            let go: &[f64; C] = go.try_into().expect("block");
            let (y, xo) = (p / wo, p % wo);
            for (b, &v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for (ky, (gwk, wk)) in gw.chunks_exact_mut(row * C).zip(wt.chunks_exact(row * C)).enumerate() {
                let base = ((y + ky) * w + xo) * cin;
                for (&a, gwr) in x[base..][..row].iter().zip(gwk.chunks_exact_mut(C)) {
                    for (s, &v) in gwr.iter_mut().zip(go) {
                        *s += a * v;
                    }
                }
                if want_gx {
                    for (d, wr) in gx[base..][..row].iter_mut().zip(wk.chunks_exact(C)) {
                        *d += wr.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_any(
        &self,
        x: &[f64],
        g: &[f64],
        w: usize,
        ho: usize,
        wo: usize,
        gx: &mut [f64],
        gw: &mut [f64],
        gb: &mut [f64],
    ) {
        let (cin, cout) = (self.cin, self.cout);
        let row = self.kw * cin;
        let wt = self.weight.value.data();
        let want_gx = !gx.is_empty();
        for y in 0..ho {
            for xo in 0..wo {
                let go = &g[(y * wo + xo) * cout..][..cout];
                for (b, &v) in gb.iter_mut().zip(go) {
                    *b += v;
                }
                for ky in 0..self.kh {
                    let base = ((y + ky) * w + xo) * cin;
                    let xin = &x[base..][..row];
                    let off = ky * row * cout;
                    let gwk = &mut gw[off..][..row * cout];
                    let wk = &wt[off..][..row * cout];
                    for (e, &a) in xin.iter().enumerate() {
                        for (gg, &v) in gwk[e * cout..][..cout].iter_mut().zip(go) {
                            *gg += a * v;
                        }
                    }
                    if want_gx {
                        for (e, d) in gx[base..][..row].iter_mut().enumerate() {
                            *d += wk[e * cout..][..cout].iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping average pooling; trailing rows/columns are dropped.
#[derive(Debug, Clone)]
pub struct AvgPool {
    pub ph: usize,
    pub pw: usize,
    cache: Option<Vec<usize>>,
}

impl AvgPool {
    pub fn new(ph: usize, pw: usize) -> Self {
        Self { ph, pw, cache: None }
    }

    fn geometry(&self, shape: &[usize]) -> Result<[usize; 4], NnError> {
        let &[_, h, w, _] = shape else {
            return Err(NnError::ShapeMismatch(format!("avg_pool expects rank 4, got {shape:?}")));
        };
        if self.ph > h || self.pw > w || self.ph == 0 || self.pw == 0 {
            return Err(NnError::PoolLargerThanInput {
                ph: self.ph,
                pw: self.pw,
                h,
                w,
            });
        }
        Ok([shape[0], h / self.ph, w / self.pw, shape[3]])
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let [n, ho, wo, c] = self.geometry(x.shape())?;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let scale = 1.0 / (self.ph * self.pw) as f64;
        let mut out = vec![0.0; n * ho * wo * c];
        let xd = x.data();
        for s in 0..n {
            for y in 0..ho {
                for xo in 0..wo {
                    let o = &mut out[((s * ho + y) * wo + xo) * c..][..c];
                    for dy in 0..self.ph {
                        for dx in 0..self.pw {
                            let src = &xd[((s * h + y * self.ph + dy) * w + xo * self.pw + dx) * c..][..c];
                            for (a, b) in o.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    o.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        Tensor::new(vec![n, ho, wo, c], out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let out = self.infer(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor, NnError> {
        let shape = self
            .cache
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("avg_pool backward without forward".into()))?;
        let [n, ho, wo, c] = self.geometry(&shape)?;
        if g.shape() != [n, ho, wo, c] {
            return Err(NnError::ShapeMismatch(format!("avg_pool grad {:?}", g.shape())));
        }
        let (h, w) = (shape[1], shape[2]);
        let scale = 1.0 / (self.ph * self.pw) as f64;
        let mut gx = Tensor::zeros(&shape);
        let gd = gx.data_mut();
        for s in 0..n {
            for y in 0..ho {
                for xo in 0..wo {
                    let go = &g.data()[((s * ho + y) * wo + xo) * c..][..c];
                    for dy in 0..self.ph {
                        for dx in 0..self.pw {
                            let dst = &mut gd[((s * h + y * self.ph + dy) * w + xo * self.pw + dx) * c..][..c];
                            for (a, b) in dst.iter_mut().zip(go) {
                                *a = b * scale;
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Batch normalization over the last axis (channels or neurons).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[features], 1.0)),
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &Tensor) -> Result<usize, NnError> {
        let f = self.features();
        if x.shape().last() != Some(&f) {
            return Err(NnError::ShapeMismatch(format!(
                "batch norm over {f} features, got {:?}",
                x.shape()
            )));
        }
        Ok(f)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let f = self.check(x)?;
        let scale: Vec<f64> = (0..f)
            .map(|k| self.gamma.value.data()[k] / (self.running_var.data()[k] + self.eps).sqrt())
            .collect();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(f) {
            for k in 0..f {
                row[k] = (row[k] - self.running_mean.data()[k]) * scale[k] + self.beta.value.data()[k];
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let f = self.check(x)?;
        if x.batch() < 2 {
            return Err(NnError::DegenerateBatch(x.batch()));
        }
        let m = (x.len() / f) as f64;
        let mut mean = vec![0.0; f];
        for row in x.data().chunks(f) {
            for (a, b) in mean.iter_mut().zip(row) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; f];
        for row in x.data().chunks(f) {
            for k in 0..f {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for row in xhat.chunks_mut(f) {
            for k in 0..f {
                row[k] = (row[k] - mean[k]) * inv_std[k];
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(f) {
            for k in 0..f {
                row[k] = row[k] * self.gamma.value.data()[k] + self.beta.value.data()[k];
            }
        }
        let mo = self.momentum;
        for k in 0..f {
            let rm = &mut self.running_mean.data_mut()[k];
            *rm = mo * *rm + (1.0 - mo) * mean[k];
            let rv = &mut self.running_var.data_mut()[k];
            *rv = mo * *rv + (1.0 - mo) * var[k];
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        });
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor, NnError> {
        let c = self
            .cache
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("batch norm backward without forward".into()))?;
        if g.shape() != c.shape.as_slice() {
            return Err(NnError::ShapeMismatch(format!("batch norm grad {:?}", g.shape())));
        }
        let f = self.features();
        let m = (g.len() / f) as f64;
        let mut dbeta = vec![0.0; f];
        let mut dgamma = vec![0.0; f];
        for (grow, xrow) in g.data().chunks(f).zip(c.xhat.chunks(f)) {
            for k in 0..f {
                dbeta[k] += grow[k];
                dgamma[k] += grow[k] * xrow[k];
            }
        }
        let mut gx = g.data().to_vec();
        for (grow, xrow) in gx.chunks_mut(f).zip(c.xhat.chunks(f)) {
            for k in 0..f {
                let s = self.gamma.value.data()[k] * c.inv_std[k] / m;
                grow[k] = s * (m * grow[k] - dbeta[k] - xrow[k] * dgamma[k]);
            }
        }
        for k in 0..f {
            self.beta.grad.data_mut()[k] += dbeta[k];
            self.gamma.grad.data_mut()[k] += dgamma[k];
        }
        Tensor::new(c.shape, gx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.infer(x)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor, NnError> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("relu backward without forward".into()))?;
        let mut gx = g.clone();
        for (v, &keep) in gx.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(gx)
    }
}

/// Inverted dropout: kept units are scaled by `1/(1−p)` in training, the
/// layer is the identity at inference. Training without an RNG freezes the
/// layer to the identity as well.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward_train(&mut self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Tensor {
        let Some(rng) = rng else {
            self.mask = None;
            return x.clone();
        };
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let mut out = x.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut gx = g.clone();
        if let Some(mask) = self.mask.take() {
            for (v, m) in gx.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
        }
        gx
    }
}

/// Fully connected layer, weights `in × out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(uniform_init(&[din, dout], din, rng)),
            bias: Param::new(Tensor::zeros(&[dout])),
            cache: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weight.value.shape()[0], self.weight.value.shape()[1])
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (din, dout) = self.dims();
        if x.shape().len() != 2 || x.shape()[1] != din {
            return Err(NnError::ShapeMismatch(format!("dense {din}→{dout} got {:?}", x.shape())));
        }
        let n = x.batch();
        let xm = ArrayView2::from_shape((n, din), x.data()).expect("rank 2");
        let mut out = Array2::zeros((n, dout));
        for mut r in out.rows_mut() {
            r.assign(&ArrayView1::from(self.bias.value.data()));
        }
        general_mat_mul(1.0, &xm, &self.matrix(), 1.0, &mut out);
        Tensor::new(vec![n, dout], out.into_raw_vec_and_offset().0)
    }

    fn matrix(&self) -> ArrayView2<'_, f64> {
        let (din, dout) = self.dims();
        ArrayView2::from_shape((din, dout), self.weight.value.data()).expect("rank 2")
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor, NnError> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("dense backward without forward".into()))?;
        let (din, dout) = self.dims();
        let n = x.batch();
        if g.shape() != [n, dout] {
            return Err(NnError::ShapeMismatch(format!("dense grad {:?}", g.shape())));
        }
        let xm = ArrayView2::from_shape((n, din), x.data()).expect("rank 2");
        let gm = ArrayView2::from_shape((n, dout), g.data()).expect("rank 2");
        let mut gx = Array2::zeros((n, din));
        general_mat_mul(1.0, &gm, &self.matrix().t(), 0.0, &mut gx);
        let mut gw = ArrayViewMut2::from_shape((din, dout), self.weight.grad.data_mut()).expect("rank 2");
        general_mat_mul(1.0, &xm.t(), &gm, 1.0, &mut gw);
        for (b, v) in self.bias.grad.data_mut().iter_mut().zip(gm.sum_axis(Axis(0))) {
            *b += v;
        }
        Tensor::new(x.shape().to_vec(), gx.into_raw_vec_and_offset().0)
    }
}

/// One stage of a branch or of the classifier head.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Pool(AvgPool),
    Norm(BatchNorm),
    Relu(Relu),
    Dense(Dense),
    Dropout(Dropout),
}

impl Layer {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::Pool(l) => l.infer(x),
            Layer::Norm(l) => l.infer(x),
            Layer::Relu(l) => Ok(l.infer(x)),
            Layer::Dense(l) => l.infer(x),
            Layer::Dropout(_) => Ok(x.clone()),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor, NnError> {
        match self {
            Layer::Conv(l) => l.forward_train(x),
            Layer::Pool(l) => l.forward_train(x),
            Layer::Norm(l) => l.forward_train(x),
            Layer::Relu(l) => Ok(l.forward_train(x)),
            Layer::Dense(l) => l.forward_train(x),
            Layer::Dropout(l) => Ok(l.forward_train(x, rng)),
        }
    }

    /// Returns `None` only for a convolution with `input_grad` disabled.
    pub fn backward(&mut self, g: &Tensor) -> Result<Option<Tensor>, NnError> {
        match self {
            Layer::Conv(l) => l.backward(g),
            Layer::Pool(l) => l.backward(g).map(Some),
            Layer::Norm(l) => l.backward(g).map(Some),
            Layer::Relu(l) => l.backward(g).map(Some),
            Layer::Dense(l) => l.backward(g).map(Some),
            Layer::Dropout(l) => Ok(Some(l.backward(g))),
        }
    }

    /// Trainable parameters in declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Norm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// All stored tensors (parameters plus running statistics) in
    /// declaration order.
    pub fn state(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(l) => vec![&l.weight.value, &l.bias.value],
            Layer::Norm(l) => vec![&l.gamma.value, &l.beta.value, &l.running_mean, &l.running_var],
            Layer::Dense(l) => vec![&l.weight.value, &l.bias.value],
            _ => Vec::new(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::Norm(l) => vec![
                &mut l.gamma.value,
                &mut l.beta.value,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            Layer::Dense(l) => vec![&mut l.weight.value, &mut l.bias.value],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_valid_padding_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 3, 9, 8, &mut rng);
        let out = conv.infer(&Tensor::zeros(&[2, 50, 14, 9])).unwrap();
        assert_eq!(out.shape(), &[2, 48, 12, 8]);
    }

    #[test]
    fn conv_rejects_large_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(5, 3, 1, 1, &mut rng);
        assert!(matches!(
            conv.infer(&Tensor::zeros(&[1, 4, 4, 1])),
            Err(NnError::KernelLargerThanInput { .. })
        ));
    }

    #[test]
    fn pool_shapes_and_constant() {
        let out = AvgPool::new(2, 1).infer(&Tensor::filled(&[1, 48, 12, 3], 2.5)).unwrap();
        assert_eq!(out.shape(), &[1, 24, 12, 3]);
        assert!(out.data().iter().all(|&v| v == 2.5));
        let out = AvgPool::new(3, 1).infer(&Tensor::zeros(&[1, 22, 10, 1])).unwrap();
        assert_eq!(out.shape(), &[1, 7, 10, 1]);
        assert!(matches!(
            AvgPool::new(3, 1).infer(&Tensor::zeros(&[1, 2, 2, 1])),
            Err(NnError::PoolLargerThanInput { .. })
        ));
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 3 * 2 * 5).map(|_| rng.random_range(-4.0..9.0)).collect();
        let x = Tensor::new(vec![4, 3, 2, 5], data).unwrap();
        let mut bn = BatchNorm::new(5);
        bn.eps = 0.0;
        let y = bn.forward_train(&x).unwrap();
        for k in 0..5 {
            let col: Vec<f64> = y.data().iter().skip(k).step_by(5).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn batch_norm_infer_identity_and_degenerate_batch() {
        let mut bn = BatchNorm::new(3);
        bn.eps = 0.0;
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
        assert_eq!(bn.infer(&x).unwrap(), x);
        let one = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(bn.forward_train(&one), Err(NnError::DegenerateBatch(1))));
    }

    #[test]
    fn dropout_inverted_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = Dropout::new(0.5);
        let x = Tensor::filled(&[100, 40], 1.0);
        let y = d.forward_train(&x, Some(&mut rng));
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
        assert_eq!(Layer::Dropout(d.clone()).infer(&x).unwrap(), x);
        assert_eq!(d.forward_train(&x, None), x);
    }
}
