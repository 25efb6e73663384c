use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{AvgPool, BatchNorm, Conv2d, Dense, Dropout, Layer, Relu};
use super::loss::{cross_entropy, l2_penalty, softmax_batch, softmax_cross_entropy_grad};
use super::optim::Adam;
use super::{Mode, NnError, Param, Tensor};
use crate::preprocess::PipelineVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

/// Conv → BN → ReLU → AvgPool, twice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    /// `H × W × C` input image.
    pub input: [usize; 3],
    pub conv1: ConvSpec,
    pub pool1: (usize, usize),
    pub conv2: ConvSpec,
    pub pool2: (usize, usize),
}

impl BranchSpec {
    /// Output shape after the second pooling stage.
    pub fn output(&self) -> Result<[usize; 3], NnError> {
        let [h, w, _] = self.input;
        let stage = |h: usize, w: usize, c: &ConvSpec, p: (usize, usize)| -> Result<(usize, usize), NnError> {
            if c.kh == 0 || c.kw == 0 || c.kh > h || c.kw > w {
                return Err(NnError::InvalidSpec(format!("kernel {}×{} on {h}×{w}", c.kh, c.kw)));
            }
            let (h, w) = (h - c.kh + 1, w - c.kw + 1);
            if p.0 == 0 || p.1 == 0 || p.0 > h || p.1 > w {
                return Err(NnError::InvalidSpec(format!("pool {}×{} on {h}×{w}", p.0, p.1)));
            }
            Ok((h / p.0, w / p.1))
        };
        let (h, w) = stage(h, w, &self.conv1, self.pool1)?;
        let (h, w) = stage(h, w, &self.conv2, self.pool2)?;
        Ok([h, w, self.conv2.out_channels])
    }
}

/// Window geometry the classifier inputs are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputGeometry {
    pub len: usize,
    pub n_f: usize,
    pub n_r: usize,
    pub n_t: usize,
    pub crop: usize,
}

impl Default for InputGeometry {
    fn default() -> Self {
        Self {
            len: 128,
            n_f: 14,
            n_r: 3,
            n_t: 3,
            crop: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: PipelineVariant,
    pub branches: Vec<BranchSpec>,
    pub hidden: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl ModelSpec {
    /// Reference architecture. DFT inputs use 3×3 kernels with (2,1) and
    /// (3,1) pooling; the taller no-DFT inputs use a (5,3) first kernel and
    /// (4,1) pooling twice.
    pub fn reference(variant: PipelineVariant, geom: InputGeometry) -> Self {
        let (k1, p1, p2) = if variant.uses_dft() {
            ((3, 3), (2, 1), (3, 1))
        } else {
            ((5, 3), (4, 1), (4, 1))
        };
        let branches = variant
            .input_shapes(geom.len, geom.n_f, geom.n_r, geom.n_t, geom.crop)
            .into_iter()
            .map(|input| BranchSpec {
                input,
                conv1: ConvSpec {
                    out_channels: 8,
                    kh: k1.0,
                    kw: k1.1,
                },
                pool1: p1,
                conv2: ConvSpec {
                    out_channels: 16,
                    kh: 3,
                    kw: 3,
                },
                pool2: p2,
            })
            .collect();
        Self {
            variant,
            branches,
            hidden: 64,
            dropout: 0.5,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.classes != 2 {
            return Err(NnError::InvalidSpec(format!("output width must be 2, got {}", self.classes)));
        }
        if self.branches.len() != self.variant.branch_count() {
            return Err(NnError::InvalidSpec(format!(
                "variant {} needs {} branches, spec has {}",
                self.variant,
                self.variant.branch_count(),
                self.branches.len()
            )));
        }
        if self.hidden == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidSpec(format!(
                "hidden {} / dropout {}",
                self.hidden, self.dropout
            )));
        }
        for b in &self.branches {
            if b.input.contains(&0) || b.conv1.out_channels == 0 || b.conv2.out_channels == 0 {
                return Err(NnError::InvalidSpec(format!("empty dimension in {b:?}")));
            }
            b.output()?;
        }
        Ok(())
    }

    /// Width of the concatenated flattened branch outputs.
    pub fn flat_dim(&self) -> Result<usize, NnError> {
        self.branches
            .iter()
            .map(|b| b.output().map(|s| s.iter().product::<usize>()))
            .sum()
    }
}

/// Trainable scalar count (running statistics excluded).
pub fn count_params(spec: &ModelSpec) -> Result<usize, NnError> {
    spec.validate()?;
    let conv = |c: &ConvSpec, cin: usize| c.kh * c.kw * cin * c.out_channels + c.out_channels + 2 * c.out_channels;
    let branches: usize = spec
        .branches
        .iter()
        .map(|b| conv(&b.conv1, b.input[2]) + conv(&b.conv2, b.conv1.out_channels))
        .sum();
    let flat = spec.flat_dim()?;
    let head = flat * spec.hidden + spec.hidden + 2 * spec.hidden + spec.hidden * spec.classes + spec.classes;
    Ok(branches + head)
}

/// Index of the larger probability; ties go to label 0.
pub fn predicted_label(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Parallel-branch CNN classifier.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelSpec,
    seed: u64,
    branches: Vec<Vec<Layer>>,
    head: Vec<Layer>,
    branch_out: Vec<[usize; 3]>,
}

impl Network {
    /// Fresh network with weights drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut branches = Vec::new();
        let mut branch_out = Vec::new();
        for b in &spec.branches {
            let mut c1 = Conv2d::new(b.conv1.kh, b.conv1.kw, b.input[2], b.conv1.out_channels, &mut rng);
            c1.input_grad = false;
            let c2 = Conv2d::new(b.conv2.kh, b.conv2.kw, b.conv1.out_channels, b.conv2.out_channels, &mut rng);
            branches.push(vec![
                Layer::Conv(c1),
                Layer::Norm(BatchNorm::new(b.conv1.out_channels)),
                Layer::Relu(Relu::default()),
                Layer::Pool(AvgPool::new(b.pool1.0, b.pool1.1)),
                Layer::Conv(c2),
                Layer::Norm(BatchNorm::new(b.conv2.out_channels)),
                Layer::Relu(Relu::default()),
                Layer::Pool(AvgPool::new(b.pool2.0, b.pool2.1)),
            ]);
            branch_out.push(b.output()?);
        }
        let flat = spec.flat_dim()?;
        let head = vec![
            Layer::Dense(Dense::new(flat, spec.hidden, &mut rng)),
            Layer::Norm(BatchNorm::new(spec.hidden)),
            Layer::Relu(Relu::default()),
            Layer::Dropout(Dropout::new(spec.dropout)),
            Layer::Dense(Dense::new(spec.hidden, spec.classes, &mut rng)),
        ];
        Ok(Self {
            spec,
            seed,
            branches,
            head,
            branch_out,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn variant(&self) -> PipelineVariant {
        self.spec.variant
    }

    /// Enables input gradients on the first convolution of every branch so
    /// callers can differentiate with respect to the images.
    pub fn track_input_grads(&mut self, on: bool) {
        for b in &mut self.branches {
            if let Some(Layer::Conv(c)) = b.first_mut() {
                c.input_grad = on;
            }
        }
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize, NnError> {
        if inputs.len() != self.branches.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} input tensors for {} branches",
                inputs.len(),
                self.branches.len()
            )));
        }
        let n = inputs[0].shape().first().copied().unwrap_or(0);
        for (x, b) in inputs.iter().zip(&self.spec.branches) {
            if x.shape().len() != 4 || x.shape()[0] != n || x.shape()[1..] != b.input {
                return Err(NnError::ShapeMismatch(format!(
                    "input {:?}, expected N×{:?}",
                    x.shape(),
                    b.input
                )));
            }
        }
        Ok(n)
    }

    fn concat(&self, outs: Vec<Tensor>, n: usize) -> Result<Tensor, NnError> {
        let widths: Vec<usize> = outs.iter().map(|t| t.len() / n).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for s in 0..n {
            for (t, &w) in outs.iter().zip(&widths) {
                data.extend_from_slice(&t.data()[s * w..(s + 1) * w]);
            }
        }
        Tensor::new(vec![n, total], data)
    }

    /// Infer-mode logits; pure function of parameters and input.
    pub fn logits(&self, inputs: &[Tensor]) -> Result<Tensor, NnError> {
        let n = self.check_inputs(inputs)?;
        let mut outs = Vec::with_capacity(inputs.len());
        for (x, layers) in inputs.iter().zip(&self.branches) {
            let mut h = x.clone();
            for l in layers {
                h = l.infer(&h)?;
            }
            outs.push(h);
        }
        let mut h = self.concat(outs, n)?;
        for l in &self.head {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    /// Infer-mode class probabilities, `N × 2`.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Tensor, NnError> {
        Ok(softmax_batch(&self.logits(inputs)?))
    }

    /// Train-mode logits with caches kept for [`Network::backward`]. Dropout
    /// is active only when an RNG is supplied.
    pub fn logits_train(&mut self, inputs: &[Tensor], mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor, NnError> {
        let n = self.check_inputs(inputs)?;
        let mut outs = Vec::with_capacity(inputs.len());
        for (x, layers) in inputs.iter().zip(&mut self.branches) {
            let mut h = x.clone();
            for l in layers.iter_mut() {
                h = l.forward_train(&h, rng.as_deref_mut())?;
            }
            outs.push(h);
        }
        let mut h = self.concat(outs, n)?;
        for l in &mut self.head {
            h = l.forward_train(&h, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, inputs: &[Tensor], mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor, NnError> {
        match mode {
            Mode::Infer => self.predict(inputs),
            Mode::Train => Ok(softmax_batch(&self.logits_train(inputs, rng)?)),
        }
    }

    /// Back-propagates a logit gradient, accumulating parameter gradients.
    /// Returns per-branch input gradients when they are tracked.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Vec<Option<Tensor>>, NnError> {
        let mut g = grad_logits.clone();
        for l in self.head.iter_mut().rev() {
            g = l.backward(&g)?.expect("head layers always return input gradients");
        }
        let n = g.batch();
        let total = g.shape()[1];
        let mut offset = 0;
        let mut input_grads = Vec::with_capacity(self.branches.len());
        for (layers, shape) in self.branches.iter_mut().zip(&self.branch_out) {
            let w: usize = shape.iter().product();
            let mut part = Vec::with_capacity(n * w);
            for s in 0..n {
                part.extend_from_slice(&g.data()[s * total + offset..][..w]);
            }
            offset += w;
            let mut gb = Some(Tensor::new(vec![n, shape[0], shape[1], shape[2]], part)?);
            for l in layers.iter_mut().rev() {
                gb = l.backward(gb.as_ref().expect("only the first layer may drop its input gradient"))?;
            }
            input_grads.push(gb);
        }
        Ok(input_grads)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters in declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.branches
            .iter_mut()
            .flatten()
            .chain(self.head.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// Every stored tensor (including running statistics) in declaration
    /// order: per branch conv1 w/b, bn1 γ/β/mean/var, conv2 …, then the head.
    pub fn state(&self) -> Vec<&Tensor> {
        self.branches.iter().flatten().chain(self.head.iter()).flat_map(|l| l.state()).collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        self.branches
            .iter_mut()
            .flatten()
            .chain(self.head.iter_mut())
            .flat_map(|l| l.state_mut())
            .collect()
    }

    /// Fully connected weight matrices (the L2-penalized set).
    pub fn fc_weights(&self) -> Vec<&Tensor> {
        self.head
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(&d.weight.value),
                _ => None,
            })
            .collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    /// Mean cross-entropy plus `λ·Σw²` over FC weights. Gradients are reset,
    /// then filled for this batch. Returns the loss and the probabilities.
    pub fn loss_and_grad(
        &mut self,
        inputs: &[Tensor],
        labels: &[usize],
        l2: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Tensor), NnError> {
        self.zero_grad();
        let probs = softmax_batch(&self.logits_train(inputs, rng)?);
        let loss = cross_entropy(&probs, labels)? + l2_penalty(self.fc_weights(), l2);
        self.backward(&softmax_cross_entropy_grad(&probs, labels)?)?;
        if l2 > 0.0 {
            for l in &mut self.head {
                if let Layer::Dense(d) = l {
                    for (g, w) in d.weight.grad.data_mut().iter_mut().zip(d.weight.value.data()) {
                        *g += 2.0 * l2 * w;
                    }
                }
            }
        }
        Ok((loss, probs))
    }

    /// One optimizer step on a batch. Returns the loss and the number of
    /// correctly classified samples under the train-mode forward.
    pub fn train_step(
        &mut self,
        inputs: &[Tensor],
        labels: &[usize],
        opt: &mut Adam,
        l2: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, usize), NnError> {
        let (loss, probs) = self.loss_and_grad(inputs, labels, l2, rng)?;
        let correct = probs
            .data()
            .chunks(self.spec.classes)
            .zip(labels)
            .filter(|(p, &y)| predicted_label(p) == y)
            .count();
        opt.step(&mut self.params_mut());
        Ok((loss, correct))
    }
}
