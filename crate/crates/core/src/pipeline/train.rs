use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PipelineError, Split};
use crate::csi::Label;
use crate::nn::{predicted_label, Adam, AdamConfig, ModelSpec, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// L2 coefficient on fully connected weights.
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 64,
            adam: AdamConfig::default(),
            l2: 1e-4,
            seed: 1,
        }
    }
}

/// Binary confusion counts; label 1 (motion) is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Motion, Label::Motion) => self.tp += 1,
            (Label::Empty, Label::Motion) => self.fp += 1,
            (Label::Empty, Label::Empty) => self.tn += 1,
            (Label::Motion, Label::Empty) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Fraction of human-free windows classified as motion.
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    /// Fraction of motion windows classified as human-free.
    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayMetrics {
    pub day: String,
    pub confusion: Confusion,
}

/// Infer-mode output for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutput {
    pub index: usize,
    pub label: Label,
    pub prob_motion: f64,
    pub predicted: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Sorted by day id.
    pub per_day: Vec<DayMetrics>,
    pub overall: Confusion,
    /// In the order the indices were given.
    pub outputs: Vec<SampleOutput>,
}

const EVAL_BATCH: usize = 128;

/// Infer-mode metrics over the selected samples. Argmax ties go to label 0.
pub fn evaluate(net: &Network, ds: &Dataset, idx: &[usize]) -> Result<Evaluation, PipelineError> {
    if net.variant() != ds.variant {
        return Err(PipelineError::VariantMismatch {
            expected: net.variant(),
            got: ds.variant,
        });
    }
    let mut outputs = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let probs = net.predict(&ds.batch(chunk))?;
        for (k, &i) in chunk.iter().enumerate() {
            let p = probs.sample(k);
            let predicted = Label::from_u8(predicted_label(p) as u8).expect("two classes");
            outputs.push(SampleOutput {
                index: i,
                label: ds.samples[i].label,
                prob_motion: p[1],
                predicted,
            });
        }
    }
    let mut by_day: BTreeMap<&str, Confusion> = BTreeMap::new();
    let mut overall = Confusion::default();
    for o in &outputs {
        let day = ds.days[ds.samples[o.index].day].as_str();
        by_day.entry(day).or_default().record(o.label, o.predicted);
        overall.record(o.label, o.predicted);
    }
    Ok(Evaluation {
        per_day: by_day
            .into_iter()
            .map(|(d, c)| DayMetrics {
                day: d.to_string(),
                confusion: c,
            })
            .collect(),
        overall,
        outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Train-mode (dropout active) accuracy accumulated over the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub variant: String,
    pub seed: u64,
    pub param_count: usize,
    pub train_counts: [usize; 2],
    pub val_counts: [usize; 2],
    pub test_counts: [usize; 2],
    pub epochs: Vec<EpochStats>,
    pub test_per_day: Vec<DayMetrics>,
    pub test_overall: Option<Confusion>,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "variant {}  seed {}  params {}  train {}/{}  val {}/{}  test {}/{}  ({:.1} s)",
            self.variant,
            self.seed,
            self.param_count,
            self.train_counts[0],
            self.train_counts[1],
            self.val_counts[0],
            self.val_counts[1],
            self.test_counts[0],
            self.test_counts[1],
            self.wall_seconds
        );
        let _ = writeln!(s, "{:>5}  {:>9}  {:>9}  {:>9}", "epoch", "loss", "train_acc", "val_acc");
        for e in &self.epochs {
            let val = e.val_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:>5}  {:>9.5}  {:>9.4}  {:>9}", e.epoch, e.loss, e.train_accuracy, val);
        }
        if !self.test_per_day.is_empty() {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>6} {:>6} {:>6}  {:>8} {:>8} {:>8}",
                "test day", "tp", "fp", "tn", "fn", "accuracy", "fpr", "fnr"
            );
            let rows = self
                .test_per_day
                .iter()
                .map(|d| (d.day.as_str(), d.confusion))
                .chain(self.test_overall.map(|c| ("all", c)));
            for (day, c) in rows {
                let _ = writeln!(
                    s,
                    "{:<12} {:>6} {:>6} {:>6} {:>6}  {:>8.4} {:>8.4} {:>8.4}",
                    day,
                    c.tp,
                    c.fp,
                    c.tn,
                    c.fn_,
                    c.accuracy(),
                    c.fpr(),
                    c.fnr()
                );
            }
        }
        s
    }

    /// Line-oriented `key=value` records for plotting.
    pub fn records(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "run variant={} seed={} params={} train0={} train1={} val0={} val1={} test0={} test1={} seconds={:.3}",
            self.variant,
            self.seed,
            self.param_count,
            self.train_counts[0],
            self.train_counts[1],
            self.val_counts[0],
            self.val_counts[1],
            self.test_counts[0],
            self.test_counts[1],
            self.wall_seconds
        );
        for e in &self.epochs {
            let _ = write!(s, "epoch epoch={} loss={:.6} train_acc={:.6}", e.epoch, e.loss, e.train_accuracy);
            if let Some(v) = e.val_accuracy {
                let _ = write!(s, " val_acc={v:.6}");
            }
            s.push('\n');
        }
        for d in &self.test_per_day {
            s.push_str(&day_record("day", &d.day, &d.confusion));
        }
        if let Some(c) = &self.test_overall {
            s.push_str(&day_record("overall", "all", c));
        }
        s
    }
}

fn day_record(kind: &str, day: &str, c: &Confusion) -> String {
    format!(
        "{kind} day={day} tp={} fp={} tn={} fn={} acc={:.6} fpr={:.6} fnr={:.6}\n",
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        c.accuracy(),
        c.fpr(),
        c.fnr()
    )
}

/// Trains a fresh network on `split.train`, tracks validation accuracy per
/// epoch, and evaluates on `split.test`. Bit-reproducible for a given seed:
/// weights, shuffling and dropout masks each come from their own ChaCha
/// stream of that seed.
pub fn train(ds: &Dataset, split: &Split, spec: ModelSpec, cfg: &TrainConfig) -> Result<(Network, TrainReport), PipelineError> {
    let start = Instant::now();
    if spec.variant != ds.variant {
        return Err(PipelineError::VariantMismatch {
            expected: spec.variant,
            got: ds.variant,
        });
    }
    let spec_shapes: Vec<[usize; 3]> = spec.branches.iter().map(|b| b.input).collect();
    if spec_shapes != ds.shapes {
        return Err(PipelineError::ShapeMismatch(format!(
            "model expects {spec_shapes:?}, dataset has {:?}",
            ds.shapes
        )));
    }
    if cfg.batch < 2 || cfg.epochs == 0 {
        return Err(PipelineError::Config("batch must be ≥ 2 and epochs ≥ 1".into()));
    }
    let train_counts = ds.class_counts(&split.train);
    if train_counts[0] == 0 || train_counts[1] == 0 {
        return Err(PipelineError::SingleClassTrainingSet {
            empty: train_counts[0],
            motion: train_counts[1],
        });
    }
    let mut net = Network::new(spec, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);
    let mut opt = Adam::new(cfg.adam);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order = split.train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let (loss, ok) = net.train_step(&ds.batch(chunk), &ds.labels(chunk), &mut opt, cfg.l2, Some(&mut drop_rng))?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            seen += chunk.len();
        }
        let val_accuracy = if split.val.is_empty() {
            None
        } else {
            Some(evaluate(&net, ds, &split.val)?.overall.accuracy())
        };
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_accuracy,
        });
    }
    let (test_per_day, test_overall) = if split.test.is_empty() {
        (Vec::new(), None)
    } else {
        let ev = evaluate(&net, ds, &split.test)?;
        (ev.per_day, Some(ev.overall))
    };
    let report = TrainReport {
        variant: ds.variant.to_string(),
        seed: cfg.seed,
        param_count: net.param_count(),
        train_counts,
        val_counts: ds.class_counts(&split.val),
        test_counts: ds.class_counts(&split.test),
        epochs,
        test_per_day,
        test_overall,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}
