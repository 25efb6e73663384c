//! Online presence detection: stride-1 sliding-window inference and the
//! per-second subinterval vote.
//!
//! Seconds are counted from timestamp 0 of the stream. A window's label
//! belongs to the second (and 200 ms subinterval) containing its last
//! frame. A subinterval is positive with at least 10 motion labels, a
//! second with at least 3 positive subintervals. Rejected windows carry no
//! label; a subinterval without labels is negative.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::csi::{CsiError, CsiFrame, Label, Record, StreamHeader, WindowConfig};
use crate::nn::{predicted_label, Network, NnError, Tensor};
use crate::preprocess::{ModelInput, PipelineVariant, PreprocessError, Preprocessor};
use crate::sliding::SlidingFeatures;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("model variant {model} does not match requested pre-processing {requested}")]
    VariantMismatch { model: PipelineVariant, requested: PipelineVariant },
    #[error("model expects inputs {expected:?}, stream yields {got:?}")]
    ShapeMismatch { expected: Vec<[usize; 3]>, got: Vec<[usize; 3]> },
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("malformed timeline record on line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub window: WindowConfig,
    pub crop: usize,
    pub stride: usize,
    pub subinterval_ms: u64,
    pub subintervals_per_second: usize,
    /// Motion labels needed for a positive subinterval.
    pub positives_per_subinterval: usize,
    /// Positive subintervals needed for a positive second.
    pub subinterval_votes: usize,
    /// Windows per inference batch.
    pub batch: usize,
    /// Pre-processing the caller expects; checked against the model.
    pub variant: Option<PipelineVariant>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            crop: 50,
            stride: 1,
            subinterval_ms: 200,
            subintervals_per_second: 5,
            positives_per_subinterval: 10,
            subinterval_votes: 3,
            batch: 64,
            variant: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.subinterval_ms == 0
            || self.subintervals_per_second == 0
            || self.positives_per_subinterval == 0
            || self.subinterval_votes == 0
        {
            return bad("thresholds and subinterval sizes must be positive");
        }
        if self.subinterval_ms * self.subintervals_per_second as u64 != 1000 {
            return bad("subintervals must tile exactly one second");
        }
        if self.subinterval_votes > self.subintervals_per_second {
            return bad("vote threshold exceeds the number of subintervals");
        }
        if self.stride == 0 || self.batch == 0 {
            return bad("stride and batch must be positive");
        }
        Ok(())
    }

    /// Decision rule applied to per-subinterval motion-label counts.
    pub fn decide(&self, counts: &[usize]) -> bool {
        counts.iter().filter(|&&c| c >= self.positives_per_subinterval).count() >= self.subinterval_votes
    }
}

/// Label of one window, stamped with its last frame's timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelEvent {
    pub timestamp_us: u64,
    pub label: Label,
}

/// One second of the timeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecondRecord {
    pub second: u64,
    /// Motion-label count per subinterval.
    pub counts: Vec<usize>,
    pub decision: bool,
}

/// Votes one second from labels stamped inside it; labels outside
/// `[second, second + 1)` are ignored.
pub fn vote_second(labels: &[LabelEvent], second: u64, cfg: &DetectorConfig) -> SecondRecord {
    let mut counts = vec![0; cfg.subintervals_per_second];
    let start = second * 1_000_000;
    for e in labels {
        if e.label == Label::Motion && e.timestamp_us >= start && e.timestamp_us < start + 1_000_000 {
            counts[((e.timestamp_us - start) / (cfg.subinterval_ms * 1000)) as usize] += 1;
        }
    }
    SecondRecord {
        second,
        decision: cfg.decide(&counts),
        counts,
    }
}

/// Turns time-ordered window events (`None` for rejected windows) into
/// completed seconds. Every second from the first event's second onward is
/// emitted, including seconds without any window.
#[derive(Debug, Clone)]
pub struct SecondAccumulator {
    cfg: DetectorConfig,
    current: Option<u64>,
    counts: Vec<usize>,
}

impl SecondAccumulator {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self {
            counts: vec![0; cfg.subintervals_per_second],
            cfg,
            current: None,
        }
    }

    fn close(&mut self, out: &mut Vec<SecondRecord>) {
        if let Some(s) = self.current {
            let counts = std::mem::replace(&mut self.counts, vec![0; self.cfg.subintervals_per_second]);
            out.push(SecondRecord {
                second: s,
                decision: self.cfg.decide(&counts),
                counts,
            });
        }
    }

    /// Adds one window event; returns seconds completed by it.
    pub fn push(&mut self, timestamp_us: u64, label: Option<Label>) -> Vec<SecondRecord> {
        let sec = timestamp_us / 1_000_000;
        let mut out = Vec::new();
        match self.current {
            None => self.current = Some(sec),
            Some(cur) if sec > cur => {
                self.close(&mut out);
                for s in cur + 1..sec {
                    out.push(SecondRecord {
                        second: s,
                        counts: vec![0; self.cfg.subintervals_per_second],
                        decision: false,
                    });
                }
                self.current = Some(sec);
            }
            _ => {}
        }
        if label == Some(Label::Motion) {
            let sub = ((timestamp_us % 1_000_000) / (self.cfg.subinterval_ms * 1000)) as usize;
            self.counts[sub] += 1;
        }
        out
    }

    /// Emits the last (possibly partial) second.
    pub fn finish(mut self) -> Vec<SecondRecord> {
        let mut out = Vec::new();
        self.close(&mut out);
        out
    }
}

/// Timeline for a time-ordered label stream.
pub fn timeline_from_labels(labels: &[LabelEvent], cfg: &DetectorConfig) -> Vec<SecondRecord> {
    let mut acc = SecondAccumulator::new(*cfg);
    let mut out = Vec::new();
    for e in labels {
        out.extend(acc.push(e.timestamp_us, Some(e.label)));
    }
    out.extend(acc.finish());
    out
}

/// Per-second records plus the window-level audit trail.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionTimeline {
    pub records: Vec<SecondRecord>,
    pub labels: Vec<LabelEvent>,
    /// Rejected window counts by reason tag.
    pub rejected: BTreeMap<String, usize>,
}

impl DetectionTimeline {
    pub fn positive_seconds(&self) -> Vec<u64> {
        self.records.iter().filter(|r| r.decision).map(|r| r.second).collect()
    }

    /// `second_index,c1,…,c5,decision` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format_record(r));
        }
        s
    }
}

pub fn format_record(r: &SecondRecord) -> String {
    let mut s = r.second.to_string();
    for c in &r.counts {
        let _ = write!(s, ",{c}");
    }
    let _ = writeln!(s, ",{}", u8::from(r.decision));
    s
}

/// Parses timeline lines back into records (blank lines and `#` comments
/// skipped). The stored decision bit is kept as written.
pub fn parse_records(text: &str) -> Result<Vec<SecondRecord>, DetectorError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| DetectorError::Record {
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(err("too few fields"));
        }
        let second = fields[0].parse().map_err(|_| err("bad second index"))?;
        let counts = fields[1..fields.len() - 1]
            .iter()
            .map(|f| f.parse().map_err(|_| err("bad count")))
            .collect::<Result<Vec<usize>, _>>()?;
        let decision = match fields[fields.len() - 1] {
            "0" => false,
            "1" => true,
            _ => return Err(err("decision must be 0 or 1")),
        };
        out.push(SecondRecord {
            second,
            counts,
            decision,
        });
    }
    Ok(out)
}

/// Streaming detector over a frame sequence. Windows are pre-processed as
/// frames arrive and classified in batches; seconds are emitted in order.
pub struct OnlineDetector<'a> {
    net: &'a Network,
    cfg: DetectorConfig,
    pre: Preprocessor,
    sliding: SlidingFeatures,
    pending: Vec<(u64, Option<ModelInput>)>,
    acc: SecondAccumulator,
    checked_shapes: bool,
    pub labels: Vec<LabelEvent>,
    pub rejected: BTreeMap<String, usize>,
}

impl<'a> OnlineDetector<'a> {
    pub fn new(net: &'a Network, cfg: DetectorConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        if let Some(v) = cfg.variant {
            if v != net.variant() {
                return Err(DetectorError::VariantMismatch {
                    model: net.variant(),
                    requested: v,
                });
            }
        }
        Ok(Self {
            net,
            pre: Preprocessor::new(cfg.window.len, cfg.window.n_f, cfg.crop)?,
            sliding: SlidingFeatures::new(cfg.window, cfg.stride),
            pending: Vec::with_capacity(cfg.batch),
            acc: SecondAccumulator::new(cfg),
            checked_shapes: false,
            labels: Vec::new(),
            rejected: BTreeMap::new(),
            cfg,
        })
    }

    /// Checks a stream header against the model's input shapes.
    pub fn begin_stream(&mut self, h: &StreamHeader) -> Result<(), DetectorError> {
        h.validate(self.cfg.window.n_f)?;
        let w = &self.cfg.window;
        let got = self.net.variant().input_shapes(w.len, w.n_f, h.n_r, h.n_t, self.cfg.crop);
        let expected: Vec<[usize; 3]> = self.net.spec().branches.iter().map(|b| b.input).collect();
        if got != expected {
            return Err(DetectorError::ShapeMismatch { expected, got });
        }
        self.checked_shapes = true;
        Ok(())
    }

    /// Feeds one frame; returns seconds completed so far.
    pub fn push_frame(&mut self, frame: &CsiFrame) -> Result<Vec<SecondRecord>, DetectorError> {
        match self.sliding.push(frame) {
            None => return Ok(Vec::new()),
            Some(Err(r)) => {
                *self.rejected.entry(r.reason().to_string()).or_default() += 1;
                self.pending.push((frame.timestamp_us, None));
            }
            Some(Ok(span)) => {
                let input = self.pre.from_features(self.sliding.features(), self.net.variant())?;
                if !self.checked_shapes {
                    let expected: Vec<[usize; 3]> = self.net.spec().branches.iter().map(|b| b.input).collect();
                    if input.shapes() != expected {
                        return Err(DetectorError::ShapeMismatch {
                            expected,
                            got: input.shapes(),
                        });
                    }
                    self.checked_shapes = true;
                }
                self.pending.push((span.last_timestamp_us, Some(input)));
            }
        }
        if self.pending.len() >= self.cfg.batch {
            self.flush()
        } else {
            Ok(Vec::new())
        }
    }

    fn flush(&mut self) -> Result<Vec<SecondRecord>, DetectorError> {
        let pending = std::mem::take(&mut self.pending);
        let inputs: Vec<&ModelInput> = pending.iter().filter_map(|(_, i)| i.as_ref()).collect();
        let mut predicted = Vec::with_capacity(inputs.len());
        if !inputs.is_empty() {
            let tensors = (0..inputs[0].tensors.len())
                .map(|b| Tensor::stack_images(inputs.iter().map(|i| &i.tensors[b])))
                .collect::<Result<Vec<_>, _>>()?;
            let probs = self.net.predict(&tensors)?;
            for k in 0..inputs.len() {
                predicted.push(Label::from_u8(predicted_label(probs.sample(k)) as u8).expect("two classes"));
            }
        }
        let mut labels = predicted.into_iter();
        let mut out = Vec::new();
        for (ts, input) in &pending {
            let label = input.as_ref().map(|_| labels.next().expect("one label per input"));
            if let Some(l) = label {
                self.labels.push(LabelEvent {
                    timestamp_us: *ts,
                    label: l,
                });
            }
            out.extend(self.acc.push(*ts, label));
        }
        Ok(out)
    }

    /// Classifies any buffered windows and closes the last second. The
    /// returned records are only those not yet handed out by `push_frame`.
    pub fn finish(mut self) -> Result<DetectionTimeline, DetectorError> {
        let mut records = self.flush()?;
        records.extend(self.acc.finish());
        Ok(DetectionTimeline {
            records,
            labels: self.labels,
            rejected: self.rejected,
        })
    }
}

/// Classifies every stride-1 window of a frame sequence; rejected windows
/// produce no label.
pub fn stream_infer(
    net: &Network,
    frames: impl IntoIterator<Item = CsiFrame>,
    cfg: &DetectorConfig,
) -> Result<Vec<LabelEvent>, DetectorError> {
    Ok(run_detection(net, frames, cfg)?.labels)
}

/// Full detection over a frame sequence.
pub fn run_detection(
    net: &Network,
    frames: impl IntoIterator<Item = CsiFrame>,
    cfg: &DetectorConfig,
) -> Result<DetectionTimeline, DetectorError> {
    let mut det = OnlineDetector::new(net, *cfg)?;
    let mut records = Vec::new();
    for f in frames {
        records.extend(det.push_frame(&f)?);
    }
    let tail = det.finish()?;
    records.extend(tail.records);
    Ok(DetectionTimeline { records, ..tail })
}

/// Detection over decoded file records. Headers are checked against the
/// model; the timeline and the sliding window run across segment
/// boundaries. `on_second` sees each record as soon as it is complete.
pub fn run_detection_records(
    net: &Network,
    records: impl IntoIterator<Item = Result<Record, CsiError>>,
    cfg: &DetectorConfig,
    mut on_second: impl FnMut(&SecondRecord),
) -> Result<DetectionTimeline, DetectorError> {
    let mut det = OnlineDetector::new(net, *cfg)?;
    let mut all = Vec::new();
    for rec in records {
        match rec? {
            Record::Header(h) => det.begin_stream(&h)?,
            Record::Frame(f) => {
                for r in det.push_frame(&f)? {
                    on_second(&r);
                    all.push(r);
                }
            }
        }
    }
    let tail = det.finish()?;
    for r in &tail.records {
        on_second(r);
    }
    all.extend(tail.records);
    Ok(DetectionTimeline { records: all, ..tail })
}
