//! CSI data model: frames, stream headers, window assembly and validity
//! filtering.
//!
//! A CSI frame holds one channel array `H[i]` of shape `n_sc × n_r × n_t`.
//! Windows are `I` consecutive frames, down-selected to `n_f` evenly spaced
//! subcarriers and stacked into the 4-D array `X` (`I × n_f × n_r × n_t`).

mod format;
mod jsonl;

pub use format::{write_stream, CsiReader, CsiWriter, Record, FLAG_LABEL, FLAG_SEGMENT_LEN, MAGIC};
pub use jsonl::import_jsonl;

use ndarray::{s, Array3, Array4, Axis};
use num_complex::Complex64;
use thiserror::Error;

/// Binary label of a stream or window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// Human-free environment.
    Empty = 0,
    /// Detectable human motion.
    Motion = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Empty),
            1 => Some(Label::Motion),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Error)]
pub enum CsiError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("invalid stream header: {0}")]
    InvalidHeader(String),
    #[error("frame shape {got:?} does not match header {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("timestamp {got} not after previous {prev}")]
    NonMonotonicTimestamp { prev: u64, got: u64 },
    #[error("{n_f} subcarriers cannot be evenly selected from {n_sc}")]
    NonDivisibleSelection { n_sc: usize, n_f: usize },
}

/// Per-stream metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub n_sc: usize,
    pub n_r: usize,
    pub n_t: usize,
    /// Nominal CSI spacing. Not carried by the binary format; readers fill in
    /// [`StreamHeader::DEFAULT_INTERVAL_MS`].
    pub sample_interval_ms: f64,
    pub label: Option<Label>,
    /// Collection-session identity used for disjoint splits.
    pub day_id: String,
}

impl StreamHeader {
    pub const DEFAULT_INTERVAL_MS: f64 = 10.0;

    pub fn new(n_sc: usize, n_r: usize, n_t: usize, label: Option<Label>, day_id: impl Into<String>) -> Self {
        Self {
            n_sc,
            n_r,
            n_t,
            sample_interval_ms: Self::DEFAULT_INTERVAL_MS,
            label,
            day_id: day_id.into(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_sc, self.n_r, self.n_t)
    }

    /// Checks dimensional invariants against the subcarrier count used for
    /// windowing.
    pub fn validate(&self, n_f: usize) -> Result<(), CsiError> {
        if self.n_sc == 0 || self.n_r == 0 || self.n_t == 0 {
            return Err(CsiError::InvalidHeader("zero dimension".into()));
        }
        if self.n_r < 2 {
            return Err(CsiError::InvalidHeader(format!(
                "phase differencing needs at least 2 receive antennas, got {}",
                self.n_r
            )));
        }
        if self.n_sc < n_f {
            return Err(CsiError::InvalidHeader(format!(
                "n_sc {} smaller than n_f {}",
                self.n_sc, n_f
            )));
        }
        for (name, v) in [("n_sc", self.n_sc), ("n_r", self.n_r), ("n_t", self.n_t)] {
            if v > u16::MAX as usize {
                return Err(CsiError::InvalidHeader(format!("{name} {v} exceeds u16")));
            }
        }
        if self.day_id.len() > u16::MAX as usize {
            return Err(CsiError::InvalidHeader("day_id longer than 65535 bytes".into()));
        }
        Ok(())
    }
}

/// One CSI estimate: `h[k, q, p]` for subcarrier `k`, receive antenna `q`
/// and transmit antenna `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiFrame {
    pub timestamp_us: u64,
    pub h: Array3<Complex64>,
}

impl CsiFrame {
    pub fn new(timestamp_us: u64, h: Array3<Complex64>) -> Self {
        Self { timestamp_us, h }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.h.dim()
    }
}

/// Windowing parameters. Defaults follow the reference setup: 128 frames,
/// 14 of 56 subcarriers, nominal span 1.27 s ± 0.064 s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub len: usize,
    pub n_f: usize,
    pub nominal_span_s: f64,
    pub tol_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            len: 128,
            n_f: 14,
            nominal_span_s: 1.27,
            tol_s: 0.064,
        }
    }
}

/// Why a candidate window was rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum WindowRejection {
    #[error("expected {expected} frames, got {got}")]
    WrongFrameCount { expected: usize, got: usize },
    #[error("window span {span_s:.4} s outside {nominal_s} ± {tol_s} s")]
    SpanOutOfTolerance { span_s: f64, nominal_s: f64, tol_s: f64 },
    #[error("zero-magnitude CSI entry at frame {frame}, subcarrier {subcarrier}, rx {rx}, tx {tx}")]
    ZeroMagnitudeEntry {
        frame: usize,
        subcarrier: usize,
        rx: usize,
        tx: usize,
    },
    #[error("frames within a window have different shapes")]
    ShapeMismatch,
    #[error("{n_f} subcarriers cannot be evenly selected from {n_sc}")]
    NonDivisibleSelection { n_sc: usize, n_f: usize },
}

impl WindowRejection {
    /// Short machine-friendly reason tag.
    pub fn reason(&self) -> &'static str {
        match self {
            WindowRejection::WrongFrameCount { .. } => "wrong_frame_count",
            WindowRejection::SpanOutOfTolerance { .. } => "span_out_of_tolerance",
            WindowRejection::ZeroMagnitudeEntry { .. } => "zero_magnitude_entry",
            WindowRejection::ShapeMismatch => "shape_mismatch",
            WindowRejection::NonDivisibleSelection { .. } => "non_divisible_selection",
        }
    }
}

/// A validated window: `x` is `I × n_f × n_r × n_t`, every entry has strictly
/// positive magnitude, and the timestamp span is within tolerance.
#[derive(Debug, Clone)]
pub struct CsiWindow {
    pub first_timestamp_us: u64,
    pub last_timestamp_us: u64,
    pub x: Array4<Complex64>,
    pub label: Option<Label>,
}

impl CsiWindow {
    pub fn len(&self) -> usize {
        self.x.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Subcarrier indices `{0, s, 2s, …}` with stride `s = n_sc / n_f`.
pub fn selected_subcarriers(n_sc: usize, n_f: usize) -> Result<Vec<usize>, CsiError> {
    if n_f == 0 || n_f > n_sc || !n_sc.is_multiple_of(n_f) {
        return Err(CsiError::NonDivisibleSelection { n_sc, n_f });
    }
    let stride = n_sc / n_f;
    Ok((0..n_f).map(|i| i * stride).collect())
}

/// Keeps `n_f` evenly spaced subcarriers of one channel array.
pub fn downselect_subcarriers(h: &Array3<Complex64>, n_f: usize) -> Result<Array3<Complex64>, CsiError> {
    let n_sc = h.dim().0;
    selected_subcarriers(n_sc, n_f)?;
    let stride = n_sc / n_f;
    Ok(h.slice(s![..;stride, .., ..]).to_owned())
}

/// Stacks reduced frames along a new leading time axis.
pub fn stack_window(frames: &[Array3<Complex64>]) -> Result<Array4<Complex64>, WindowRejection> {
    let first = frames.first().ok_or(WindowRejection::WrongFrameCount { expected: 1, got: 0 })?;
    let dim = first.dim();
    if frames.iter().any(|f| f.dim() != dim) {
        return Err(WindowRejection::ShapeMismatch);
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("shapes checked above"))
}

/// Checks the two validity rules on a candidate window and assembles `X`.
///
/// Rules are applied in order: frame count, first-to-last timestamp span,
/// then strictly positive magnitude of every selected entry.
pub fn validate_window(
    frames: &[CsiFrame],
    cfg: &WindowConfig,
    label: Option<Label>,
) -> Result<CsiWindow, WindowRejection> {
    if frames.len() != cfg.len {
        return Err(WindowRejection::WrongFrameCount {
            expected: cfg.len,
            got: frames.len(),
        });
    }
    let first_ts = frames[0].timestamp_us;
    let last_ts = frames[frames.len() - 1].timestamp_us;
    let span_s = last_ts.saturating_sub(first_ts) as f64 * 1e-6;
    if !span_within(span_s, cfg.nominal_span_s, cfg.tol_s) {
        return Err(WindowRejection::SpanOutOfTolerance {
            span_s,
            nominal_s: cfg.nominal_span_s,
            tol_s: cfg.tol_s,
        });
    }
    let n_sc = frames[0].h.dim().0;
    let reduced = frames
        .iter()
        .map(|f| {
            if f.h.dim() != frames[0].h.dim() {
                return Err(WindowRejection::ShapeMismatch);
            }
            downselect_subcarriers(&f.h, cfg.n_f)
                .map_err(|_| WindowRejection::NonDivisibleSelection { n_sc, n_f: cfg.n_f })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let x = stack_window(&reduced)?;
    check_positive(&x)?;
    Ok(CsiWindow {
        first_timestamp_us: first_ts,
        last_timestamp_us: last_ts,
        x,
        label,
    })
}

pub(crate) fn span_within(span_s: f64, nominal_s: f64, tol_s: f64) -> bool {
    // Timestamps are integer microseconds; half a microsecond of slack keeps
    // the closed interval exact despite decimal constants like 1.27.
    (span_s - nominal_s).abs() <= tol_s + 0.5e-6
}

pub(crate) fn check_positive(x: &Array4<Complex64>) -> Result<(), WindowRejection> {
    for ((i, k, q, p), v) in x.indexed_iter() {
        // `!(m > 0)` also rejects NaN.
        if !(v.norm() > 0.0) {
            return Err(WindowRejection::ZeroMagnitudeEntry {
                frame: i,
                subcarrier: k,
                rx: q,
                tx: p,
            });
        }
    }
    Ok(())
}
