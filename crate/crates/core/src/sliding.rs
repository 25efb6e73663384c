//! Sliding windows over a frame stream with per-frame features cached, so
//! overlapping windows do not repeat the per-frame work.

use std::collections::VecDeque;

use crate::csi::{downselect_subcarriers, span_within, CsiFrame, WindowConfig, WindowRejection};
use crate::preprocess::{FrameFeatures, PreprocessError};

/// Timestamps of an accepted window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub first_timestamp_us: u64,
    pub last_timestamp_us: u64,
}

struct Slot {
    timestamp_us: u64,
    features: Result<FrameFeatures, WindowRejection>,
}

/// Emits a window every `stride` frames once `cfg.len` frames have arrived.
/// Window validity is judged exactly like [`crate::csi::validate_window`]:
/// span first, then the first zero-magnitude entry in frame order.
pub struct SlidingFeatures {
    cfg: WindowConfig,
    stride: usize,
    buf: VecDeque<Slot>,
    pushed: usize,
}

impl SlidingFeatures {
    pub fn new(cfg: WindowConfig, stride: usize) -> Self {
        assert!(stride > 0, "stride must be positive");
        Self {
            cfg,
            stride,
            buf: VecDeque::with_capacity(cfg.len + 1),
            pushed: 0,
        }
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    /// Forgets buffered frames (start of a new stream segment).
    pub fn reset(&mut self) {
        self.buf.clear();
        self.pushed = 0;
    }

    /// Adds one frame. Returns `None` when no window ends at this frame,
    /// otherwise the window's span or the reason it was rejected.
    pub fn push(&mut self, frame: &CsiFrame) -> Option<Result<WindowSpan, WindowRejection>> {
        let n_sc = frame.h.dim().0;
        let features = downselect_subcarriers(&frame.h, self.cfg.n_f)
            .map_err(|_| WindowRejection::NonDivisibleSelection {
                n_sc,
                n_f: self.cfg.n_f,
            })
            .and_then(|h| {
                FrameFeatures::from_reduced(&h).map_err(|e| match e {
                    PreprocessError::InvalidWindow(r) => r,
                    _ => WindowRejection::ShapeMismatch,
                })
            });
        if self.buf.len() == self.cfg.len {
            self.buf.pop_front();
        }
        self.buf.push_back(Slot {
            timestamp_us: frame.timestamp_us,
            features,
        });
        self.pushed += 1;
        if self.buf.len() < self.cfg.len || !(self.pushed - self.cfg.len).is_multiple_of(self.stride) {
            return None;
        }
        Some(self.judge())
    }

    fn judge(&self) -> Result<WindowSpan, WindowRejection> {
        let first = self.buf.front().expect("full buffer").timestamp_us;
        let last = self.buf.back().expect("full buffer").timestamp_us;
        let span_s = last.saturating_sub(first) as f64 * 1e-6;
        if !span_within(span_s, self.cfg.nominal_span_s, self.cfg.tol_s) {
            return Err(WindowRejection::SpanOutOfTolerance {
                span_s,
                nominal_s: self.cfg.nominal_span_s,
                tol_s: self.cfg.tol_s,
            });
        }
        let shape = self.buf.iter().find_map(|s| s.features.as_ref().ok().map(|f| f.raw.dim()));
        for (i, slot) in self.buf.iter().enumerate() {
            match &slot.features {
                Err(WindowRejection::ZeroMagnitudeEntry { subcarrier, rx, tx, .. }) => {
                    return Err(WindowRejection::ZeroMagnitudeEntry {
                        frame: i,
                        subcarrier: *subcarrier,
                        rx: *rx,
                        tx: *tx,
                    })
                }
                Err(e) => return Err(e.clone()),
                Ok(f) if Some(f.raw.dim()) != shape => return Err(WindowRejection::ShapeMismatch),
                Ok(_) => {}
            }
        }
        Ok(WindowSpan {
            first_timestamp_us: first,
            last_timestamp_us: last,
        })
    }

    /// Features of the current window, oldest first. Only meaningful right
    /// after [`SlidingFeatures::push`] returned `Some(Ok(_))`.
    pub fn features(&self) -> impl ExactSizeIterator<Item = &FrameFeatures> + '_ {
        self.buf
            .iter()
            .map(|s| s.features.as_ref().expect("features requested for a rejected window"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi::validate_window;
    use ndarray::Array3;
    use num_complex::Complex64;

    fn frame(ts: u64, v: f64) -> CsiFrame {
        CsiFrame::new(
            ts,
            Array3::from_shape_fn((8, 2, 2), |(k, q, p)| Complex64::new(v + k as f64, (q + p) as f64)),
        )
    }

    fn cfg() -> WindowConfig {
        WindowConfig {
            len: 4,
            n_f: 4,
            nominal_span_s: 0.03,
            tol_s: 0.002,
        }
    }

    #[test]
    fn emission_count_and_stride() {
        let mut s = SlidingFeatures::new(cfg(), 1);
        let out: Vec<_> = (0..6).filter_map(|i| s.push(&frame(i * 10_000, 1.0))).collect();
        assert_eq!(out.len(), 3);
        let mut s = SlidingFeatures::new(cfg(), 4);
        let out: Vec<_> = (0..12).filter_map(|i| s.push(&frame(i * 10_000, 1.0))).collect();
        assert_eq!(out.len(), 3);
        assert_eq!(out[1].as_ref().unwrap().first_timestamp_us, 40_000);
    }

    #[test]
    fn agrees_with_validate_window() {
        let mut frames: Vec<CsiFrame> = (0..10).map(|i| frame(i * 10_000, 1.0)).collect();
        frames[6].h[[4, 1, 0]] = Complex64::new(0.0, 0.0);
        frames[9].timestamp_us += 5_000;
        let mut s = SlidingFeatures::new(cfg(), 1);
        for (i, f) in frames.iter().enumerate() {
            if let Some(got) = s.push(f) {
                let want = validate_window(&frames[i + 1 - 4..=i], &cfg(), None).map(|w| WindowSpan {
                    first_timestamp_us: w.first_timestamp_us,
                    last_timestamp_us: w.last_timestamp_us,
                });
                assert_eq!(got, want, "window ending at {i}");
            }
        }
    }
}
