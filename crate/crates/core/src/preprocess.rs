//! Window → classifier input images.
//!
//! Magnitude branch: `|X|` flattened to `I × n_f × n_r·n_t`, divided by its
//! first frame, 2-D DFT over (frame, subcarrier) with the zero frequency moved
//! to the center, central `T` temporal rows kept, then `log10(x + 1)`.
//!
//! Phase branch: per-frame phase of each receive antenna relative to antenna
//! 0, flattened to `I × n_f × (n_r−1)·n_t`, unwrapped along time, 1-D DFT
//! along time only, same centering, crop and log scaling.
//!
//! DFTs are unnormalized. For even and odd lengths alike the zero-frequency
//! bin lands at index `n / 2` after the shift.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::csi::{check_positive, CsiWindow, WindowRejection};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("frame 0 has a zero magnitude entry at subcarrier {subcarrier}, column {column}")]
    DivisionByZeroFrame { subcarrier: usize, column: usize },
    #[error("crop length {t} larger than input length {len}")]
    CropLargerThanInput { t: usize, len: usize },
    #[error("crop length {t} and input length {len} must both be even")]
    OddCrop { t: usize, len: usize },
    #[error("reference antenna entry is zero at frame {frame}, subcarrier {subcarrier}, tx {tx}")]
    ZeroReferenceEntry { frame: usize, subcarrier: usize, tx: usize },
    #[error("phase differencing needs at least 2 receive antennas, got {0}")]
    TooFewReceiveAntennas(usize),
    #[error("log scaling needs non-negative input, got {0}")]
    NegativeInput(f64),
    #[error("window shape {got:?} does not match pre-processor {expected:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid window: {0}")]
    InvalidWindow(#[from] WindowRejection),
}

/// Input representation and network layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineVariant {
    /// DFT magnitude and phase images into two parallel branches.
    WithDft,
    /// Normalized magnitude and unwrapped phase without DFT, two branches.
    NoDft,
    MagnitudeOnly,
    PhaseOnly,
    /// Real and imaginary parts of the frame-0-normalized complex window.
    StackedComplex,
    /// No-DFT magnitude and phase images concatenated into one branch.
    SingleCnn,
}

impl PipelineVariant {
    pub const ALL: [PipelineVariant; 6] = [
        PipelineVariant::WithDft,
        PipelineVariant::NoDft,
        PipelineVariant::MagnitudeOnly,
        PipelineVariant::PhaseOnly,
        PipelineVariant::StackedComplex,
        PipelineVariant::SingleCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineVariant::WithDft => "with-dft",
            PipelineVariant::NoDft => "no-dft",
            PipelineVariant::MagnitudeOnly => "mag-only",
            PipelineVariant::PhaseOnly => "phase-only",
            PipelineVariant::StackedComplex => "complex",
            PipelineVariant::SingleCnn => "single-cnn",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            PipelineVariant::WithDft => 0,
            PipelineVariant::NoDft => 1,
            PipelineVariant::MagnitudeOnly => 2,
            PipelineVariant::PhaseOnly => 3,
            PipelineVariant::StackedComplex => 4,
            PipelineVariant::SingleCnn => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    /// Whether the DFT/crop/log stages are part of this variant.
    pub fn uses_dft(self) -> bool {
        matches!(
            self,
            PipelineVariant::WithDft | PipelineVariant::MagnitudeOnly | PipelineVariant::PhaseOnly
        )
    }

    /// Number of input tensors (network branches).
    pub fn branch_count(self) -> usize {
        match self {
            PipelineVariant::WithDft | PipelineVariant::NoDft => 2,
            _ => 1,
        }
    }

    /// Input tensor shapes for a window of `i × n_f` with `n_r × n_t`
    /// antennas and crop length `t`.
    pub fn input_shapes(self, i: usize, n_f: usize, n_r: usize, n_t: usize, t: usize) -> Vec<[usize; 3]> {
        let j_abs = n_r * n_t;
        let j_phase = (n_r - 1) * n_t;
        match self {
            PipelineVariant::WithDft => vec![[t, n_f, j_abs], [t, n_f, j_phase]],
            PipelineVariant::NoDft => vec![[i, n_f, j_abs], [i, n_f, j_phase]],
            PipelineVariant::MagnitudeOnly => vec![[t, n_f, j_abs]],
            PipelineVariant::PhaseOnly => vec![[t, n_f, j_phase]],
            PipelineVariant::StackedComplex => vec![[i, n_f, 2 * j_abs]],
            PipelineVariant::SingleCnn => vec![[i, n_f, j_abs + j_phase]],
        }
    }
}

impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}; expected one of with-dft, no-dft, mag-only, phase-only, complex, single-cnn"))
    }
}

/// Classifier input: one real `H × W × C` tensor per network branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tensors: Vec<Array3<f64>>,
}

impl ModelInput {
    pub fn shapes(&self) -> Vec<[usize; 3]> {
        self.tensors.iter().map(|t| t.dim().into()).collect()
    }

    /// Debug dump: per tensor `rank u16 | dims u16…` then f32 LE values.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.tensors {
            let dims = t.shape();
            w.write_all(&(dims.len() as u16).to_le_bytes())?;
            for &d in dims {
                let d = u16::try_from(d)
                    .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u16"))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for v in t.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// `|X|` flattened to `I × n_f × n_r·n_t` (column `q·n_t + p`).
pub fn magnitude_image(x: &Array4<Complex64>) -> Array3<f64> {
    let (i, n_f, n_r, n_t) = x.dim();
    x.mapv(|v| v.norm())
        .into_shape_with_order((i, n_f, n_r * n_t))
        .expect("contiguous reshape")
}

/// Divides every frame by frame 0, element-wise.
pub fn normalize_magnitude(x_abs: &Array3<f64>) -> Result<Array3<f64>, PreprocessError> {
    let first = x_abs.index_axis(Axis(0), 0).to_owned();
    for ((k, j), v) in first.indexed_iter() {
        if !(*v > 0.0) {
            return Err(PreprocessError::DivisionByZeroFrame { subcarrier: k, column: j });
        }
    }
    let mut out = x_abs.clone();
    for mut frame in out.axis_iter_mut(Axis(0)) {
        frame /= &first;
    }
    Ok(out)
}

fn shift_index(m: usize, n: usize) -> usize {
    (m + n / 2) % n
}

fn planner_fft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

/// Unnormalized 2-D DFT of an `I × n_f` real slice, zero frequency moved to
/// `(I/2, n_f/2)`.
pub fn dft2_shift(slice: ArrayView2<f64>) -> Array2<Complex64> {
    let (rows, cols) = slice.dim();
    let mut data = slice.mapv(|v| Complex64::new(v, 0.0));
    if rows == 0 || cols == 0 {
        return data;
    }
    let col_fft = planner_fft(rows);
    let row_fft = planner_fft(cols);
    let mut buf = vec![Complex64::new(0.0, 0.0); rows];
    for mut col in data.axis_iter_mut(Axis(1)) {
        buf.iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
        col_fft.process(&mut buf);
        col.iter_mut().zip(buf.iter()).for_each(|(v, b)| *v = *b);
    }
    let mut rbuf = vec![Complex64::new(0.0, 0.0); cols];
    for mut row in data.axis_iter_mut(Axis(0)) {
        rbuf.iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        row_fft.process(&mut rbuf);
        row.iter_mut().zip(rbuf.iter()).for_each(|(v, b)| *v = *b);
    }
    let mut out = Array2::zeros((rows, cols));
    for ((a, b), v) in data.indexed_iter() {
        out[[shift_index(a, rows), shift_index(b, cols)]] = *v;
    }
    out
}

/// Unnormalized DFT of a real sequence, zero frequency moved to `len/2`.
pub fn dft1_time(seq: &[f64]) -> Vec<Complex64> {
    let n = seq.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = seq.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner_fft(n).process(&mut buf);
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (m, v) in buf.into_iter().enumerate() {
        out[shift_index(m, n)] = v;
    }
    out
}

fn check_crop(t: usize, len: usize) -> Result<(), PreprocessError> {
    if t > len {
        return Err(PreprocessError::CropLargerThanInput { t, len });
    }
    if !t.is_multiple_of(2) || !len.is_multiple_of(2) {
        return Err(PreprocessError::OddCrop { t, len });
    }
    Ok(())
}

/// Keeps rows `(I−T)/2 … (I−T)/2 + T − 1` of a shifted spectrum and takes
/// magnitudes.
pub fn crop_time(shifted: &Array3<Complex64>, t: usize) -> Result<Array3<f64>, PreprocessError> {
    let len = shifted.dim().0;
    check_crop(t, len)?;
    let start = (len - t) / 2;
    Ok(shifted.slice(s![start..start + t, .., ..]).mapv(|v| v.norm()))
}

/// Phase of every receive antenna `q ≥ 1` relative to antenna 0:
/// `out[i, k, q−1, p] = ∠(x[i,k,q,p] / x[i,k,0,p])`, in `(−π, π]`.
pub fn phase_difference(x: &Array4<Complex64>) -> Result<Array4<f64>, PreprocessError> {
    let (i_len, n_f, n_r, n_t) = x.dim();
    if n_r < 2 {
        return Err(PreprocessError::TooFewReceiveAntennas(n_r));
    }
    let mut out = Array4::zeros((i_len, n_f, n_r - 1, n_t));
    for i in 0..i_len {
        for k in 0..n_f {
            for p in 0..n_t {
                let reference = x[[i, k, 0, p]];
                if !(reference.norm() > 0.0) {
                    return Err(PreprocessError::ZeroReferenceEntry {
                        frame: i,
                        subcarrier: k,
                        tx: p,
                    });
                }
                for q in 1..n_r {
                    out[[i, k, q - 1, p]] = wrapped_arg(x[[i, k, q, p]] * reference.conj());
                }
            }
        }
    }
    Ok(out)
}

/// Argument in `(−π, π]` (`atan2` yields `−π` for a negative real with a
/// negative-zero imaginary part).
fn wrapped_arg(z: Complex64) -> f64 {
    let a = z.arg();
    if a <= -std::f64::consts::PI {
        a + 2.0 * std::f64::consts::PI
    } else {
        a
    }
}

/// Unwraps a phase sequence so every consecutive difference lies in `(−π, π]`.
pub fn unwrap_time(seq: &[f64]) -> Vec<f64> {
    let mut out = seq.to_vec();
    unwrap_in_place(&mut out);
    out
}

fn unwrap_in_place(seq: &mut [f64]) {
    use std::f64::consts::{PI, TAU};
    let Some(&first) = seq.first() else {
        return;
    };
    let (mut prev, mut acc) = (first, first);
    for v in seq.iter_mut().skip(1) {
        let d = *v - prev;
        // Steps already in range are the common case; skip the rounding.
        let d = if d > -PI && d <= PI { d } else { d - TAU * ((d - PI) / TAU).ceil() };
        prev = *v;
        acc += d;
        *v = acc;
    }
}

/// Element-wise `log10(x + 1)`.
pub fn log_scale(a: &Array3<f64>) -> Result<Array3<f64>, PreprocessError> {
    if let Some(&bad) = a.iter().find(|v| !(**v >= 0.0)) {
        return Err(PreprocessError::NegativeInput(bad));
    }
    Ok(a.mapv(|v| (v + 1.0).log10()))
}

/// Per-frame quantities shared by every window containing the frame.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    /// `n_f × n_r·n_t` magnitudes.
    pub mag: Array2<f64>,
    /// `n_f × (n_r−1)·n_t` wrapped phase differences.
    pub phase: Array2<f64>,
    /// `n_f × n_r·n_t` raw coefficients.
    pub raw: Array2<Complex64>,
}

impl FrameFeatures {
    /// From one down-selected channel array (`n_f × n_r × n_t`).
    pub fn from_reduced(h: &Array3<Complex64>) -> Result<Self, PreprocessError> {
        let (n_f, n_r, n_t) = h.dim();
        let x = h.view().insert_axis(Axis(0)).to_owned();
        check_positive(&x)?;
        let phase = phase_difference(&x)?
            .into_shape_with_order((n_f, (n_r - 1) * n_t))
            .expect("contiguous reshape");
        let raw = h
            .to_owned()
            .into_shape_with_order((n_f, n_r * n_t))
            .expect("contiguous reshape");
        Ok(Self {
            mag: raw.mapv(|v| v.norm()),
            phase,
            raw,
        })
    }
}

/// Reusable pre-processor with cached FFT plans for a fixed window geometry.
pub struct Preprocessor {
    len: usize,
    n_f: usize,
    crop: usize,
    time_fft: Arc<dyn Fft<f64>>,
    freq_fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Preprocessor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Preprocessor")
            .field("len", &self.len)
            .field("n_f", &self.n_f)
            .field("crop", &self.crop)
            .finish()
    }
}

impl Preprocessor {
    pub fn new(len: usize, n_f: usize, crop: usize) -> Result<Self, PreprocessError> {
        check_crop(crop, len)?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            len,
            n_f,
            crop,
            time_fft: planner.plan_fft_forward(len),
            freq_fft: planner.plan_fft_forward(n_f),
        })
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    /// Full pre-processing of a validated window.
    pub fn make_input(&self, window: &CsiWindow, variant: PipelineVariant) -> Result<ModelInput, PreprocessError> {
        let (i, n_f, _, _) = window.x.dim();
        if (i, n_f) != (self.len, self.n_f) {
            return Err(PreprocessError::ShapeMismatch {
                expected: (self.len, self.n_f),
                got: (i, n_f),
            });
        }
        let frames = window
            .x
            .axis_iter(Axis(0))
            .map(|h| FrameFeatures::from_reduced(&h.to_owned()))
            .collect::<Result<Vec<_>, _>>()?;
        self.from_features(frames.iter(), variant)
    }

    /// Pre-processing from cached per-frame features, oldest frame first.
    pub fn from_features<'a>(
        &self,
        frames: impl ExactSizeIterator<Item = &'a FrameFeatures>,
        variant: PipelineVariant,
    ) -> Result<ModelInput, PreprocessError> {
        let frames: Vec<&FrameFeatures> = frames.collect();
        if frames.len() != self.len || frames.iter().any(|f| f.mag.dim().0 != self.n_f) {
            return Err(PreprocessError::ShapeMismatch {
                expected: (self.len, self.n_f),
                got: (frames.len(), frames.first().map_or(0, |f| f.mag.dim().0)),
            });
        }
        let n_f = self.n_f;
        let tensors = match variant {
            PipelineVariant::WithDft => {
                let mag = Sequences::magnitude(&frames)?;
                let phase = Sequences::phase(&frames);
                vec![self.magnitude_spectrum(&mag), self.phase_spectrum(&phase)]
            }
            PipelineVariant::MagnitudeOnly => vec![self.magnitude_spectrum(&Sequences::magnitude(&frames)?)],
            PipelineVariant::PhaseOnly => vec![self.phase_spectrum(&Sequences::phase(&frames))],
            PipelineVariant::NoDft => vec![
                Sequences::magnitude(&frames)?.to_array(n_f),
                Sequences::phase(&frames).to_array(n_f),
            ],
            PipelineVariant::SingleCnn => {
                let mag = Sequences::magnitude(&frames)?.to_array(n_f);
                let phase = Sequences::phase(&frames).to_array(n_f);
                vec![ndarray::concatenate(Axis(2), &[mag.view(), phase.view()]).expect("same leading dims")]
            }
            PipelineVariant::StackedComplex => {
                let raw: Vec<_> = frames.iter().map(|f| f.raw.view()).collect();
                let raw = ndarray::stack(Axis(0), &raw).expect("uniform frame shapes");
                vec![stacked_complex(&raw)?]
            }
        };
        Ok(ModelInput { tensors })
    }

    /// Shifted temporal spectra of every sequence, cropped to the kept rows.
    /// Row `r` of sequence `q` lands at `q·crop + r`. Sequences go through
    /// the FFT in pairs packed as real and imaginary parts.
    fn cropped_time_spectra(&self, seqs: &Sequences) -> Vec<Complex64> {
        let len = self.len;
        let n = seqs.count();
        let start = (len - self.crop) / 2;
        let pairs = n.div_ceil(2);
        let mut buf = vec![Complex64::new(0.0, 0.0); pairs * len];
        for (p, z) in buf.chunks_exact_mut(len).enumerate() {
            let re = seqs.seq(2 * p);
            match (2 * p + 1 < n).then(|| seqs.seq(2 * p + 1)) {
                Some(im) => z.iter_mut().zip(re.iter().zip(im)).for_each(|(z, (&a, &b))| *z = Complex64::new(a, b)),
                None => z.iter_mut().zip(re).for_each(|(z, &a)| *z = Complex64::new(a, 0.0)),
            }
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.time_fft.get_inplace_scratch_len()];
        self.time_fft.process_with_scratch(&mut buf, &mut scratch);
        let mut out = vec![Complex64::new(0.0, 0.0); n * self.crop];
        for (p, z) in buf.chunks_exact(len).enumerate() {
            for r in 0..self.crop {
                let m = (start + r + len - len / 2) % len;
                let (zm, zc) = (z[m], z[(len - m) % len].conj());
                out[2 * p * self.crop + r] = (zm + zc) * 0.5;
                if 2 * p + 1 < n {
                    out[(2 * p + 1) * self.crop + r] = (zm - zc) * Complex64::new(0.0, -0.5);
                }
            }
        }
        out
    }

    /// 2-D DFT per column layer, cropped to the central rows, log scaled.
    /// Only the kept temporal rows go through the subcarrier-axis DFT.
    fn magnitude_spectrum(&self, seqs: &Sequences) -> Array3<f64> {
        let (n_f, cols, crop) = (self.n_f, seqs.cols, self.crop);
        let time = self.cropped_time_spectra(seqs);
        // One subcarrier-axis sequence per (column, kept row).
        let mut fbuf = vec![Complex64::new(0.0, 0.0); cols * crop * n_f];
        for k in 0..n_f {
            for j in 0..cols {
                for (r, &v) in time[(k * cols + j) * crop..][..crop].iter().enumerate() {
                    fbuf[(j * crop + r) * n_f + k] = v;
                }
            }
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.freq_fft.get_inplace_scratch_len()];
        self.freq_fft.process_with_scratch(&mut fbuf, &mut scratch);
        let mut out = Array3::zeros((crop, n_f, cols));
        for j in 0..cols {
            for r in 0..crop {
                for (m, b) in fbuf[(j * crop + r) * n_f..][..n_f].iter().enumerate() {
                    out[[r, shift_index(m, n_f), j]] = log_magnitude(*b);
                }
            }
        }
        out
    }

    /// 1-D temporal DFT per (subcarrier, column), cropped and log scaled.
    fn phase_spectrum(&self, seqs: &Sequences) -> Array3<f64> {
        let (n_f, cols, crop) = (self.n_f, seqs.cols, self.crop);
        let time = self.cropped_time_spectra(seqs);
        let mut out = Array3::zeros((crop, n_f, cols));
        let o = out.as_slice_mut().expect("standard layout");
        for (q, spec) in time.chunks_exact(crop).enumerate() {
            for (r, b) in spec.iter().enumerate() {
                o[r * n_f * cols + q] = log_magnitude(*b);
            }
        }
        out
    }
}

/// `log10(|z| + 1)`; spectra stay far from the range where `hypot` matters.
fn log_magnitude(z: Complex64) -> f64 {
    (z.norm_sqr().sqrt() + 1.0).log10()
}

/// Per-(subcarrier, column) time sequences of one window, stored back to
/// back: sequence `q = k·cols + j` occupies `data[q·len .. (q+1)·len]`.
struct Sequences {
    len: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Sequences {
    fn gather(frames: &[&FrameFeatures], pick: impl Fn(&FrameFeatures) -> &Array2<f64>) -> Self {
        let len = frames.len();
        let (n_f, cols) = pick(frames[0]).dim();
        let mut data = vec![0.0; len * n_f * cols];
        for (i, f) in frames.iter().enumerate() {
            let a = pick(f);
            match a.as_slice() {
                Some(vals) => vals.iter().enumerate().for_each(|(q, &v)| data[q * len + i] = v),
                None => a.iter().enumerate().for_each(|(q, &v)| data[q * len + i] = v),
            }
        }
        Self { len, cols, data }
    }

    /// Magnitudes divided by the window's first frame.
    fn magnitude(frames: &[&FrameFeatures]) -> Result<Self, PreprocessError> {
        let mut s = Self::gather(frames, |f| &f.mag);
        let cols = s.cols;
        for (q, seq) in s.data.chunks_exact_mut(s.len).enumerate() {
            let first = seq[0];
            if !(first > 0.0) {
                return Err(PreprocessError::DivisionByZeroFrame {
                    subcarrier: q / cols,
                    column: q % cols,
                });
            }
            seq.iter_mut().for_each(|v| *v /= first);
        }
        Ok(s)
    }

    /// Phase differences unwrapped along time.
    fn phase(frames: &[&FrameFeatures]) -> Self {
        let mut s = Self::gather(frames, |f| &f.phase);
        s.data.chunks_exact_mut(s.len).for_each(unwrap_in_place);
        s
    }

    fn count(&self) -> usize {
        self.data.len() / self.len
    }

    fn seq(&self, q: usize) -> &[f64] {
        &self.data[q * self.len..][..self.len]
    }

    fn to_array(&self, n_f: usize) -> Array3<f64> {
        let mut out = Array3::zeros((self.len, n_f, self.cols));
        let o = out.as_slice_mut().expect("standard layout");
        let per_frame = n_f * self.cols;
        for (q, seq) in self.data.chunks_exact(self.len).enumerate() {
            for (i, &v) in seq.iter().enumerate() {
                o[i * per_frame + q] = v;
            }
        }
        out
    }
}

/// Unwraps every `(subcarrier, column)` sequence along time.
pub fn unwrap_columns(mut phase: Array3<f64>) -> Array3<f64> {
    let (_, n_f, cols) = phase.dim();
    for k in 0..n_f {
        for j in 0..cols {
            let seq: Vec<f64> = phase.slice(s![.., k, j]).to_vec();
            for (dst, v) in phase.slice_mut(s![.., k, j]).iter_mut().zip(unwrap_time(&seq)) {
                *dst = v;
            }
        }
    }
    phase
}

/// `x[i] / x[0]` element-wise, real parts then imaginary parts along the
/// last axis.
pub fn stacked_complex(raw: &Array3<Complex64>) -> Result<Array3<f64>, PreprocessError> {
    let (len, n_f, cols) = raw.dim();
    let first = raw.index_axis(Axis(0), 0);
    for ((k, j), v) in first.indexed_iter() {
        if !(v.norm() > 0.0) {
            return Err(PreprocessError::DivisionByZeroFrame { subcarrier: k, column: j });
        }
    }
    let mut out = Array3::zeros((len, n_f, 2 * cols));
    for i in 0..len {
        for k in 0..n_f {
            for j in 0..cols {
                let r = raw[[i, k, j]] / first[[k, j]];
                out[[i, k, j]] = r.re;
                out[[i, k, cols + j]] = r.im;
            }
        }
    }
    Ok(out)
}

/// Flattens the last two axes of a 4-D array.
pub fn flatten_antennas(x: &Array4<f64>) -> Array3<f64> {
    let (i, n_f, a, b) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((i, n_f, a * b))
        .expect("contiguous reshape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::f64::consts::PI;

    #[test]
    fn normalize_first_row_is_ones_and_gain_cancels() {
        let x = Array3::from_shape_fn((6, 4, 3), |(i, k, j)| 1.0 + (i * 7 + k * 3 + j) as f64 * 0.1);
        let n = normalize_magnitude(&x).unwrap();
        assert!(n.index_axis(Axis(0), 0).iter().all(|&v| v == 1.0));
        let scaled = normalize_magnitude(&x.mapv(|v| v * 3.7)).unwrap();
        for (a, b) in n.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let constant = Array3::from_elem((5, 2, 2), 0.3);
        assert!(normalize_magnitude(&constant).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_rejects_zero_reference() {
        let mut x = Array3::from_elem((3, 2, 2), 1.0);
        x[[0, 1, 0]] = 0.0;
        assert_eq!(
            normalize_magnitude(&x),
            Err(PreprocessError::DivisionByZeroFrame { subcarrier: 1, column: 0 })
        );
    }

    #[test]
    fn dft2_of_ones_is_single_center_bin() {
        let x = Array2::from_elem((128, 14), 1.0);
        let y = dft2_shift(x.view());
        for ((a, b), v) in y.indexed_iter() {
            if (a, b) == (64, 7) {
                assert!((v.re - 1792.0).abs() < 1e-9 && v.im.abs() < 1e-9);
            } else {
                assert!(v.norm() < 1e-9, "bin ({a},{b}) = {v}");
            }
        }
    }

    #[test]
    fn dft2_of_impulse_is_flat() {
        let mut x = Array2::zeros((16, 8));
        x[[0, 0]] = 1.0;
        assert!(dft2_shift(x.view()).iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dft1_constant_and_sinusoid() {
        let y = dft1_time(&[2.5; 16]);
        assert!((y[8].norm() - 40.0).abs() < 1e-12);
        assert!(y.iter().enumerate().all(|(m, v)| m == 8 || v.norm() < 1e-12));
        let s: Vec<f64> = (0..32).map(|i| (2.0 * PI * 3.0 * i as f64 / 32.0).cos()).collect();
        let y = dft1_time(&s);
        assert!((y[16 + 3].norm() - 16.0).abs() < 1e-9);
        assert!((y[16 - 3].norm() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn crop_rows() {
        let x = Array3::from_shape_fn((128, 2, 1), |(i, _, _)| Complex64::new(-(i as f64), 0.0));
        let c = crop_time(&x, 50).unwrap();
        assert_eq!(c.dim(), (50, 2, 1));
        assert_eq!(c[[0, 0, 0]], 39.0);
        assert_eq!(c[[49, 1, 0]], 88.0);
        assert_eq!(crop_time(&x, 128).unwrap().dim(), (128, 2, 1));
        assert!(matches!(crop_time(&x, 130), Err(PreprocessError::CropLargerThanInput { .. })));
        assert!(matches!(crop_time(&x, 51), Err(PreprocessError::OddCrop { .. })));
    }

    #[test]
    fn phase_difference_shapes_and_identities() {
        let x = Array4::from_elem((128, 14, 3, 3), Complex64::new(0.3, -0.8));
        let d = phase_difference(&x).unwrap();
        assert_eq!(d.dim(), (128, 14, 2, 3));
        assert!(d.iter().all(|&v| v == 0.0));
        assert_eq!(flatten_antennas(&d).dim(), (128, 14, 6));

        let y = Array4::from_shape_fn((4, 2, 3, 2), |(i, k, q, p)| {
            Complex64::from_polar(1.0 + q as f64, (i + k * 2 + q * 3 + p) as f64 * 0.7)
        });
        let mut rotated = y.clone();
        for (i, mut frame) in rotated.axis_iter_mut(Axis(0)).enumerate() {
            frame.mapv_inplace(|v| v * Complex64::cis(1.3 * i as f64 + 0.2));
        }
        let a = phase_difference(&y).unwrap();
        let b = phase_difference(&rotated).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            let d = (u - v + PI).rem_euclid(2.0 * PI) - PI;
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn phase_difference_zero_reference() {
        let mut x = Array4::from_elem((2, 2, 2, 1), Complex64::new(1.0, 0.0));
        x[[1, 0, 0, 0]] = Complex64::new(0.0, 0.0);
        assert_eq!(
            phase_difference(&x),
            Err(PreprocessError::ZeroReferenceEntry { frame: 1, subcarrier: 0, tx: 0 })
        );
    }

    #[test]
    fn unwrap_examples() {
        let u = unwrap_time(&[3.0, -3.0]);
        assert_eq!(u[0], 3.0);
        assert!((u[1] - (3.0 + 2.0 * PI - 6.0)).abs() < 1e-15);
        assert!((u[1] - 3.283_185_307_179_586).abs() < 1e-12);
        let mono = [0.0, 0.5, 1.7, 2.9, 3.0];
        assert_eq!(unwrap_time(&mono), mono.to_vec());
        assert!(unwrap_time(&[]).is_empty());
    }

    #[test]
    fn log_scale_values() {
        let a = Array3::from_shape_vec((1, 1, 3), vec![0.0, 9.0, 99.0]).unwrap();
        let l = log_scale(&a).unwrap();
        assert_eq!(l.as_slice().unwrap(), &[0.0, 1.0, 2.0]);
        let neg = Array3::from_elem((1, 1, 1), -0.5);
        assert_eq!(log_scale(&neg), Err(PreprocessError::NegativeInput(-0.5)));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PipelineVariant::ALL {
            assert_eq!(v.name().parse::<PipelineVariant>().unwrap(), v);
            assert_eq!(PipelineVariant::from_tag(v.tag()), Some(v));
        }
        assert!("bogus".parse::<PipelineVariant>().is_err());
    }

    #[test]
    fn dump_header_is_eight_bytes_per_tensor() {
        let input = ModelInput {
            tensors: vec![Array3::zeros((2, 3, 4))],
        };
        let mut buf = Vec::new();
        input.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..8], &[3, 0, 2, 0, 3, 0, 4, 0]);
        assert_eq!(buf.len(), 8 + 24 * 4);
    }
}
