//! Synthetic MIMO-OFDM CSI.
//!
//! The channel is built directly at CSI level as a sum of specular paths,
//!
//! ```text
//! h[k, q, p] = Σ_l a_l · exp(−j2π f_k τ_l) · exp(−jπ q cos θ_l) · exp(−jπ p cos φ_l)
//! ```
//!
//! with uniform linear arrays at half-wavelength spacing. An optional moving
//! scatterer adds one extra path whose delay follows the transmitter →
//! scatterer → receiver path length frame by frame, which is what produces the
//! Doppler signature. Hardware impairments (common phase rotation, sampling
//! offset slope, estimation noise, stream gain) are applied on top.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::csi::{CsiError, CsiFrame, CsiWriter, Label, StreamHeader};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// 2.4 GHz band, channel 6.
pub const DEFAULT_CARRIER_HZ: f64 = 2.437e9;
pub const SUBCARRIER_SPACING_HZ: f64 = 312_500.0;
/// Static path delays must stay below this guard assumption.
pub const DEFAULT_MAX_DELAY_S: f64 = 800e-9;
/// Walking-scale upper bound on scatterer speed.
pub const DEFAULT_MAX_SPEED_MPS: f64 = 2.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene needs at least one static path")]
    EmptyScene,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("trajectory speed {speed:.3} m/s at frame {frame} exceeds {max} m/s")]
    TooFast { frame: usize, speed: f64, max: f64 },
    #[error(transparent)]
    Csi(#[from] CsiError),
}

/// Key-value simulation config.
///
/// Documented keys: `paths`, `delay_ns_max`, `speed_mps`, `cfo_hz`,
/// `sto_ns_walk`, `noise_std`, `frames`, `interval_ms`, `seed`. Extra keys
/// `n_sc`, `n_r`, `n_t`, `gain_min`, `gain_max`, `reflection_min`,
/// `reflection_max`, `room_m` and `jitter_us` are also understood.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Static path count per scene.
    pub paths: usize,
    pub delay_ns_max: f64,
    /// Upper bound on walking speed; per-scene speeds are drawn below it.
    pub speed_mps: f64,
    /// Upper bound on residual CFO magnitude.
    pub cfo_hz: f64,
    /// Per-frame standard deviation of the sampling-offset random walk.
    pub sto_ns_walk: f64,
    /// Upper bound on the per-coefficient complex estimation-noise standard
    /// deviation, relative to the RMS static channel magnitude.
    pub noise_std: f64,
    pub frames: usize,
    pub interval_ms: f64,
    pub seed: u64,
    pub n_sc: usize,
    pub n_r: usize,
    pub n_t: usize,
    /// Magnitude range of non-dominant static paths (dominant path has 1).
    pub gain_min: f64,
    pub gain_max: f64,
    /// Scatterer reflection gain, relative to the RMS static channel.
    pub reflection_min: f64,
    pub reflection_max: f64,
    pub room_m: f64,
    /// Uniform timestamp jitter half-width.
    pub jitter_us: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            paths: 6,
            delay_ns_max: 800.0,
            speed_mps: 1.2,
            cfo_hz: 2000.0,
            sto_ns_walk: 1.0,
            noise_std: 0.02,
            frames: 12_800,
            interval_ms: 10.0,
            seed: 1,
            n_sc: 56,
            n_r: 3,
            n_t: 3,
            gain_min: 0.1,
            gain_max: 0.6,
            reflection_min: 0.15,
            reflection_max: 0.35,
            room_m: 6.0,
            jitter_us: 0,
        }
    }
}

impl SimConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep their
    /// defaults.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SynthError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| SynthError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "paths" => self.paths = num(key, value)?,
            "delay_ns_max" => self.delay_ns_max = num(key, value)?,
            "speed_mps" => self.speed_mps = num(key, value)?,
            "cfo_hz" => self.cfo_hz = num(key, value)?,
            "sto_ns_walk" => self.sto_ns_walk = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "interval_ms" => self.interval_ms = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "n_sc" => self.n_sc = num(key, value)?,
            "n_r" => self.n_r = num(key, value)?,
            "n_t" => self.n_t = num(key, value)?,
            "gain_min" => self.gain_min = num(key, value)?,
            "gain_max" => self.gain_max = num(key, value)?,
            "reflection_min" => self.reflection_min = num(key, value)?,
            "reflection_max" => self.reflection_max = num(key, value)?,
            "room_m" => self.room_m = num(key, value)?,
            "jitter_us" => self.jitter_us = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.delay_ns_max <= 0.0 || self.delay_ns_max > DEFAULT_MAX_DELAY_S * 1e9 {
            return bad("delay_ns_max must be in (0, 800]");
        }
        if !(self.speed_mps > 0.0 && self.speed_mps <= DEFAULT_MAX_SPEED_MPS) {
            return bad("speed_mps must be in (0, 2.5]");
        }
        if self.noise_std < 0.0 || self.cfo_hz < 0.0 || self.sto_ns_walk < 0.0 {
            return bad("noise_std, cfo_hz and sto_ns_walk must be non-negative");
        }
        if self.interval_ms <= 0.0 {
            return bad("interval_ms must be positive");
        }
        if self.n_sc == 0 || self.n_r < 2 || self.n_t == 0 {
            return bad("need n_sc > 0, n_r >= 2, n_t > 0");
        }
        if !(0.0 <= self.gain_min && self.gain_min <= self.gain_max) {
            return bad("need 0 <= gain_min <= gain_max");
        }
        if !(0.0 <= self.reflection_min && self.reflection_min <= self.reflection_max) {
            return bad("need 0 <= reflection_min <= reflection_max");
        }
        if self.room_m <= 1.0 {
            return bad("room_m must exceed 1 m");
        }
        if self.jitter_us as f64 * 2.0 >= self.interval_ms * 1e3 {
            return bad("jitter_us must be below half the frame interval");
        }
        Ok(())
    }

    /// Renders the config back to its key-value form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "paths = {}", self.paths);
        let _ = writeln!(s, "delay_ns_max = {}", self.delay_ns_max);
        let _ = writeln!(s, "speed_mps = {}", self.speed_mps);
        let _ = writeln!(s, "cfo_hz = {}", self.cfo_hz);
        let _ = writeln!(s, "sto_ns_walk = {}", self.sto_ns_walk);
        let _ = writeln!(s, "noise_std = {}", self.noise_std);
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "interval_ms = {}", self.interval_ms);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_sc = {}", self.n_sc);
        let _ = writeln!(s, "n_r = {}", self.n_r);
        let _ = writeln!(s, "n_t = {}", self.n_t);
        let _ = writeln!(s, "gain_min = {}", self.gain_min);
        let _ = writeln!(s, "gain_max = {}", self.gain_max);
        let _ = writeln!(s, "reflection_min = {}", self.reflection_min);
        let _ = writeln!(s, "reflection_max = {}", self.reflection_max);
        let _ = writeln!(s, "room_m = {}", self.room_m);
        let _ = writeln!(s, "jitter_us = {}", self.jitter_us);
        s
    }
}

/// One static specular path.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticPath {
    pub gain: Complex64,
    pub delay_s: f64,
    /// Angle of arrival relative to the receive array axis.
    pub aoa_rad: f64,
    /// Angle of departure relative to the transmit array axis.
    pub aod_rad: f64,
}

/// Static multipath geometry of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: Vec<StaticPath>,
    pub carrier_hz: f64,
    pub spacing_hz: f64,
}

impl PathSet {
    pub fn validate(&self, max_delay_s: f64) -> Result<(), SynthError> {
        if self.paths.is_empty() {
            return Err(SynthError::EmptyScene);
        }
        for p in &self.paths {
            if !(p.delay_s >= 0.0 && p.delay_s < max_delay_s) {
                return Err(SynthError::Config(format!(
                    "path delay {} s outside [0, {max_delay_s})",
                    p.delay_s
                )));
            }
        }
        Ok(())
    }

    /// Absolute frequency of subcarrier `k`: `f_c + (k − n_sc/2)·Δf`.
    pub fn subcarrier_hz(&self, k: usize, n_sc: usize) -> f64 {
        self.carrier_hz + self.baseband_hz(k, n_sc)
    }

    /// Offset of subcarrier `k` from the carrier.
    pub fn baseband_hz(&self, k: usize, n_sc: usize) -> f64 {
        (k as f64 - (n_sc / 2) as f64) * self.spacing_hz
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Frequency response of the static paths alone.
    pub fn response(&self, n_sc: usize, n_r: usize, n_t: usize) -> Array3<Complex64> {
        let mut h = Array3::zeros((n_sc, n_r, n_t));
        for path in &self.paths {
            add_path(&mut h, self, path.gain, path.delay_s, path.aoa_rad, path.aod_rad);
        }
        h
    }
}

fn add_path(h: &mut Array3<Complex64>, ps: &PathSet, gain: Complex64, delay_s: f64, aoa: f64, aod: f64) {
    let (n_sc, n_r, n_t) = h.dim();
    let rx: Vec<Complex64> = (0..n_r).map(|q| Complex64::cis(-PI * q as f64 * aoa.cos())).collect();
    let tx: Vec<Complex64> = (0..n_t).map(|p| Complex64::cis(-PI * p as f64 * aod.cos())).collect();
    for k in 0..n_sc {
        let base = gain * Complex64::cis(-2.0 * PI * ps.subcarrier_hz(k, n_sc) * delay_s);
        for q in 0..n_r {
            let bq = base * rx[q];
            for p in 0..n_t {
                h[[k, q, p]] += bq * tx[p];
            }
        }
    }
}

/// Draws a static scene: the first path is dominant (unit magnitude), the rest
/// take magnitudes in `[gain_min, gain_max]`; phases, delays and angles are
/// uniform.
pub fn gen_static_scene(cfg: &SimConfig, seed: u64) -> Result<PathSet, SynthError> {
    if cfg.paths == 0 {
        return Err(SynthError::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_delay = cfg.delay_ns_max * 1e-9;
    let paths = (0..cfg.paths)
        .map(|l| {
            let mag = if l == 0 {
                1.0
            } else {
                rng.random_range(cfg.gain_min..=cfg.gain_max)
            };
            StaticPath {
                gain: Complex64::from_polar(mag, rng.random_range(-PI..PI)),
                delay_s: rng.random_range(0.0..max_delay),
                aoa_rad: rng.random_range(0.0..PI),
                aod_rad: rng.random_range(0.0..PI),
            }
        })
        .collect();
    let ps = PathSet {
        paths,
        carrier_hz: DEFAULT_CARRIER_HZ,
        spacing_hz: SUBCARRIER_SPACING_HZ,
    };
    ps.validate(max_delay.min(DEFAULT_MAX_DELAY_S))?;
    Ok(ps)
}

/// Scatterer positions sampled at frame times, plus fixed radio positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<[f64; 2]>,
    pub tx: [f64; 2],
    pub rx: [f64; 2],
    pub reflection_gain: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Trajectory {
    /// Constant-velocity motion.
    pub fn linear(
        start: [f64; 2],
        velocity: [f64; 2],
        n_frames: usize,
        interval_s: f64,
        tx: [f64; 2],
        rx: [f64; 2],
        reflection_gain: f64,
    ) -> Self {
        let positions = (0..n_frames)
            .map(|i| {
                let t = i as f64 * interval_s;
                [start[0] + velocity[0] * t, start[1] + velocity[1] * t]
            })
            .collect();
        Self {
            positions,
            tx,
            rx,
            reflection_gain,
        }
    }

    /// Random walk inside a square room. The scatterer only moves while
    /// `active(t)` holds; elsewhere it stands still.
    #[allow(clippy::too_many_arguments)]
    pub fn random_walk(
        n_frames: usize,
        interval_s: f64,
        speed_range: (f64, f64),
        room_m: f64,
        tx: [f64; 2],
        rx: [f64; 2],
        reflection_gain: f64,
        active: impl Fn(f64) -> bool,
        rng: &mut impl Rng,
    ) -> Self {
        let margin = 0.3;
        let lo = margin;
        let hi = room_m - margin;
        let mut pos = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let mut heading: f64 = rng.random_range(-PI..PI);
        let (vmin, vmax) = speed_range;
        let mut speed = rng.random_range(vmin..=vmax);
        let turn = Normal::new(0.0, 0.08).expect("valid std");
        let mut positions = Vec::with_capacity(n_frames);
        for i in 0..n_frames {
            positions.push(pos);
            let t = i as f64 * interval_s;
            if !active(t) {
                continue;
            }
            heading += turn.sample(rng);
            if rng.random_bool(0.01) {
                speed = rng.random_range(vmin..=vmax);
            }
            let mut next = [pos[0] + speed * heading.cos() * interval_s, pos[1] + speed * heading.sin() * interval_s];
            for (axis, v) in next.iter_mut().enumerate() {
                if *v < lo || *v > hi {
                    *v = v.clamp(lo, hi);
                    heading = if axis == 0 { PI - heading } else { -heading };
                }
            }
            pos = next;
        }
        Self {
            positions,
            tx,
            rx,
            reflection_gain,
        }
    }

    pub fn validate(&self, interval_s: f64, max_speed: f64) -> Result<(), SynthError> {
        for (i, w) in self.positions.windows(2).enumerate() {
            let speed = dist(w[0], w[1]) / interval_s;
            if speed > max_speed + 1e-9 {
                return Err(SynthError::TooFast {
                    frame: i + 1,
                    speed,
                    max: max_speed,
                });
            }
        }
        Ok(())
    }

    /// Transmitter → scatterer → receiver length at frame `i`.
    pub fn path_length(&self, i: usize) -> f64 {
        let s = self.positions[i];
        dist(self.tx, s) + dist(s, self.rx)
    }
}

/// Hardware impairments of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Impairments {
    pub cfo_hz: f64,
    /// Linear CFO drift.
    pub cfo_drift_hz_per_s: f64,
    /// Per-frame step standard deviation of the sampling-offset random walk.
    pub sto_walk_s: f64,
    pub noise_std: f64,
    pub amp_drift: f64,
}

impl Impairments {
    pub fn none() -> Self {
        Self {
            cfo_hz: 0.0,
            cfo_drift_hz_per_s: 0.0,
            sto_walk_s: 0.0,
            noise_std: 0.0,
            amp_drift: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.noise_std >= 0.0) || !(self.sto_walk_s >= 0.0) {
            return Err(SynthError::Config("noise_std and sto walk must be non-negative".into()));
        }
        if !(self.amp_drift > 0.0) {
            return Err(SynthError::Config("amp_drift must be positive".into()));
        }
        Ok(())
    }
}

/// Lazily synthesized CSI stream.
pub struct SynthStream {
    header: StreamHeader,
    paths: PathSet,
    static_h: Array3<Complex64>,
    traj: Option<Trajectory>,
    imp: Impairments,
    n_frames: usize,
    interval_s: f64,
    jitter_us: u64,
    next: usize,
    sto_s: f64,
    last_ts: Option<u64>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    sto_step: Option<Normal<f64>>,
}

impl SynthStream {
    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Overrides the stream label (mixed-activity streams are unlabeled).
    pub fn with_label(mut self, label: Option<Label>) -> Self {
        self.header.label = label;
        self
    }

    pub fn with_jitter_us(mut self, jitter_us: u64) -> Self {
        self.jitter_us = jitter_us;
        self
    }

    fn frame(&mut self, i: usize) -> CsiFrame {
        let (n_sc, n_r, n_t) = self.static_h.dim();
        let mut ts = (i as f64 * self.interval_s * 1e6).round() as u64;
        if self.jitter_us > 0 && i > 0 {
            let j = self.rng.random_range(0..=2 * self.jitter_us);
            ts = (ts + j).saturating_sub(self.jitter_us);
        }
        if let Some(prev) = self.last_ts {
            ts = ts.max(prev + 1);
        }
        self.last_ts = Some(ts);
        let t = ts as f64 * 1e-6;

        let mut h = self.static_h.clone();
        if let Some(traj) = &self.traj {
            let s = traj.positions[i];
            let delay = traj.path_length(i) / SPEED_OF_LIGHT;
            let aoa = (s[1] - traj.rx[1]).atan2(s[0] - traj.rx[0]);
            let aod = (s[1] - traj.tx[1]).atan2(s[0] - traj.tx[0]);
            add_path(&mut h, &self.paths, Complex64::new(traj.reflection_gain, 0.0), delay, aoa, aod);
        }

        if let Some(step) = &self.sto_step {
            if i > 0 {
                self.sto_s += step.sample(&mut self.rng);
            }
        }
        let cfo_phase = 2.0 * PI * (self.imp.cfo_hz * t + 0.5 * self.imp.cfo_drift_hz_per_s * t * t);
        let common = Complex64::cis(cfo_phase);
        for k in 0..n_sc {
            let f = common * Complex64::cis(-2.0 * PI * self.paths.baseband_hz(k, n_sc) * self.sto_s);
            for q in 0..n_r {
                for p in 0..n_t {
                    h[[k, q, p]] *= f;
                }
            }
        }
        if let Some(noise) = &self.noise {
            for v in h.iter_mut() {
                *v += Complex64::new(noise.sample(&mut self.rng), noise.sample(&mut self.rng));
            }
        }
        if self.imp.amp_drift != 1.0 {
            h.mapv_inplace(|v| v * self.imp.amp_drift);
        }
        CsiFrame::new(ts, h)
    }
}

impl Iterator for SynthStream {
    type Item = CsiFrame;

    fn next(&mut self) -> Option<CsiFrame> {
        if self.next >= self.n_frames {
            return None;
        }
        let f = self.frame(self.next);
        self.next += 1;
        Some(f)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.n_frames - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for SynthStream {}

/// Builds a stream of `n_frames` frames at `interval_s` spacing. The label is
/// `Motion` when a trajectory is given and `Empty` otherwise.
pub fn synth_csi_series(
    paths: &PathSet,
    traj: Option<&Trajectory>,
    imp: &Impairments,
    n_frames: usize,
    interval_s: f64,
    header: &StreamHeader,
    seed: u64,
) -> Result<SynthStream, SynthError> {
    paths.validate(DEFAULT_MAX_DELAY_S)?;
    imp.validate()?;
    if header.n_sc == 0 || header.n_r == 0 || header.n_t == 0 {
        return Err(SynthError::Config("header has a zero dimension".into()));
    }
    if !(interval_s > 0.0) {
        return Err(SynthError::Config("frame interval must be positive".into()));
    }
    if let Some(tr) = traj {
        if tr.positions.len() < n_frames {
            return Err(SynthError::Config(format!(
                "trajectory has {} samples for {n_frames} frames",
                tr.positions.len()
            )));
        }
        tr.validate(interval_s, DEFAULT_MAX_SPEED_MPS)?;
    }
    let mut header = header.clone();
    header.label = Some(if traj.is_some() { Label::Motion } else { Label::Empty });
    header.sample_interval_ms = interval_s * 1e3;
    let noise = (imp.noise_std > 0.0)
        .then(|| Normal::new(0.0, imp.noise_std / std::f64::consts::SQRT_2).expect("finite std"));
    let sto_step = (imp.sto_walk_s > 0.0).then(|| Normal::new(0.0, imp.sto_walk_s).expect("finite std"));
    Ok(SynthStream {
        static_h: paths.response(header.n_sc, header.n_r, header.n_t),
        header,
        paths: paths.clone(),
        traj: traj.cloned(),
        imp: imp.clone(),
        n_frames,
        interval_s,
        jitter_us: 0,
        next: 0,
        sto_s: 0.0,
        last_ts: None,
        rng: ChaCha8Rng::seed_from_u64(seed),
        noise,
        sto_step,
    })
}

/// Everything needed to regenerate one scene ("day") of a dataset.
#[derive(Debug, Clone)]
pub struct Scene {
    pub day_id: String,
    pub paths: PathSet,
    pub impairments: Impairments,
    pub tx: [f64; 2],
    pub rx: [f64; 2],
    pub speed_range: (f64, f64),
    pub reflection_gain: f64,
    pub seed: u64,
    cfg: SimConfig,
}

impl Scene {
    /// Draws fresh geometry and impairments for one scene.
    pub fn random(cfg: &SimConfig, day_id: impl Into<String>, seed: u64) -> Result<Self, SynthError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = gen_static_scene(cfg, rng.random())?;
        let room = cfg.room_m;
        let (tx, rx) = loop {
            let a = [rng.random_range(0.0..room), rng.random_range(0.0..room)];
            let b = [rng.random_range(0.0..room), rng.random_range(0.0..room)];
            if dist(a, b) >= 1.0 {
                break (a, b);
            }
        };
        let static_rms = {
            let h = paths.response(cfg.n_sc, cfg.n_r, cfg.n_t);
            (h.iter().map(|v| v.norm_sqr()).sum::<f64>() / h.len() as f64).sqrt()
        };
        let reflection_gain = static_rms * rng.random_range(cfg.reflection_min..=cfg.reflection_max);
        let cfo = if cfg.cfo_hz > 0.0 {
            rng.random_range(-cfg.cfo_hz..=cfg.cfo_hz)
        } else {
            0.0
        };
        let impairments = Impairments {
            cfo_hz: cfo,
            cfo_drift_hz_per_s: rng.random_range(-1.0..=1.0) * cfg.cfo_hz * 1e-3,
            sto_walk_s: cfg.sto_ns_walk * 1e-9,
            noise_std: cfg.noise_std * rng.random_range(0.5..=1.0) * static_rms,
            amp_drift: rng.random_range(0.5..=2.0),
        };
        let vmax = cfg.speed_mps;
        Ok(Self {
            day_id: day_id.into(),
            paths,
            impairments,
            tx,
            rx,
            speed_range: (0.25 * vmax, vmax),
            reflection_gain,
            seed: rng.random(),
            cfg: cfg.clone(),
        })
    }

    fn header(&self) -> StreamHeader {
        StreamHeader::new(self.cfg.n_sc, self.cfg.n_r, self.cfg.n_t, None, self.day_id.clone())
    }

    fn interval_s(&self) -> f64 {
        self.cfg.interval_ms * 1e-3
    }

    /// Random-walk trajectory; the scatterer moves only while `active(t)`.
    pub fn trajectory(&self, n_frames: usize, seed: u64, active: impl Fn(f64) -> bool) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Trajectory::random_walk(
            n_frames,
            self.interval_s(),
            self.speed_range,
            self.cfg.room_m,
            self.tx,
            self.rx,
            self.reflection_gain,
            active,
            &mut rng,
        )
    }

    /// Stream of `n_frames` for `label`; `stream_seed` separates runs of
    /// the same scene.
    pub fn stream(&self, label: Label, n_frames: usize, stream_seed: u64) -> Result<SynthStream, SynthError> {
        let seed = self.seed ^ stream_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let traj = match label {
            Label::Motion => Some(self.trajectory(n_frames, seed.rotate_left(17), |_| true)),
            Label::Empty => None,
        };
        let s = synth_csi_series(
            &self.paths,
            traj.as_ref(),
            &self.impairments,
            n_frames,
            self.interval_s(),
            &self.header(),
            seed,
        )?;
        Ok(s.with_jitter_us(self.cfg.jitter_us))
    }

    /// Unlabeled stream with motion only inside `schedule` (seconds,
    /// half-open intervals).
    pub fn scheduled_stream(
        &self,
        n_frames: usize,
        schedule: &[(f64, f64)],
        stream_seed: u64,
    ) -> Result<SynthStream, SynthError> {
        let seed = self.seed ^ stream_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let sched = schedule.to_vec();
        let traj = self.trajectory(n_frames, seed.rotate_left(17), move |t| {
            sched.iter().any(|&(a, b)| t >= a && t < b)
        });
        let s = synth_csi_series(
            &self.paths,
            Some(&traj),
            &self.impairments,
            n_frames,
            self.interval_s(),
            &self.header(),
            seed,
        )?;
        Ok(s.with_label(None).with_jitter_us(self.cfg.jitter_us))
    }
}

/// Dataset layout: `scenes` days, each with `windows_per_label` windows of
/// `window_len` frames per label.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub windows_per_label: usize,
    pub window_len: usize,
    pub sim: SimConfig,
}

/// Draws every scene of a dataset. Day ids are `day-00`, `day-01`, ….
pub fn gen_scenes(spec: &DatasetSpec, seed: u64) -> Result<Vec<Scene>, SynthError> {
    if spec.scenes == 0 || spec.windows_per_label == 0 || spec.window_len == 0 {
        return Err(SynthError::Config("scene, window and frame counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.scenes)
        .map(|i| Scene::random(&spec.sim, format!("day-{i:02}"), rng.random()))
        .collect()
}

/// The two labeled streams of a dataset scene, human-free first.
pub fn scene_streams(scene: &Scene, spec: &DatasetSpec) -> Result<[SynthStream; 2], SynthError> {
    let n = spec.windows_per_label * spec.window_len;
    Ok([scene.stream(Label::Empty, n, 1)?, scene.stream(Label::Motion, n, 2)?])
}

/// Writes one file per scene into `dir`, each holding a human-free and a
/// motion segment. Returns the file paths.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let scenes = gen_scenes(spec, seed)?;
    let mut out = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let path = dir.join(format!("{}.csi", scene.day_id));
        let file = File::create(&path).map_err(CsiError::from)?;
        let mut w = CsiWriter::new(BufWriter::new(file));
        for stream in scene_streams(scene, spec)? {
            let n = u32::try_from(stream.n_frames())
                .map_err(|_| SynthError::Config("segment longer than u32::MAX frames".into()))?;
            w.begin_stream(&stream.header().clone(), Some(n))?;
            for f in stream {
                w.write_frame(&f)?;
            }
        }
        w.finish()?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> StreamHeader {
        StreamHeader::new(56, 3, 3, None, "t")
    }

    fn paths(seed: u64) -> PathSet {
        gen_static_scene(&SimConfig { paths: 5, ..Default::default() }, seed).unwrap()
    }

    #[test]
    fn static_scene_respects_bounds_and_seed() {
        let a = paths(7);
        assert_eq!(a.paths.len(), 5);
        assert!(a.paths.iter().all(|p| p.delay_s >= 0.0 && p.delay_s < 800e-9));
        assert_eq!(a, paths(7));
        assert_ne!(a, paths(8));
    }

    #[test]
    fn empty_scene_is_error() {
        let cfg = SimConfig { paths: 0, ..Default::default() };
        assert!(matches!(gen_static_scene(&cfg, 1), Err(SynthError::EmptyScene)));
    }

    #[test]
    fn static_noiseless_stream_is_constant() {
        let s = synth_csi_series(&paths(3), None, &Impairments::none(), 20, 0.01, &header(), 1).unwrap();
        assert_eq!(s.header().label, Some(Label::Empty));
        let frames: Vec<_> = s.collect();
        for f in &frames[1..] {
            assert_eq!(f.h, frames[0].h);
        }
    }

    #[test]
    fn cfo_and_sto_keep_magnitude_and_rx_phase_difference() {
        let imp = Impairments {
            cfo_hz: 1234.5,
            cfo_drift_hz_per_s: 3.0,
            sto_walk_s: 5e-9,
            noise_std: 0.0,
            amp_drift: 1.0,
        };
        let frames: Vec<_> = synth_csi_series(&paths(4), None, &imp, 30, 0.01, &header(), 9).unwrap().collect();
        let f0 = &frames[0].h;
        for f in &frames[1..] {
            for ((idx, v), v0) in f.h.indexed_iter().zip(f0.iter()) {
                assert!((v.norm() - v0.norm()).abs() < 1e-12);
                let (k, q, p) = idx;
                let d = (v * f.h[[k, 0, p]].conj()).arg() - (f0[[k, q, p]] * f0[[k, 0, p]].conj()).arg();
                let d = (d + PI).rem_euclid(2.0 * PI) - PI;
                assert!(d.abs() < 1e-9, "phase difference drifted by {d}");
            }
        }
    }

    #[test]
    fn trajectory_speed_check() {
        let t = Trajectory::linear([1.0, 1.0], [3.0, 0.0], 10, 0.01, [0.0, 0.0], [0.0, 1.0], 0.2);
        assert!(matches!(t.validate(0.01, 2.5), Err(SynthError::TooFast { .. })));
        let t = Trajectory::linear([1.0, 1.0], [1.0, 0.0], 10, 0.01, [0.0, 0.0], [0.0, 1.0], 0.2);
        t.validate(0.01, 2.5).unwrap();
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = SimConfig {
            paths: 4,
            noise_std: 0.05,
            seed: 99,
            ..Default::default()
        };
        assert_eq!(SimConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(SimConfig::parse("bogus = 1").is_err());
        assert!(SimConfig::parse("paths 3").is_err());
    }

    #[test]
    fn motion_label_follows_trajectory() {
        let scene = Scene::random(&SimConfig::default(), "d", 5).unwrap();
        let s = scene.stream(Label::Motion, 10, 1).unwrap();
        assert_eq!(s.header().label, Some(Label::Motion));
        let s = scene.scheduled_stream(10, &[(0.0, 1.0)], 1).unwrap();
        assert_eq!(s.header().label, None);
    }
}
