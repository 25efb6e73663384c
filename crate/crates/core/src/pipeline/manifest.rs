use std::fmt::Write as _;
use std::path::PathBuf;

use super::{BuildConfig, PipelineError, TrainConfig};

/// Text run manifest: `key = value` lines, `#` comments. `train` and `test`
/// may repeat, one input file per line.
///
/// Keys: `variant`, `seed`, `epochs`, `lr`, `batch`, `l2`, `beta1`, `beta2`,
/// `adam_eps`, `stride`, `val_fraction`, `window_len`, `n_f`, `crop`,
/// `span_s`, `span_tol_s`, `train`, `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub build: BuildConfig,
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            build: BuildConfig::default(),
            train: TrainConfig::default(),
            val_fraction: 0.1,
            train_files: Vec::new(),
            test_files: Vec::new(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut m = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::Manifest {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            m.set(k.trim(), v.trim())
                .map_err(|msg| PipelineError::Manifest { line: i + 1, msg })?;
        }
        Ok(m)
    }

    /// Applies one setting; `train`/`test` append a file.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "variant" => self.build.variant = v.parse()?,
            "seed" => self.train.seed = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "lr" => self.train.adam.lr = num(key, v)?,
            "batch" => self.train.batch = num(key, v)?,
            "l2" => self.train.l2 = num(key, v)?,
            "beta1" => self.train.adam.beta1 = num(key, v)?,
            "beta2" => self.train.adam.beta2 = num(key, v)?,
            "adam_eps" => self.train.adam.eps = num(key, v)?,
            "stride" => self.build.stride = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "window_len" => self.build.window.len = num(key, v)?,
            "n_f" => self.build.window.n_f = num(key, v)?,
            "crop" => self.build.crop = num(key, v)?,
            "span_s" => self.build.window.nominal_span_s = num(key, v)?,
            "span_tol_s" => self.build.window.tol_s = num(key, v)?,
            "train" => self.train_files.push(PathBuf::from(v)),
            "test" => self.test_files.push(PathBuf::from(v)),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the manifest.
    pub fn to_text(&self) -> String {
        let b = &self.build;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", b.variant);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "lr = {}", t.adam.lr);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "l2 = {}", t.l2);
        let _ = writeln!(s, "beta1 = {}", t.adam.beta1);
        let _ = writeln!(s, "beta2 = {}", t.adam.beta2);
        let _ = writeln!(s, "adam_eps = {}", t.adam.eps);
        let _ = writeln!(s, "stride = {}", b.stride);
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "window_len = {}", b.window.len);
        let _ = writeln!(s, "n_f = {}", b.window.n_f);
        let _ = writeln!(s, "crop = {}", b.crop);
        let _ = writeln!(s, "span_s = {}", b.window.nominal_span_s);
        let _ = writeln!(s, "span_tol_s = {}", b.window.tol_s);
        for f in &self.train_files {
            let _ = writeln!(s, "train = {}", f.display());
        }
        for f in &self.test_files {
            let _ = writeln!(s, "test = {}", f.display());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::PipelineVariant;

    #[test]
    fn parse_and_round_trip() {
        let text = "# run\nvariant = no-dft\nseed = 9\nlr = 0.0005\ntrain = a.csi\ntrain = b.csi\ntest = c.csi\n";
        let m = RunManifest::parse(text).unwrap();
        assert_eq!(m.build.variant, PipelineVariant::NoDft);
        assert_eq!(m.train.seed, 9);
        assert_eq!(m.train.adam.lr, 0.0005);
        assert_eq!(m.train_files.len(), 2);
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match RunManifest::parse("seed = 1\nbogus = 3\n") {
            Err(PipelineError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RunManifest::parse("epochs = many").is_err());
        assert!(RunManifest::parse("variant = fancy").is_err());
    }
}
