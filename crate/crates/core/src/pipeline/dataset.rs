use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::PipelineError;
use crate::csi::{CsiFrame, CsiReader, Label, Record, StreamHeader, WindowConfig};
use crate::nn::Tensor;
use crate::preprocess::{ModelInput, PipelineVariant, Preprocessor};
use crate::sliding::SlidingFeatures;

/// How windows are cut from streams and turned into classifier inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    pub window: WindowConfig,
    /// Frames between consecutive window starts.
    pub stride: usize,
    /// Kept temporal rows for the DFT variants.
    pub crop: usize,
    pub variant: PipelineVariant,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            stride: 128,
            crop: 50,
            variant: PipelineVariant::WithDft,
        }
    }
}

/// One pre-processed window. Branch tensors are flattened back to back and
/// stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub data: Vec<f32>,
    pub label: Label,
    /// Index into [`Dataset::days`].
    pub day: usize,
    pub last_timestamp_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variant: PipelineVariant,
    /// `H × W × C` per branch.
    pub shapes: Vec<[usize; 3]>,
    pub days: Vec<String>,
    pub samples: Vec<Sample>,
    /// Rejected window counts by reason tag.
    pub rejected: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn empty(variant: PipelineVariant) -> Self {
        Self {
            variant,
            shapes: Vec::new(),
            days: Vec::new(),
            samples: Vec::new(),
            rejected: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn day_index(&mut self, day: &str) -> usize {
        match self.days.iter().position(|d| d == day) {
            Some(i) => i,
            None => {
                self.days.push(day.to_string());
                self.days.len() - 1
            }
        }
    }

    /// Appends one classifier input.
    pub fn push(&mut self, input: &ModelInput, label: Label, day: &str, last_timestamp_us: u64) -> Result<(), PipelineError> {
        let shapes = input.shapes();
        if self.shapes.is_empty() && self.samples.is_empty() {
            self.shapes = shapes;
        } else if self.shapes != shapes {
            return Err(PipelineError::ShapeMismatch(format!(
                "input shapes {shapes:?} differ from dataset {:?}",
                self.shapes
            )));
        }
        let data = input.tensors.iter().flat_map(|t| t.iter().map(|&v| v as f32)).collect();
        let day = self.day_index(day);
        self.samples.push(Sample {
            data,
            label,
            day,
            last_timestamp_us,
        });
        Ok(())
    }

    /// Appends `other`, matching days by id.
    pub fn concat(mut self, other: Dataset) -> Result<Dataset, PipelineError> {
        if other.variant != self.variant {
            return Err(PipelineError::VariantMismatch {
                expected: self.variant,
                got: other.variant,
            });
        }
        if other.samples.is_empty() && other.shapes.is_empty() {
            for (k, v) in other.rejected {
                *self.rejected.entry(k).or_default() += v;
            }
            return Ok(self);
        }
        if self.samples.is_empty() && self.shapes.is_empty() {
            self.shapes = other.shapes.clone();
        } else if self.shapes != other.shapes {
            return Err(PipelineError::ShapeMismatch(format!(
                "datasets have shapes {:?} and {:?}",
                self.shapes, other.shapes
            )));
        }
        let remap: Vec<usize> = other.days.iter().map(|d| self.day_index(d)).collect();
        for mut s in other.samples {
            s.day = remap[s.day];
            self.samples.push(s);
        }
        for (k, v) in other.rejected {
            *self.rejected.entry(k).or_default() += v;
        }
        Ok(self)
    }

    /// Seeded random subset of `n` samples (all of them if `n ≥ len`),
    /// kept in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// New dataset holding the given samples (days kept as is).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            variant: self.variant,
            shapes: self.shapes.clone(),
            days: self.days.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            rejected: BTreeMap::new(),
        }
    }

    /// `[label 0, label 1]` counts over `idx`.
    pub fn class_counts(&self, idx: &[usize]) -> [usize; 2] {
        let mut c = [0, 0];
        for &i in idx {
            c[self.samples[i].label.as_u8() as usize] += 1;
        }
        c
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label.as_u8() as usize).collect()
    }

    /// Indices of every sample whose day is in `days`.
    pub fn indices_for_days(&self, days: &BTreeSet<&str>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| days.contains(self.days[self.samples[i].day].as_str()))
            .collect()
    }

    /// Branch tensors of one sample, widened back to `f64`.
    pub fn input(&self, i: usize) -> ModelInput {
        let data = &self.samples[i].data;
        let mut offset = 0;
        let tensors = self
            .shapes
            .iter()
            .map(|s| {
                let len: usize = s.iter().product();
                let v = data[offset..offset + len].iter().map(|&x| x as f64).collect();
                offset += len;
                ndarray::Array3::from_shape_vec((s[0], s[1], s[2]), v).expect("sample length matches shapes")
            })
            .collect();
        ModelInput { tensors }
    }

    /// `N × H × W × C` tensors, one per branch, for the selected samples.
    pub fn batch(&self, idx: &[usize]) -> Vec<Tensor> {
        let mut offset = 0;
        self.shapes
            .iter()
            .map(|s| {
                let len: usize = s.iter().product();
                let mut data = Vec::with_capacity(idx.len() * len);
                for &i in idx {
                    data.extend(self.samples[i].data[offset..offset + len].iter().map(|&v| v as f64));
                }
                offset += len;
                Tensor::new(vec![idx.len(), s[0], s[1], s[2]], data).expect("sample length matches shapes")
            })
            .collect()
    }
}

/// Incremental dataset construction from stream records.
pub struct DatasetBuilder {
    cfg: BuildConfig,
    pre: Preprocessor,
    sliding: SlidingFeatures,
    current: Option<(String, Label)>,
    ds: Dataset,
}

impl DatasetBuilder {
    pub fn new(cfg: BuildConfig) -> Result<Self, PipelineError> {
        if cfg.stride == 0 {
            return Err(PipelineError::Config("stride must be positive".into()));
        }
        Ok(Self {
            pre: Preprocessor::new(cfg.window.len, cfg.window.n_f, cfg.crop)?,
            sliding: SlidingFeatures::new(cfg.window, cfg.stride),
            current: None,
            ds: Dataset::empty(cfg.variant),
            cfg,
        })
    }

    /// Starts a labeled segment; windows never straddle segments.
    pub fn begin_segment(&mut self, header: &StreamHeader) -> Result<(), PipelineError> {
        header.validate(self.cfg.window.n_f)?;
        let label = header.label.ok_or_else(|| PipelineError::MissingLabel(header.day_id.clone()))?;
        self.sliding.reset();
        self.current = Some((header.day_id.clone(), label));
        Ok(())
    }

    pub fn push_frame(&mut self, frame: &CsiFrame) -> Result<(), PipelineError> {
        let (day, label) = self
            .current
            .as_ref()
            .ok_or_else(|| PipelineError::Config("frame before any stream header".into()))?;
        match self.sliding.push(frame) {
            None => Ok(()),
            Some(Err(r)) => {
                *self.ds.rejected.entry(r.reason().to_string()).or_default() += 1;
                Ok(())
            }
            Some(Ok(span)) => {
                let input = self.pre.from_features(self.sliding.features(), self.cfg.variant)?;
                let (day, label) = (day.clone(), *label);
                self.ds.push(&input, label, &day, span.last_timestamp_us)
            }
        }
    }

    pub fn push_record(&mut self, record: &Record) -> Result<(), PipelineError> {
        match record {
            Record::Header(h) => self.begin_segment(h),
            Record::Frame(f) => self.push_frame(f),
        }
    }

    pub fn finish(self) -> Dataset {
        self.ds
    }
}

fn non_empty(ds: Dataset) -> Result<Dataset, PipelineError> {
    if ds.is_empty() {
        return Err(PipelineError::NoValidWindows {
            rejected: ds.rejected.values().sum(),
        });
    }
    Ok(ds)
}

fn merge(parts: Vec<Dataset>, variant: PipelineVariant) -> Result<Dataset, PipelineError> {
    parts.into_iter().try_fold(Dataset::empty(variant), Dataset::concat)
}

/// Builds a dataset from one canonical CSI file.
pub fn build_dataset_from_file(path: &Path, cfg: &BuildConfig) -> Result<Dataset, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::Read {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let mut b = DatasetBuilder::new(*cfg)?;
    for rec in CsiReader::new(BufReader::new(file)) {
        let rec = rec.map_err(|e| PipelineError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        b.push_record(&rec)?;
    }
    Ok(b.finish())
}

/// Builds a dataset from files, in parallel per file; samples keep file
/// order. Fails with `NoValidWindows` if nothing survived validation.
pub fn build_dataset(paths: &[PathBuf], cfg: &BuildConfig) -> Result<Dataset, PipelineError> {
    let parts = paths
        .par_iter()
        .map(|p| build_dataset_from_file(p, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    non_empty(merge(parts, cfg.variant)?)
}

/// Builds a dataset from labeled in-memory streams `(header, frames)`,
/// in parallel per stream.
pub fn build_dataset_from_streams<I>(streams: Vec<(StreamHeader, I)>, cfg: &BuildConfig) -> Result<Dataset, PipelineError>
where
    I: IntoIterator<Item = CsiFrame> + Send,
{
    let parts = streams
        .into_par_iter()
        .map(|(header, frames)| {
            let mut b = DatasetBuilder::new(*cfg)?;
            b.begin_segment(&header)?;
            for f in frames {
                b.push_frame(&f)?;
            }
            Ok(b.finish())
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    non_empty(merge(parts, cfg.variant)?)
}

/// Sample indices for training, validation and testing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Splits by day id. Validation samples are a seeded random fraction of
    /// the training days' samples; test days never contribute to it.
    pub fn by_days(
        ds: &Dataset,
        train_days: &[String],
        test_days: &[String],
        val_fraction: f64,
        seed: u64,
    ) -> Result<Split, PipelineError> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(PipelineError::Config(format!("val fraction {val_fraction} outside [0, 1)")));
        }
        let train: BTreeSet<&str> = train_days.iter().map(String::as_str).collect();
        let test: BTreeSet<&str> = test_days.iter().map(String::as_str).collect();
        if let Some(d) = train.intersection(&test).next() {
            return Err(PipelineError::DayOverlap(d.to_string()));
        }
        for d in train.iter().chain(&test) {
            if !ds.days.iter().any(|x| x == d) {
                return Err(PipelineError::UnknownDay(d.to_string()));
            }
        }
        let mut train_idx = ds.indices_for_days(&train);
        let test_idx = ds.indices_for_days(&test);
        let n_val = (train_idx.len() as f64 * val_fraction).round() as usize;
        let mut shuffled = train_idx.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut val: Vec<usize> = shuffled[..n_val].to_vec();
        val.sort_unstable();
        let val_set: BTreeSet<usize> = val.iter().copied().collect();
        train_idx.retain(|i| !val_set.contains(i));
        Ok(Split {
            train: train_idx,
            val,
            test: test_idx,
        })
    }

    /// Day ids present in a list of sample indices.
    pub fn days_of<'a>(ds: &'a Dataset, idx: &[usize]) -> BTreeSet<&'a str> {
        idx.iter().map(|&i| ds.days[ds.samples[i].day].as_str()).collect()
    }
}
