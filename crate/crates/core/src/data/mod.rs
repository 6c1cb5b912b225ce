//! Recordings, examples, preprocessing, slicing, splits and synthetic corpora.

mod io;
mod preprocess;
mod slicing;
mod splits;
mod synth;

pub use io::{
    read_corpus, read_epochs, read_recording, write_corpus, write_epochs, write_recording, CorpusManifest,
};
pub use preprocess::{filtfilt, preprocess, resample, Biquad, Band};
pub use slicing::{samples_for_seconds, slice_continuous, DEFAULT_INTERVAL_S};
pub use splits::{make_splits, Fold, SplitConfig, SplitPlan};
pub use synth::{synthesize, synthesize_on, SynthConfig, SyntheticCorpus, TaskConfig, TaskKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::montage::Montage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Internal sampling-rate contract after preprocessing.
pub const SAMPLING_RATE: f64 = 128.0;

/// Shortest example the default tokenizer accepts (one window).
pub const MIN_EXAMPLE_SAMPLES: usize = 152;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Paradigm {
    #[serde(rename = "MI")]
    Mi,
    #[serde(rename = "ERP")]
    Erp,
    #[serde(rename = "SSVEP")]
    Ssvep,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Paradigm {
    /// AUC for binary ERP-style tasks, accuracy otherwise.
    pub fn metric(self) -> Metric {
        match self {
            Paradigm::Erp => Metric::Auc,
            _ => Metric::Accuracy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Mi => "MI",
            Paradigm::Erp => "ERP",
            Paradigm::Ssvep => "SSVEP",
            Paradigm::Synthetic => "synthetic",
        }
    }
}

/// A continuous multichannel recording, `channels x samples` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    samples: Vec<f32>,
    n_samples: usize,
    pub sampling_rate: f64,
    pub montage: Montage,
    pub subject_id: String,
    pub paradigm: Paradigm,
}

impl Recording {
    pub fn new(
        samples: Vec<f32>,
        sampling_rate: f64,
        montage: Montage,
        subject_id: impl Into<String>,
        paradigm: Paradigm,
    ) -> Result<Self> {
        let c = montage.len();
        if !samples.len().is_multiple_of(c) {
            return Err(Error::Data(format!("{} samples do not split over {c} channels", samples.len())));
        }
        if !(sampling_rate > 0.0 && sampling_rate.is_finite()) {
            return Err(Error::Data(format!("invalid sampling rate {sampling_rate}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("recording contains non-finite samples".into()));
        }
        let n_samples = samples.len() / c;
        Ok(Self { samples, n_samples, sampling_rate, montage, subject_id: subject_id.into(), paradigm })
    }

    pub fn n_channels(&self) -> usize {
        self.montage.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sampling_rate
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.n_samples..(c + 1) * self.n_samples]
    }
}

/// Which cross-validation fold a labeled example belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FoldKey {
    pub subject: String,
    pub fold: usize,
}

/// A fixed-length `channels x samples` window, labeled for downstream use.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    samples: Vec<f32>,
    n_channels: usize,
    n_samples: usize,
    pub label: Option<usize>,
    pub fold_key: Option<FoldKey>,
}

impl Example {
    fn build(n_channels: usize, n_samples: usize, samples: Vec<f32>, label: Option<usize>) -> Result<Self> {
        if samples.len() != n_channels * n_samples || n_channels == 0 {
            return Err(Error::Shape(format!(
                "{} samples for {n_channels} channels x {n_samples}",
                samples.len()
            )));
        }
        if n_samples < MIN_EXAMPLE_SAMPLES {
            return Err(Error::Shape(format!(
                "examples need at least {MIN_EXAMPLE_SAMPLES} samples, got {n_samples}"
            )));
        }
        Ok(Self { samples, n_channels, n_samples, label, fold_key: None })
    }

    pub fn unlabeled(n_channels: usize, n_samples: usize, samples: Vec<f32>) -> Result<Self> {
        Self::build(n_channels, n_samples, samples, None)
    }

    pub fn labeled(n_channels: usize, n_samples: usize, samples: Vec<f32>, label: usize) -> Result<Self> {
        Self::build(n_channels, n_samples, samples, Some(label))
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.n_samples..(c + 1) * self.n_samples]
    }

    /// `channels x samples` as a tensor.
    pub fn matrix<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f32(self.n_channels, self.n_samples, &self.samples).expect("consistent shape")
    }

    /// All channels stacked into one `(channels * samples) x 1` column, the
    /// layout the local encoder consumes.
    pub fn signal_column<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f32(self.samples.len(), 1, &self.samples)
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }
}

/// Labeled epochs of one subject, in recording order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEpochs {
    pub subject: String,
    pub paradigm: Paradigm,
    pub sampling_rate: f64,
    pub montage: Montage,
    pub examples: Vec<Example>,
}

impl SubjectEpochs {
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| e.label.ok_or_else(|| Error::Data(format!("epoch {i} of {} is unlabeled", self.subject))))
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.examples.iter().filter_map(|e| e.label).max().map_or(0, |m| m + 1)
    }
}
