//! Deterministic synthetic EEG.
//!
//! Each subject gets a set of point sources scattered around the electrodes.
//! Sources emit independent band-limited noise and reach each electrode with
//! a Gaussian weight in distance, so neighbouring channels are correlated and
//! distant ones are not. Downstream tasks add a class-dependent component on a
//! subject-specific spatial pattern.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::preprocess::{Band, Biquad};
use super::{samples_for_seconds, Example, Paradigm, Recording, SubjectEpochs};
use crate::error::{Error, Result};
use crate::montage::{head_size, Montage};
use crate::seed;

const BURN_IN_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    /// Oscillation whose frequency (Hz) depends on the class.
    Frequency { frequencies: Vec<f64> },
    /// Evoked transient whose amplitude depends on the class.
    Transient { amplitudes: Vec<f64> },
}

impl TaskKind {
    pub fn n_classes(&self) -> usize {
        match self {
            TaskKind::Frequency { frequencies } => frequencies.len(),
            TaskKind::Transient { amplitudes } => amplitudes.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub epochs_per_class: usize,
    pub epoch_length_s: f64,
    /// Peak amplitude of the class component relative to unit background.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_paradigm")]
    pub paradigm: Paradigm,
}

fn default_amplitude() -> f64 {
    1.0
}

fn default_paradigm() -> Paradigm {
    Paradigm::Synthetic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub channels: usize,
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sampling_rate: f64,
    /// Defaults to twice the channel count.
    #[serde(default)]
    pub sources: Option<usize>,
    /// Gaussian spread of source-to-electrode weights, as a fraction of head size.
    #[serde(default = "default_width")]
    pub source_width: f64,
    /// Standard deviation of independent per-channel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_low")]
    pub source_low_hz: f64,
    #[serde(default = "default_high")]
    pub source_high_hz: f64,
    #[serde(default)]
    pub task: Option<TaskConfig>,
}

fn default_rate() -> f64 {
    128.0
}
fn default_width() -> f64 {
    0.15
}
fn default_noise() -> f64 {
    0.3
}
fn default_low() -> f64 {
    1.0
}
fn default_high() -> f64 {
    30.0
}

impl SynthConfig {
    pub fn new(subjects: usize, channels: usize, duration_s: f64) -> Self {
        Self {
            subjects,
            channels,
            duration_s,
            sampling_rate: default_rate(),
            sources: None,
            source_width: default_width(),
            noise: default_noise(),
            source_low_hz: default_low(),
            source_high_hz: default_high(),
            task: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subjects == 0 {
            return bad("at least one subject is required".into());
        }
        if self.channels < 2 {
            return bad(format!("{} channels; at least 2 are required", self.channels));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return bad(format!("invalid duration {}", self.duration_s));
        }
        if !(self.sampling_rate > 2.0 * self.source_high_hz) {
            return bad(format!("sampling rate {} too low for {} Hz sources", self.sampling_rate, self.source_high_hz));
        }
        if !(self.source_low_hz > 0.0 && self.source_low_hz < self.source_high_hz) {
            return bad("source band must satisfy 0 < low < high".into());
        }
        if !(self.source_width > 0.0) || !(self.noise >= 0.0) || self.sources == Some(0) {
            return bad("source width and count must be positive, noise non-negative".into());
        }
        if let Some(task) = &self.task {
            if task.kind.n_classes() < 2 {
                return bad("a task needs at least two classes".into());
            }
            if task.epochs_per_class == 0 || !(task.epoch_length_s > 0.0) {
                return bad("task epochs need a positive count and length".into());
            }
            if let TaskKind::Frequency { frequencies } = &task.kind {
                if frequencies.iter().any(|&f| !(f > 0.0 && f < self.sampling_rate / 2.0)) {
                    return bad("task frequencies must lie below the Nyquist rate".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub montage: Montage,
    pub recordings: Vec<Recording>,
    /// Empty unless the config names a task.
    pub epochs: Vec<SubjectEpochs>,
}

struct SubjectModel {
    mixing: Vec<Vec<f64>>, // channel x source
    pattern: Vec<f64>,     // task spatial pattern per channel
}

impl SubjectModel {
    fn new(montage: &Montage, config: &SynthConfig, rng: &mut impl Rng) -> Result<Self> {
        let head = head_size(montage)?;
        let n_sources = config.sources.unwrap_or(2 * montage.len());
        let jitter = Normal::new(0.0, 0.05 * head).expect("positive");
        let sources: Vec<[f64; 3]> = (0..n_sources)
            .map(|_| {
                let p = montage.position(rng.random_range(0..montage.len()));
                [p[0] + jitter.sample(rng), p[1] + jitter.sample(rng), p[2] + jitter.sample(rng)]
            })
            .collect();
        let spread = 2.0 * (config.source_width * head).powi(2);
        let mixing = (0..montage.len())
            .map(|c| {
                let p = montage.position(c);
                sources.iter().map(|s| (-dist2(&p, s) / spread).exp()).collect()
            })
            .collect();
        let center = montage.position(rng.random_range(0..montage.len()));
        let task_spread = 2.0 * (0.3 * head).powi(2);
        let pattern = (0..montage.len()).map(|c| (-dist2(&montage.position(c), &center) / task_spread).exp()).collect();
        Ok(Self { mixing, pattern })
    }

    /// `channels x n` background activity.
    fn background(&self, config: &SynthConfig, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let fs = config.sampling_rate;
        let burn = samples_for_seconds(BURN_IN_S, fs);
        let band = Band { low_hz: config.source_low_hz, high_hz: config.source_high_hz };
        let sections = Biquad::bandpass(fs, band);
        let n_sources = self.mixing.first().map_or(0, Vec::len);
        let sources: Vec<Vec<f64>> = (0..n_sources)
            .map(|_| {
                let mut x: Vec<f64> = (0..n + burn).map(|_| StandardNormal.sample(rng)).collect();
                for s in &sections {
                    s.apply(&mut x);
                }
                let x = x.split_off(burn);
                let std = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt().max(1e-12);
                x.into_iter().map(|v| v / std).collect()
            })
            .collect();
        self.mixing
            .iter()
            .map(|weights| {
                let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-12);
                (0..n)
                    .map(|i| {
                        let mixed: f64 = weights.iter().zip(&sources).map(|(w, s)| w * s[i]).sum();
                        let noise: f64 = StandardNormal.sample(rng);
                        mixed / norm + config.noise * noise
                    })
                    .collect()
            })
            .collect()
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn flatten(rows: Vec<Vec<f64>>) -> Vec<f32> {
    rows.into_iter().flatten().map(|v| v as f32).collect()
}

fn task_epochs(
    model: &SubjectModel,
    config: &SynthConfig,
    task: &TaskConfig,
    montage: &Montage,
    subject: &str,
    rng: &mut impl Rng,
) -> Result<SubjectEpochs> {
    let fs = config.sampling_rate;
    let n = samples_for_seconds(task.epoch_length_s, fs);
    let n_classes = task.kind.n_classes();
    let mut labels: Vec<usize> = (0..n_classes).flat_map(|c| std::iter::repeat_n(c, task.epochs_per_class)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    let mut examples = Vec::with_capacity(labels.len());
    for &label in &labels {
        let mut rows = model.background(config, n, rng);
        let gain = task.amplitude * rng.random_range(0.8..1.2);
        let component: Vec<f64> = match &task.kind {
            TaskKind::Frequency { frequencies } => {
                let phase = rng.random_range(0.0..2.0 * PI);
                (0..n).map(|i| (2.0 * PI * frequencies[label] * i as f64 / fs + phase).sin()).collect()
            }
            TaskKind::Transient { amplitudes } => {
                let (peak, width) = (0.3 * fs, 0.05 * fs);
                (0..n).map(|i| amplitudes[label] * (-((i as f64 - peak) / width).powi(2) / 2.0).exp()).collect()
            }
        };
        for (row, w) in rows.iter_mut().zip(&model.pattern) {
            for (v, s) in row.iter_mut().zip(&component) {
                *v += gain * w * s;
            }
        }
        examples.push(Example::labeled(montage.len(), n, flatten(rows), label)?);
    }
    Ok(SubjectEpochs {
        subject: subject.to_string(),
        paradigm: task.paradigm,
        sampling_rate: fs,
        montage: montage.clone(),
        examples,
    })
}

/// Generate a corpus on a spread subset of the bundled montage.
pub fn synthesize(config: &SynthConfig, root_seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let montage = Montage::standard_62().spread_subset(config.channels)?;
    synthesize_on(config, &montage, root_seed)
}

/// Generate a corpus on a caller-supplied montage (`config.channels` ignored).
pub fn synthesize_on(config: &SynthConfig, montage: &Montage, root_seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let paradigm = config.task.as_ref().map_or(Paradigm::Synthetic, |t| t.paradigm);
    let n = samples_for_seconds(config.duration_s, config.sampling_rate);
    let mut recordings = Vec::new();
    let mut epochs = Vec::new();
    for s in 0..config.subjects {
        let subject = format!("S{:02}", s + 1);
        let mut rng = seed::rng(root_seed, &format!("synth/{subject}"));
        let model = SubjectModel::new(montage, config, &mut rng)?;
        let rows = model.background(config, n, &mut rng);
        recordings.push(Recording::new(flatten(rows), config.sampling_rate, montage.clone(), &subject, paradigm)?);
        if let Some(task) = &config.task {
            let mut trng = seed::rng(root_seed, &format!("synth/{subject}/task"));
            epochs.push(task_epochs(&model, config, task, montage, &subject, &mut trng)?);
        }
    }
    Ok(SyntheticCorpus { montage: montage.clone(), recordings, epochs })
}
