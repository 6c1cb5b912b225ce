//! Self-supervised pre-training: spatial block masks, latent prediction of the
//! masked tokens, and an EMA teacher that supplies the targets.

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Example, SAMPLING_RATE};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::montage::{sample_mask, MaskSpec, Montage};
use crate::nets::{encoder_forward, init_model, local_forward, marker_rows, predictor_forward, ModelConfig, SPATIAL_TABLE};
use crate::optim::{mean_gradients, Adam, AdamConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::seed;
use crate::stopping::{EarlyStopping, Verdict};
use crate::tensor::Tensor;

pub const TEACHER_PREFIX: &str = "ctx.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub example_length_s: f64,
    pub mask_diameter_fraction: f64,
    #[serde(default = "default_tau")]
    pub ema_momentum: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Hard cap on epochs in case the validation loss keeps improving.
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Optional cap on optimizer steps (smoke runs).
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Layer-normalize teacher outputs before the L1 comparison.
    #[serde(default)]
    pub normalize_targets: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_tau() -> f64 {
    0.996
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_patience() -> usize {
    10
}
fn default_max_epochs() -> usize {
    1000
}

impl PretrainConfig {
    pub fn new(example_length_s: f64, mask_diameter_fraction: f64) -> Self {
        Self {
            example_length_s,
            mask_diameter_fraction,
            ema_momentum: default_tau(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            patience: default_patience(),
            max_epochs: default_max_epochs(),
            max_steps: None,
            normalize_targets: false,
            seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad(format!("ema_momentum {} outside (0, 1)", self.ema_momentum));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch_size, patience and max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("invalid learning_rate {}", self.learning_rate));
        }
        if !(self.mask_diameter_fraction > 0.0 && self.mask_diameter_fraction <= 1.0) {
            return bad(format!("mask_diameter_fraction {} outside (0, 1]", self.mask_diameter_fraction));
        }
        self.model.validate()?;
        let samples = self.example_samples();
        if self.model.local.n_tokens(samples) == 0 {
            return bad(format!(
                "example length {} s is shorter than one {}-sample window",
                self.example_length_s,
                self.model.local.window_samples()
            ));
        }
        Ok(())
    }

    pub fn example_samples(&self) -> usize {
        crate::data::samples_for_seconds(self.example_length_s, SAMPLING_RATE)
    }
}

/// Student and teacher parameters with the optimizer and stopping counters.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: PretrainConfig,
    pub montage: Montage,
    /// `local.*`, `ctx.*`, `pred.*` and the spatial table.
    pub student: ParamSet<T>,
    /// EMA copy of the student's `ctx.*` tensors, same names.
    pub teacher: ParamSet<T>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub since_improvement: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: PretrainConfig, montage: Montage) -> Result<Self> {
        config.validate()?;
        let student = init_model(&config.model, &montage, &mut seed::rng(config.seed, "init/model"))?;
        let teacher = student.subset(TEACHER_PREFIX);
        let optimizer = Adam::new(config.adam);
        Ok(Self {
            config,
            montage,
            student,
            teacher,
            optimizer,
            step: 0,
            epoch: 0,
            best_val: None,
            since_improvement: 0,
        })
    }
}

/// Token counts seen by each path of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTrace {
    pub n_tokens: usize,
    pub n_masked: usize,
    pub context_len: usize,
    pub teacher_len: usize,
}

struct LossEval<T> {
    loss: T,
    grads: Option<std::collections::BTreeMap<String, Tensor<T>>>,
    trace: LossTrace,
}

fn check_mask(example: &Example, mask: &MaskSpec, config: &ModelConfig) -> Result<usize> {
    let t = config.local.n_tokens(example.n_samples());
    let l = example.n_channels() * t;
    if mask.n_tokens() != l || mask.n_windows != t {
        return Err(Error::Shape(format!(
            "mask covers {} tokens ({} windows) but the example has {l} ({t} windows)",
            mask.n_tokens(),
            mask.n_windows
        )));
    }
    if mask.masked_channels.is_empty() || mask.masked_channels.len() >= example.n_channels() {
        return Err(Error::Shape("a mask must hide some but not all channels".into()));
    }
    Ok(t)
}

/// Mean absolute error between predictions and the teacher output gathered at
/// `masked` rows. Rows of `teacher_full` outside `masked` are never read.
pub fn masked_l1<T: Scalar>(prediction: &Tensor<T>, teacher_full: &Tensor<T>, masked: &[usize]) -> Result<T> {
    let target = teacher_full.select_rows(masked);
    if target.shape() != prediction.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", prediction.shape(), target.shape())));
    }
    let sum: T = prediction.data().iter().zip(target.data()).map(|(p, t)| (*p - *t).abs()).sum();
    Ok(sum / T::from_usize(prediction.len().max(1)).expect("count"))
}

fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let id = g.constant(x.clone());
    let out = g.layer_norm(id, None, None);
    g.value(out).clone()
}

/// The teacher encoder over a full marked sequence.
pub fn teacher_forward<T: Scalar>(marked: &Tensor<T>, teacher: &ParamSet<T>, config: &ModelConfig) -> Tensor<T> {
    let mut g = Graph::new();
    let b = g.bind(teacher, |_| false);
    let x = g.constant(marked.clone());
    let out = encoder_forward(&mut g, &b, "ctx", &config.encoder, x);
    g.value(out).clone()
}

fn evaluate<T: Scalar>(example: &Example, mask: &MaskSpec, state: &TrainState<T>, with_grads: bool) -> Result<LossEval<T>> {
    let cfg = &state.config.model;
    let t = check_mask(example, mask, cfg)?;
    let c = example.n_channels();
    if state.student.require(SPATIAL_TABLE)?.rows() != c {
        return Err(Error::Shape(format!("spatial table has {} rows for {c} channels", state.student.require(SPATIAL_TABLE)?.rows())));
    }
    let enc = cfg.position_encoding();
    let mut g = Graph::new();
    let b = g.bind(&state.student, |_| with_grads);
    let x = g.constant(example.signal_column()?);
    let tokens = local_forward(&mut g, &b, &cfg.local, x, c)?;
    let positions: Vec<(usize, usize)> = (0..c).flat_map(|ch| (0..t).map(move |w| (ch, w))).collect();
    let markers = marker_rows(&mut g, b.id(SPATIAL_TABLE), &enc, &positions);
    let marked = g.add(tokens, markers);

    let visible = mask.visible_tokens();
    let masked = mask.masked_tokens();
    let context_in = g.gather_rows(marked, &visible);
    let context_len = g.value(context_in).rows();
    let context = encoder_forward(&mut g, &b, "ctx", &cfg.encoder, context_in);
    let masked_pos: Vec<(usize, usize)> = masked.iter().map(|&i| positions[i]).collect();
    let query_markers = marker_rows(&mut g, b.id(SPATIAL_TABLE), &enc, &masked_pos);
    let queries = g.add_row(query_markers, b.id("pred.mask_token"));
    let prediction = predictor_forward(&mut g, &b, "pred", &cfg.predictor, queries, context);

    // Teacher path: full sequence, separate graph, result enters as a constant.
    let full = g.value(marked).clone();
    let teacher_len = full.rows();
    let mut target = teacher_forward(&full, &state.teacher, cfg).select_rows(&masked);
    if state.config.normalize_targets {
        target = normalize_rows(&target);
    }
    let target = g.constant(target);
    let diff = g.sub(prediction, target);
    let abs = g.abs(diff);
    let loss = g.mean(abs);
    let value = g.value(loss).get(0, 0);
    let grads = with_grads.then(|| {
        let mut gr = g.backward(loss);
        b.collect(&mut gr)
    });
    Ok(LossEval {
        loss: value,
        grads,
        trace: LossTrace { n_tokens: c * t, n_masked: masked.len(), context_len, teacher_len },
    })
}

/// Loss of one example under one mask, without gradients.
pub fn sjepa_loss<T: Scalar>(example: &Example, mask: &MaskSpec, state: &TrainState<T>) -> Result<(T, LossTrace)> {
    let e = evaluate(example, mask, state, false)?;
    Ok((e.loss, e.trace))
}

/// `teacher <- tau * teacher + (1 - tau) * student_ctx`, elementwise.
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, tau: f64) -> Result<()> {
    let tau_t = T::lit(tau);
    let rest = T::lit(1.0 - tau);
    for (name, t) in teacher.iter_mut() {
        let s = student.require(name)?;
        if s.shape() != t.shape() {
            return Err(Error::State(format!("teacher `{name}` is {:?}, student {:?}", t.shape(), s.shape())));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = tau_t * *tv + rest * *sv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub traces: Vec<LossTrace>,
    /// Names of the tensors that received gradients.
    pub grad_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Hooks into the training loop. The validation hook may substitute the loss
/// used for early stopping.
pub trait Observer<T> {
    fn on_step(&mut self, _state: &TrainState<T>, _report: &StepReport) {}
    fn on_validation(&mut self, _epoch: usize, loss: f64) -> f64 {
        loss
    }
}

impl<T> Observer<T> for () {}

/// Owns the training state, the data and the random streams of one run.
pub struct Pretrainer<T> {
    pub state: TrainState<T>,
    train: Vec<Example>,
    validation: Vec<Example>,
    validation_masks: Vec<MaskSpec>,
    mask_rng: seed::Rng,
    shuffle_rng: seed::Rng,
    windows: usize,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(state: TrainState<T>, train: Vec<Example>, validation: Vec<Example>) -> Result<Self> {
        if train.is_empty() || validation.is_empty() {
            return Err(Error::Data("pre-training needs nonempty train and validation sets".into()));
        }
        let samples = state.config.example_samples();
        let c = state.montage.len();
        if let Some(e) = train.iter().chain(&validation).find(|e| e.n_samples() != samples || e.n_channels() != c) {
            return Err(Error::Shape(format!(
                "example is {}x{}, expected {c}x{samples}",
                e.n_channels(),
                e.n_samples()
            )));
        }
        let windows = state.config.model.local.n_tokens(samples);
        let root = state.config.seed;
        let mut vrng = seed::rng(root, "validation-masks");
        let validation_masks = validation
            .iter()
            .map(|_| sample_mask(&state.montage, state.config.mask_diameter_fraction, windows, &mut vrng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mask_rng: seed::rng(root, "masks"),
            shuffle_rng: seed::rng(root, "shuffle"),
            state,
            train,
            validation,
            validation_masks,
            windows,
        })
    }

    pub fn train_examples(&self) -> &[Example] {
        &self.train
    }

    pub fn sample_mask(&mut self) -> Result<MaskSpec> {
        sample_mask(&self.state.montage, self.state.config.mask_diameter_fraction, self.windows, &mut self.mask_rng)
    }

    /// One optimizer step on `batch` with freshly sampled masks, followed by
    /// the EMA update of the teacher.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepReport> {
        let masks = batch.iter().map(|_| self.sample_mask()).collect::<Result<Vec<_>>>()?;
        self.train_step_with(batch, &masks)
    }

    pub fn train_step_with(&mut self, batch: &[usize], masks: &[MaskSpec]) -> Result<StepReport> {
        if batch.is_empty() || batch.len() != masks.len() {
            return Err(Error::Shape(format!("{} examples with {} masks", batch.len(), masks.len())));
        }
        let state = &self.state;
        let evals = batch
            .par_iter()
            .zip(masks.par_iter())
            .map(|(&i, m)| evaluate(&self.train[i], m, state, true))
            .collect::<Result<Vec<_>>>()?;
        let step = self.state.step + 1;
        let mut total = T::zero();
        let mut parts = Vec::with_capacity(evals.len());
        let mut traces = Vec::with_capacity(evals.len());
        for e in evals {
            if !e.loss.is_finite() {
                return Err(Error::Numerical { stage: "pre-training", step, detail: format!("loss {}", e.loss) });
            }
            total += e.loss;
            traces.push(e.trace);
            parts.push(e.grads.expect("requested"));
        }
        let n = T::from_usize(parts.len()).expect("count");
        let grads = mean_gradients(parts);
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Numerical { stage: "pre-training", step, detail: "non-finite gradient".into() });
        }
        let lr = self.state.config.learning_rate;
        self.state.optimizer.step(&mut self.state.student, &grads, |_| Some(lr));
        let tau = self.state.config.ema_momentum;
        ema_update(&mut self.state.teacher, &self.state.student, tau)?;
        self.state.step = step;
        Ok(StepReport {
            step,
            epoch: self.state.epoch + 1,
            loss: (total / n).to_f64().expect("finite"),
            traces,
            grad_names: grads.into_keys().collect(),
        })
    }

    /// Mean loss over the validation set under the run's fixed validation
    /// masks.
    pub fn validate(&self) -> Result<f64> {
        let losses = self
            .validation
            .par_iter()
            .zip(self.validation_masks.par_iter())
            .map(|(e, m)| sjepa_loss(e, m, &self.state).map(|(l, _)| l.to_f64().expect("finite")))
            .collect::<Result<Vec<_>>>()?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical {
                stage: "pre-training validation",
                step: self.state.step,
                detail: format!("loss {mean}"),
            });
        }
        Ok(mean)
    }

    fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        order.chunks(self.state.config.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Where a run writes its loss log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch-{epoch:04}.ckpt"))
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    /// State at the epoch with the lowest validation loss.
    pub best: TrainState<T>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: Vec<LossRecord>,
}

struct LossLog {
    writer: Option<csv::Writer<fs::File>>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: Option<PathBuf>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self { writer: None, path: PathBuf::new() }) };
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        w.write_record(["step", "epoch", "split", "loss"]).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(Self { writer: Some(w), path })
    }

    fn append(&mut self, records: &[LossRecord]) -> Result<()> {
        let Some(w) = self.writer.as_mut() else { return Ok(()) };
        let err = |e: csv::Error| Error::format(&self.path, e.to_string());
        for r in records {
            let split = match r.split {
                Split::Train => "train",
                Split::Validation => "validation",
            };
            w.write_record([r.step.to_string(), r.epoch.to_string(), split.to_string(), format!("{:e}", r.loss)])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Train until the validation loss has not improved for `patience` epochs,
/// the epoch cap is hit, or the step cap is reached. When `output` is given,
/// the loss log and per-epoch checkpoints (plus the `best` alias) are written
/// there.
pub fn run_pretraining<T: Scalar>(
    train: Vec<Example>,
    validation: Vec<Example>,
    config: PretrainConfig,
    montage: Montage,
    output: Option<&RunOutput>,
    observer: &mut dyn Observer<T>,
) -> Result<PretrainOutcome<T>> {
    let state = TrainState::new(config, montage)?;
    let mut trainer = Pretrainer::new(state, train, validation)?;
    if let Some(out) = output {
        fs::create_dir_all(out.dir.join("checkpoints")).map_err(|e| Error::io(&out.dir, e))?;
    }
    let mut log_file = LossLog::open(output.map(RunOutput::losses))?;
    let mut log = Vec::new();
    let mut stopper = EarlyStopping::new(trainer.state.config.patience);
    let mut best = trainer.state.clone();
    let mut stopped_early = false;
    let max_steps = trainer.state.config.max_steps.unwrap_or(usize::MAX);
    for epoch in 1..=trainer.state.config.max_epochs {
        let mut records = Vec::new();
        for batch in trainer.epoch_batches() {
            if trainer.state.step >= max_steps {
                break;
            }
            let report = trainer.train_step(&batch)?;
            observer.on_step(&trainer.state, &report);
            records.push(LossRecord { step: report.step, epoch, split: Split::Train, loss: report.loss });
        }
        trainer.state.epoch = epoch;
        let measured = trainer.validate()?;
        let val = observer.on_validation(epoch, measured);
        records.push(LossRecord { step: trainer.state.step, epoch, split: Split::Validation, loss: val });
        log_file.append(&records)?;
        log.extend(records);
        let verdict = stopper.observe(val, true);
        trainer.state.best_val = stopper.best();
        trainer.state.since_improvement = stopper.since_improvement();
        if verdict == Verdict::Improved {
            best = trainer.state.clone();
        }
        if let Some(out) = output {
            let ckpt = Checkpoint::from_state(&trainer.state, val);
            ckpt.save(&out.epoch_checkpoint(epoch))?;
            if verdict == Verdict::Improved {
                ckpt.save(&out.best())?;
            }
        }
        if verdict == Verdict::Stop {
            stopped_early = true;
            break;
        }
        if trainer.state.step >= max_steps {
            break;
        }
    }
    Ok(PretrainOutcome {
        best,
        best_epoch: stopper.best_epoch(),
        epochs_run: stopper.epoch(),
        stopped_early,
        log,
    })
}
