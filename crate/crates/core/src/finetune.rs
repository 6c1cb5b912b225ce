//! Downstream classifiers built on a pre-trained backbone, trained with
//! cross-entropy under one of two strategies.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Example, Fold, SubjectEpochs};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, NodeId};
use crate::metrics::{score, softmax, Metric};
use crate::montage::Montage;
use crate::nets::{encoder_forward, init_head, init_model, local_forward, marker_rows, HeadConfig, ModelConfig, Placement, SPATIAL_TABLE};
use crate::optim::{mean_gradients, Adam, AdamConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::seed;
use crate::stopping::{EarlyStopping, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Train only the newly added layers.
    New,
    /// Warm up the new layers, then train everything.
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::New, Strategy::Full];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::New => "new",
            Strategy::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fine-tuning strategy `{s}` (expected new or full)")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSpec {
    pub architecture: Placement,
    pub strategy: Strategy,
    #[serde(default = "default_virtual")]
    pub virtual_channels: usize,
    pub n_classes: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Step size of pre-trained tensors under `full`.
    #[serde(default = "default_lr_pretrained")]
    pub lr_pretrained: f64,
    /// Step size of new layers.
    #[serde(default = "default_lr_new")]
    pub lr_new: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_virtual() -> usize {
    4
}
fn default_warmup() -> usize {
    10
}
fn default_patience() -> usize {
    50
}
fn default_lr_pretrained() -> f64 {
    1e-4
}
fn default_lr_new() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_max_epochs() -> usize {
    300
}

impl DownstreamSpec {
    pub fn new(architecture: Placement, strategy: Strategy, n_classes: usize) -> Self {
        Self {
            architecture,
            strategy,
            virtual_channels: default_virtual(),
            n_classes,
            warmup_epochs: default_warmup(),
            patience: default_patience(),
            lr_pretrained: default_lr_pretrained(),
            lr_new: default_lr_new(),
            batch_size: default_batch(),
            max_epochs: default_max_epochs(),
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be at least 1".into()));
        }
        if !(self.lr_new > 0.0 && self.lr_pretrained > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("{} classes; at least 2 are required", self.n_classes)));
        }
        Ok(())
    }

    fn head(&self) -> HeadConfig {
        HeadConfig { virtual_channels: self.virtual_channels, n_classes: self.n_classes, placement: self.architecture }
    }
}

/// A classifier: backbone tensors (copied or freshly initialized) plus the
/// aggregation layer and linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel<T> {
    pub spec: DownstreamSpec,
    pub model: ModelConfig,
    pub montage: Montage,
    pub params: ParamSet<T>,
    /// Names of tensors taken from a pre-trained checkpoint.
    pub pretrained: BTreeSet<String>,
    pub n_samples: usize,
}

fn keeps(architecture: Placement, name: &str) -> bool {
    match architecture {
        Placement::Contextual => name.starts_with("local.") || name.starts_with("ctx.") || name == SPATIAL_TABLE,
        Placement::PostLocal | Placement::PreLocal => name.starts_with("local."),
    }
}

/// Flattened feature length fed to the linear head.
pub fn feature_len(model: &ModelConfig, virtual_channels: usize, n_samples: usize) -> usize {
    virtual_channels * model.local.n_tokens(n_samples) * model.d()
}

/// Assemble a classifier for `n_samples`-long epochs on `montage`. Without a
/// checkpoint the backbone is freshly initialized from `model` and every
/// tensor counts as new.
pub fn build_downstream<T: Scalar>(
    checkpoint: Option<&Checkpoint>,
    spec: &DownstreamSpec,
    montage: &Montage,
    model: &ModelConfig,
    n_samples: usize,
) -> Result<DownstreamModel<T>> {
    spec.validate()?;
    spec.head().validate(montage.len())?;
    if checkpoint.is_none() && spec.strategy == Strategy::New {
        return Err(Error::Config(
            "strategy `new` needs a pre-trained checkpoint; without pre-training only `full` is valid".into(),
        ));
    }
    let (model, backbone, pretrained) = match checkpoint {
        Some(ckpt) => {
            if &ckpt.montage != montage {
                return Err(Error::Compatibility(format!(
                    "checkpoint montage ({} channels: {}) differs from the data montage ({} channels: {})",
                    ckpt.montage.len(),
                    ckpt.montage.names().collect::<Vec<_>>().join(","),
                    montage.len(),
                    montage.names().collect::<Vec<_>>().join(",")
                )));
            }
            let mut p = ParamSet::new();
            for (name, t) in ckpt.student.iter().filter(|(n, _)| keeps(spec.architecture, n)) {
                p.insert(name, t.cast());
            }
            let names = p.names().map(str::to_string).collect();
            (ckpt.config.model.clone(), p, names)
        }
        None => {
            let mut rng = seed::rng(spec.seed, "init/backbone");
            let full: ParamSet<T> = init_model(model, montage, &mut rng)?;
            let mut p = ParamSet::new();
            for (name, t) in full.iter().filter(|(n, _)| keeps(spec.architecture, n)) {
                p.insert(name, t.clone());
            }
            (model.clone(), p, BTreeSet::new())
        }
    };
    model.validate()?;
    if model.local.n_tokens(n_samples) == 0 {
        return Err(Error::Shape(format!("{n_samples}-sample epochs are shorter than one token window")));
    }
    let flen = feature_len(&model, spec.virtual_channels, n_samples);
    let mut params = backbone;
    params.extend(init_head(&spec.head(), montage.len(), flen, &mut seed::rng(spec.seed, "init/head")));
    Ok(DownstreamModel { spec: spec.clone(), model, montage: montage.clone(), params, pretrained, n_samples })
}

impl<T: Scalar> DownstreamModel<T> {
    pub fn feature_len(&self) -> usize {
        feature_len(&self.model, self.spec.virtual_channels, self.n_samples)
    }

    pub fn is_new(&self, name: &str) -> bool {
        !self.pretrained.contains(name)
    }

    fn check(&self, example: &Example) -> Result<()> {
        if example.n_channels() != self.montage.len() || example.n_samples() != self.n_samples {
            return Err(Error::Shape(format!(
                "example is {}x{}, model expects {}x{}",
                example.n_channels(),
                example.n_samples(),
                self.montage.len(),
                self.n_samples
            )));
        }
        Ok(())
    }

    /// Logits node (`1 x classes`) for one example.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, example: &Example) -> Result<NodeId> {
        self.check(example)?;
        let c = example.n_channels();
        let v = self.spec.virtual_channels;
        let t = self.model.local.n_tokens(self.n_samples);
        let d = self.model.d();
        let agg = b.id("agg.weight");
        let tokens = match self.spec.architecture {
            Placement::PreLocal => {
                let raw = g.constant(example.matrix());
                let mixed = g.matmul(agg, raw);
                let column = g.reshape(mixed, v * self.n_samples, 1);
                let tokens = local_forward(g, b, &self.model.local, column, v)?;
                g.reshape(tokens, v, t * d)
            }
            Placement::PostLocal | Placement::Contextual => {
                let x = g.constant(example.signal_column()?);
                let mut tokens = local_forward(g, b, &self.model.local, x, c)?;
                if self.spec.architecture == Placement::Contextual {
                    let positions: Vec<(usize, usize)> = (0..c).flat_map(|ch| (0..t).map(move |w| (ch, w))).collect();
                    let markers = marker_rows(g, b.id(SPATIAL_TABLE), &self.model.position_encoding(), &positions);
                    let marked = g.add(tokens, markers);
                    tokens = encoder_forward(g, b, "ctx", &self.model.encoder, marked);
                }
                let per_channel = g.reshape(tokens, c, t * d);
                g.matmul(agg, per_channel)
            }
        };
        let flat = g.reshape(tokens, 1, v * t * d);
        Ok(g.linear(flat, b.id("head.weight"), b.id("head.bias")))
    }

    /// Class logits of one example.
    pub fn logits(&self, example: &Example) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = g.bind(&self.params, |_| false);
        let out = self.forward(&mut g, &b, example)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn probabilities(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        examples
            .par_iter()
            .map(|e| {
                let l: Vec<f64> = self.logits(e)?.iter().map(|v| v.to_f64().expect("finite")).collect();
                Ok(softmax(&l))
            })
            .collect()
    }

    fn loss_and_grads(
        &self,
        example: &Example,
        trainable: &dyn Fn(&str) -> bool,
        with_grads: bool,
    ) -> Result<(T, Option<std::collections::BTreeMap<String, crate::tensor::Tensor<T>>>)> {
        let label = example.label.ok_or_else(|| Error::Data("fine-tuning needs labeled examples".into()))?;
        if label >= self.spec.n_classes {
            return Err(Error::Data(format!("label {label} outside {} classes", self.spec.n_classes)));
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params, |n| with_grads && trainable(n));
        let logits = self.forward(&mut g, &b, example)?;
        let loss = g.cross_entropy(logits, &[label]);
        let value = g.value(loss).get(0, 0);
        let grads = with_grads.then(|| {
            let mut gr = g.backward(loss);
            b.collect(&mut gr)
        });
        Ok((value, grads))
    }

    /// Mean cross-entropy over `examples`.
    pub fn mean_loss(&self, examples: &[Example]) -> Result<f64> {
        let losses = examples
            .par_iter()
            .map(|e| self.loss_and_grads(e, &|_| false, false).map(|(l, _)| l.to_f64().expect("finite")))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

/// Train, validation and test epochs of one fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl FoldData {
    pub fn from_fold(subject: &SubjectEpochs, fold: &Fold) -> Self {
        let pick = |idx: &[usize]| idx.iter().map(|&i| subject.examples[i].clone()).collect();
        Self { train: pick(&fold.train), validation: pick(&fold.validation), test: pick(&fold.test) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub pipeline: String,
    pub dataset: String,
    pub subject: String,
    pub fold: usize,
    pub metric: Metric,
    pub score: f64,
    pub epochs: usize,
}

pub trait FinetuneObserver<T> {
    fn on_epoch_end(&mut self, _epoch: usize, _model: &DownstreamModel<T>) {}
    /// May replace the validation loss used for early stopping.
    fn on_validation(&mut self, _epoch: usize, loss: f64) -> f64 {
        loss
    }
}

impl<T> FinetuneObserver<T> for () {}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    /// Restored best model.
    pub model: DownstreamModel<T>,
    pub best_epoch: usize,
    pub epochs: usize,
    pub score: f64,
    pub validation_losses: Vec<f64>,
}

/// Train `model` on one fold, restore the epoch with the lowest validation
/// loss and score it on the test partition.
pub fn finetune<T: Scalar>(
    mut model: DownstreamModel<T>,
    data: &FoldData,
    metric: Metric,
    observer: &mut dyn FinetuneObserver<T>,
) -> Result<FinetuneOutcome<T>> {
    if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
        return Err(Error::Split(format!(
            "fold partitions must be nonempty (train {}, validation {}, test {})",
            data.train.len(),
            data.validation.len(),
            data.test.len()
        )));
    }
    let spec = model.spec.clone();
    let has_pretrained = !model.pretrained.is_empty();
    // Warm-up only makes sense when there is something pre-trained to protect.
    let warmup = if spec.strategy == Strategy::Full && has_pretrained { spec.warmup_epochs } else { 0 };
    let mut optimizer = Adam::new(spec.adam);
    let mut shuffle = seed::rng(spec.seed, "finetune/shuffle");
    let mut stopper = EarlyStopping::new(spec.patience);
    let mut best = model.params.clone();
    let mut validation_losses = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=spec.max_epochs {
        let backbone_trains = has_pretrained && spec.strategy == Strategy::Full && epoch > warmup;
        let pretrained = model.pretrained.clone();
        let trainable = move |n: &str| !pretrained.contains(n) || backbone_trains;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle);
        for batch in order.chunks(spec.batch_size) {
            step += 1;
            let m = &model;
            let parts = batch
                .par_iter()
                .map(|&i| m.loss_and_grads(&data.train[i], &trainable, true))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Vec::with_capacity(parts.len());
            for (loss, g) in parts {
                if !loss.is_finite() {
                    return Err(Error::Numerical { stage: "fine-tuning", step, detail: format!("loss {loss}") });
                }
                grads.push(g.expect("requested"));
            }
            let grads = mean_gradients(grads);
            let pretrained = &model.pretrained;
            optimizer.step(&mut model.params, &grads, |n| {
                if !pretrained.contains(n) {
                    Some(spec.lr_new)
                } else if backbone_trains {
                    Some(spec.lr_pretrained)
                } else {
                    None
                }
            });
        }
        let measured = model.mean_loss(&data.validation)?;
        if !measured.is_finite() {
            return Err(Error::Numerical { stage: "fine-tuning validation", step, detail: format!("loss {measured}") });
        }
        let val = observer.on_validation(epoch, measured);
        validation_losses.push(val);
        observer.on_epoch_end(epoch, &model);
        match stopper.observe(val, epoch > warmup) {
            Verdict::Improved => best = model.params.clone(),
            Verdict::Stop => break,
            Verdict::Continue => {}
        }
    }
    model.params = best;
    let probs = model.probabilities(&data.test)?;
    let labels: Vec<usize> = data
        .test
        .iter()
        .map(|e| e.label.ok_or_else(|| Error::Data("unlabeled test example".into())))
        .collect::<Result<_>>()?;
    let s = score(&probs, &labels, metric)?;
    Ok(FinetuneOutcome { model, best_epoch: stopper.best_epoch(), epochs: stopper.epoch(), score: s, validation_losses })
}
