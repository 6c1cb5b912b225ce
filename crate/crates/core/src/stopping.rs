//! Patience-based early stopping on a validation loss.

/// What the caller should do after reporting an epoch's validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// New best; keep a copy of the model.
    Improved,
    Continue,
    Stop,
}

/// Epochs are numbered from 1. Only a strictly lower loss counts as an
/// improvement. Epochs reported with `counts = false` (warm-up) can still set
/// a new best but never advance the patience counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    epoch: usize,
    best: Option<f64>,
    best_epoch: usize,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self { patience, epoch: 0, best: None, best_epoch: 0, since: 0 }
    }

    pub fn observe(&mut self, loss: f64, counts: bool) -> Verdict {
        self.epoch += 1;
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.best_epoch = self.epoch;
            self.since = 0;
            return Verdict::Improved;
        }
        if counts {
            self.since += 1;
        }
        if self.since >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn since_improvement(&self) -> usize {
        self.since
    }

    /// Rebuild from saved counters, e.g. when resuming from a checkpoint.
    pub fn restore(patience: usize, epoch: usize, best: Option<f64>, best_epoch: usize, since: usize) -> Self {
        Self { patience: patience.max(1), epoch, best, best_epoch, since }
    }
}
