//! Shared training loop: homogeneous batches, Adam with global-norm
//! clipping, plateau halving of the learning rate and best-validation
//! parameter selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainState;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam, PlateauHalving};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_halving_patience: usize,
    pub grad_clip_l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the data.
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Batch shuffling seed; supplied by the run, never read from files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 5e-4,
            lr_halving_patience: 5,
            grad_clip_l2: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            max_epochs: 100,
            steps_per_epoch: None,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("grad_clip_l2", self.grad_clip_l2),
            ("batch_size", self.batch_size as f64),
            ("max_epochs", self.max_epochs as f64),
            ("lr_halving_patience", self.lr_halving_patience as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.steps_per_epoch == Some(0) || self.max_steps == Some(0) {
            return Err(Error::Config("step counts must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log. Separators report validation SI-SNR,
/// the stop classifier reports validation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_si_snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Score {
    SiSnrDb,
    Accuracy,
}

/// A model with a flat parameter vector and a differentiable batch loss.
pub trait Objective {
    type Item;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Mean loss over `batch`; adds the gradient of that mean to `grads`.
    fn loss_and_grad(&self, batch: &[&Self::Item], grads: &mut [f64]) -> Result<f64>;

    /// What [`Objective::validate`] measures.
    const SCORE: Score = Score::SiSnrDb;

    /// Validation score, higher is better.
    fn validate(&self, items: &[Self::Item]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub state: TrainState,
    /// Step at which a non-finite loss stopped training; the model then
    /// holds the best parameters seen before it.
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn log_lines(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write_log(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.log_lines().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// `Err(Diverged)` if training was stopped by a non-finite loss.
    pub fn check(&self) -> Result<()> {
        match self.diverged_at {
            Some(step) => Err(Error::Diverged { step }),
            None => Ok(()),
        }
    }
}

/// Endless stream of homogeneous batches: each pass shuffles every group,
/// cuts it into batches and shuffles the batch order, so groups are visited
/// in proportion to their size.
struct BatchStream {
    sizes: Vec<usize>,
    batch_size: usize,
    queue: Vec<(usize, Vec<usize>)>,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(sizes: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        BatchStream {
            sizes,
            batch_size,
            queue: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn batches_per_pass(&self) -> usize {
        self.sizes.iter().map(|s| s.div_ceil(self.batch_size)).sum()
    }

    fn next(&mut self) -> (usize, Vec<usize>) {
        if self.queue.is_empty() {
            for (g, &n) in self.sizes.iter().enumerate() {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut self.rng);
                for b in idx.chunks(self.batch_size) {
                    self.queue.push((g, b.to_vec()));
                }
            }
            self.queue.shuffle(&mut self.rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("non-empty groups produce batches")
    }
}

/// Trains `obj` on `groups` (each a homogeneous set of items), keeping the
/// parameters with the best validation score. Without validation items
/// the negated training loss is used as the score.
pub fn fit<O: Objective>(
    obj: &mut O,
    groups: &[Vec<O::Item>],
    valid: &[O::Item],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    if sizes.iter().all(|&n| n == 0) {
        return Err(Error::TrainingData("no training examples".into()));
    }
    let mut stream = BatchStream::new(sizes, cfg.batch_size, cfg.seed);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| stream.batches_per_pass());
    let mut adam = Adam::new(obj.params().len(), cfg.beta1, cfg.beta2);
    let mut schedule = PlateauHalving::new(cfg.initial_lr, cfg.lr_halving_patience);
    let mut best_params = obj.params().to_vec();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut grads = vec![0.0; obj.params().len()];
    let mut step = 0;
    let mut diverged_at = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        let mut count = 0;
        for _ in 0..steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let (g, idx) = stream.next();
            let batch: Vec<&O::Item> = idx.iter().map(|&i| &groups[g][i]).collect();
            grads.iter_mut().for_each(|v| *v = 0.0);
            let loss = obj.loss_and_grad(&batch, &mut grads)?;
            step += 1;
            if !loss.is_finite() || grads.iter().any(|v| !v.is_finite()) {
                diverged_at = Some(step);
                break 'epochs;
            }
            clip_grad_norm(&mut grads, cfg.grad_clip_l2);
            adam.step(obj.params_mut(), &grads, schedule.lr);
            total += loss;
            count += 1;
        }
        if count == 0 {
            break;
        }
        let train_loss = total / count as f64;
        let score = if valid.is_empty() { -train_loss } else { obj.validate(valid)? };
        let lr = schedule.lr;
        if schedule.observe(score) {
            best_params.copy_from_slice(obj.params());
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            valid_si_snr_db: (O::SCORE == Score::SiSnrDb).then_some(score),
            valid_accuracy: (O::SCORE == Score::Accuracy).then_some(score),
            lr,
        };
        on_epoch(&record);
        log.push(record);
    }
    if best_epoch > 0 || diverged_at.is_some() {
        obj.params_mut().copy_from_slice(&best_params);
    }
    Ok(TrainOutcome {
        state: TrainState {
            epoch: log.len(),
            step,
            lr: schedule.lr,
            best_valid_score: schedule.best,
        },
        log,
        diverged_at,
    })
}
