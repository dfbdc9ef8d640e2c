//! Repeat-or-stop classifier over recursion residuals.
//!
//! The residual is normalized to unit RMS, encoded with a frozen copy of
//! the stage-1 encoder, pooled over time (mean and max per feature) and
//! scored by a two-layer head. The output is the probability that at least
//! two speakers remain, i.e. that the recursion should continue.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_records, records, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::loss::orpit_loss;
use crate::mixsim::Example;
use crate::nn::conv::Encoder;
use crate::nn::layers::Linear;
use crate::nn::params::{Init, ParamStore, Slot};
use crate::separator::Separator;
use crate::train::{fit, EpochRecord, Objective, Score, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopClassifierConfig {
    pub hidden_dim: usize,
    /// Continue iff P(continue) ≥ threshold.
    pub threshold: f64,
}

impl Default for StopClassifierConfig {
    fn default() -> Self {
        StopClassifierConfig {
            hidden_dim: 32,
            threshold: 0.5,
        }
    }
}

impl StopClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("stop classifier hidden_dim must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "stop threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Encoder geometry plus head configuration, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    classifier: StopClassifierConfig,
    encoder_window: usize,
    encoder_stride: usize,
    feature_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub continue_: bool,
    /// Probability of the chosen class.
    pub confidence: f64,
    pub p_continue: f64,
}

#[derive(Clone, Debug)]
pub struct StopClassifier {
    cfg: StopClassifierConfig,
    frozen: ParamStore,
    encoder: Encoder,
    /// Per-feature standardization, fitted on the training set.
    shift: Slot,
    scale: Slot,
    params: ParamStore,
    hidden: Linear,
    out: Linear,
    linked_stage1_digest: Option<String>,
}

/// A residual with its label (`true` = at least two speakers remain).
pub type Labeled = (Vec<f64>, bool);

/// Pooled statistics per encoder channel.
const POOLED_STATS: usize = 3;
/// Floor of the log compression; silence maps to exactly zero.
const LOG_FLOOR: f64 = 1e-3;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl StopClassifier {
    /// A fresh head on top of `stage1`'s encoder.
    pub fn new(stage1: &Separator, cfg: StopClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sc = stage1.config();
        let mut model = Self::build(cfg, sc.encoder_window, sc.encoder_stride, sc.feature_dim, seed);
        model.encoder.weight.of_mut(model.frozen.data_mut()).copy_from_slice(&stage1.encoder_weights());
        Ok(model)
    }

    fn build(cfg: StopClassifierConfig, window: usize, stride: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frozen = ParamStore::new();
        let encoder = Encoder::new(&mut frozen, "encoder", window, stride, dim, &mut rng);
        let shift = frozen.add("norm.shift", &[POOLED_STATS * dim], Init::Zeros, &mut rng);
        let scale = frozen.add("norm.scale", &[POOLED_STATS * dim], Init::Constant(1.0), &mut rng);
        let mut params = ParamStore::new();
        let hidden = Linear::new(&mut params, "head.hidden", POOLED_STATS * dim, cfg.hidden_dim, true, &mut rng);
        let out = Linear::new(&mut params, "head.out", cfg.hidden_dim, 1, true, &mut rng);
        StopClassifier {
            cfg,
            frozen,
            encoder,
            shift,
            scale,
            params,
            hidden,
            out,
            linked_stage1_digest: None,
        }
    }

    pub fn config(&self) -> &StopClassifierConfig {
        &self.cfg
    }

    /// Overrides the decision threshold. Unlike the configured value this
    /// accepts the closed interval, so 0 forces CONTINUE and 1 almost
    /// always STOP.
    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        self.cfg.threshold = threshold;
        Ok(())
    }

    pub fn encoder_weights(&self) -> &[f64] {
        self.encoder.weight.of(self.frozen.data())
    }

    /// Sets the standardization to the per-feature mean and standard
    /// deviation of `features`, or to the identity when there are none.
    fn fit_standardization(&mut self, features: &[Vec<f64>]) {
        if features.is_empty() {
            let data = self.frozen.data_mut();
            self.shift.of_mut(data).fill(0.0);
            self.scale.of_mut(data).fill(1.0);
            return;
        }
        let n = features.len().max(1) as f64;
        let dim = self.shift.len;
        let mut mean = vec![0.0; dim];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for f in features {
            var.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        let data = self.frozen.data_mut();
        self.shift.of_mut(data).copy_from_slice(&mean);
        for (s, v) in self.scale.of_mut(data).iter_mut().zip(var) {
            *s = 1.0 / v.sqrt().max(1e-6);
        }
    }

    pub fn linked_stage1_digest(&self) -> Option<&str> {
        self.linked_stage1_digest.as_deref()
    }

    pub fn set_linked_stage1_digest(&mut self, digest: String) {
        self.linked_stage1_digest = Some(digest);
    }

    /// Temporal mean, max and standard deviation of the log-compressed
    /// encoder features of the unit-RMS residual.
    pub fn features(&self, residual: &[f64]) -> Result<Vec<f64>> {
        let rms = (residual.iter().map(|v| v * v).sum::<f64>() / residual.len().max(1) as f64).sqrt();
        let scaled: Vec<f64> = if rms > 0.0 {
            residual.iter().map(|v| v / rms).collect()
        } else {
            residual.to_vec()
        };
        let f = self
            .encoder
            .encode(self.frozen.data(), &scaled)?
            .values
            .mapv(|v| (v + LOG_FLOOR).ln() - LOG_FLOOR.ln());
        let mean = f.mean_axis(Axis(0)).expect("at least one frame");
        let max = f.fold_axis(Axis(0), 0.0f64, |m, &v| m.max(v));
        let std = f.std_axis(Axis(0), 0.0);
        let data = self.frozen.data();
        Ok(mean
            .iter()
            .chain(max.iter())
            .chain(std.iter())
            .zip(self.shift.of(data).iter().zip(self.scale.of(data)))
            .map(|(v, (m, s))| (v - m) * s)
            .collect())
    }

    fn logit(&self, features: &[f64]) -> (f64, Array2<f64>, Array2<f64>) {
        let p = self.params.data();
        let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).expect("row vector");
        let pre = self.hidden.forward(p, x.view());
        let h = pre.mapv(|v| v.max(0.0));
        let z = self.out.forward(p, h.view())[[0, 0]];
        (z, x, pre)
    }

    pub fn p_continue(&self, residual: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(&self.features(residual)?).0))
    }

    pub fn should_continue(&self, residual: &[f64]) -> Result<StopDecision> {
        let p = self.p_continue(residual)?;
        let continue_ = p >= self.cfg.threshold;
        Ok(StopDecision {
            continue_,
            confidence: if continue_ { p } else { 1.0 - p },
            p_continue: p,
        })
    }

    /// Fraction of `items` classified correctly.
    pub fn accuracy(&self, items: &[Labeled]) -> Result<f64> {
        let mut correct = 0;
        for (x, label) in items {
            correct += usize::from(self.should_continue(x)?.continue_ == *label);
        }
        Ok(correct as f64 / items.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let stored = StoredConfig {
            classifier: self.cfg.clone(),
            encoder_window: self.encoder.window,
            encoder_stride: self.encoder.stride,
            feature_dim: self.encoder.dim,
        };
        let mut ck = Checkpoint::new(
            ModelKind::StopClassifier,
            serde_json::to_value(stored).expect("config serializes"),
            &self.params,
        );
        ck.frozen = records(&self.frozen);
        ck.linked_stage1_digest = self.linked_stage1_digest.clone();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::StopClassifier)?;
        let stored: StoredConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad stop classifier config: {e}")))?;
        stored.classifier.validate()?;
        let mut model = Self::build(stored.classifier, stored.encoder_window, stored.encoder_stride, stored.feature_dim, 0);
        load_records(&mut model.params, &ck.tensors)?;
        load_records(&mut model.frozen, &ck.frozen)?;
        model.linked_stage1_digest = ck.linked_stage1_digest.clone();
        Ok(model)
    }
}

/// Pooled features with their label; features are fixed because the
/// encoder is frozen, so they are computed once before training.
struct StopObjective<'a> {
    model: &'a mut StopClassifier,
}

impl Objective for StopObjective<'_> {
    type Item = (Vec<f64>, bool);
    const SCORE: Score = Score::Accuracy;

    fn params(&self) -> &[f64] {
        self.model.params.data()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.model.params.data_mut()
    }

    /// Mean binary cross-entropy on the logit.
    fn loss_and_grad(&self, batch: &[&(Vec<f64>, bool)], grads: &mut [f64]) -> Result<f64> {
        let m = &*self.model;
        let p = m.params.data();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (feats, label) in batch {
            let (z, x, pre) = m.logit(feats);
            let y = if *label { 1.0 } else { 0.0 };
            // log(1 + e^z) − y·z, computed stably
            total += scale * (z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z);
            let dz = Array2::from_elem((1, 1), scale * (sigmoid(z) - y));
            let h = pre.mapv(|v| v.max(0.0));
            let dh = m.out.backward(p, grads, h.view(), dz.view());
            let dpre = &dh * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            m.hidden.backward(p, grads, x.view(), dpre.view());
        }
        Ok(total)
    }

    fn validate(&self, items: &[(Vec<f64>, bool)]) -> Result<f64> {
        let correct = items
            .iter()
            .filter(|(f, label)| (sigmoid(self.model.logit(f).0) >= self.model.cfg.threshold) == *label)
            .count();
        Ok(correct as f64 / items.len() as f64)
    }
}

/// Trains the head of `model` on labeled residuals.
pub fn train_stop_classifier(
    model: &mut StopClassifier,
    train: &[Labeled],
    valid: &[Labeled],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let positives = train.iter().filter(|(_, l)| *l).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::TrainingData(
            "stop classifier needs examples of both CONTINUE and STOP".into(),
        ));
    }
    // Standardization starts from the identity, so the first pass yields
    // raw pooled features.
    model.fit_standardization(&[]);
    let raw: Vec<Vec<f64>> = train.iter().map(|(x, _)| model.features(x)).collect::<Result<_>>()?;
    model.fit_standardization(&raw);
    let featurize = |items: &[Labeled]| -> Result<Vec<(Vec<f64>, bool)>> {
        items.iter().map(|(x, l)| Ok((model.features(x)?, *l))).collect()
    };
    // One group, so every batch mixes both classes.
    let train = featurize(train)?;
    let valid = featurize(valid)?;
    fit(&mut StopObjective { model }, &[train], &valid, cfg, on_epoch)
}

/// Residuals of the stage-1 recursion run with the true speaker count,
/// labeled by how many speakers they still contain: after iteration `j`
/// of an N-speaker mixture, `N − j` remain. Iteration j ranges over
/// `1..N`, i.e. exactly the residuals the classifier is queried on.
pub fn recursion_residuals(stage1: &Separator, mixtures: &[Example]) -> Result<Vec<Labeled>> {
    let mut out = Vec::new();
    for ex in mixtures {
        let n = ex.num_speakers();
        let mut residual = ex.mixture.clone();
        let mut remaining: Vec<Vec<f64>> = ex.sources.clone();
        for _ in 1..n {
            let outs = stage1.forward(&residual)?;
            residual = outs[1].clone();
            if remaining.len() >= 2 {
                let l = orpit_loss(&outs[0], &outs[1], &remaining)?;
                remaining.remove(l.argmin);
            }
            out.push((residual.clone(), remaining.len() >= 2));
        }
    }
    Ok(out)
}

/// Training set for the classifier: recursion residuals plus the
/// degenerate cases added by construction (digital silence and clean
/// single sources are STOP, raw multi-speaker mixtures are CONTINUE).
pub fn stop_training_data(stage1: &Separator, mixtures: &[Example]) -> Result<Vec<Labeled>> {
    let mut data = recursion_residuals(stage1, mixtures)?;
    for ex in mixtures {
        data.push((ex.mixture.clone(), ex.num_speakers() >= 2));
        data.push((ex.sources[0].clone(), false));
    }
    if let Some(ex) = mixtures.first() {
        let silent = vec![0.0; ex.mixture.len()];
        for _ in 0..mixtures.len().div_ceil(4).max(1) {
            data.push((silent.clone(), false));
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separator::tests::tiny_config;
    use rand::Rng;

    fn toy_items(n: usize, seed: u64) -> Vec<Labeled> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let cont = i % 2 == 0;
                let f1 = rng.random_range(0.05..0.1);
                let x = (0..80)
                    .map(|t| {
                        let a = (f1 * t as f64).sin();
                        if cont {
                            a + (3.1 * f1 * t as f64).sin()
                        } else {
                            a
                        }
                    })
                    .collect();
                (x, cont)
            })
            .collect()
    }

    #[test]
    fn threshold_zero_always_continues_and_config_is_validated() {
        let stage1 = Separator::new(tiny_config(), 1).unwrap();
        let mut c = StopClassifier::new(&stage1, StopClassifierConfig::default(), 2).unwrap();
        c.set_threshold(0.0).unwrap();
        for (x, _) in toy_items(10, 3) {
            assert!(c.should_continue(&x).unwrap().continue_);
        }
        assert!(c.should_continue(&[0.0; 40]).unwrap().continue_);
        assert!(c.set_threshold(1.5).is_err());
        for t in [0.0, 1.0, -0.1] {
            let cfg = StopClassifierConfig {
                threshold: t,
                ..Default::default()
            };
            assert!(StopClassifier::new(&stage1, cfg, 0).is_err());
        }
    }

    #[test]
    fn encoder_is_a_copy_of_stage1() {
        let stage1 = Separator::new(tiny_config(), 4).unwrap();
        let c = StopClassifier::new(&stage1, StopClassifierConfig::default(), 2).unwrap();
        assert_eq!(c.encoder_weights(), stage1.encoder_weights().as_slice());
    }

    #[test]
    fn learns_a_separable_toy_problem_and_round_trips() {
        let stage1 = Separator::new(tiny_config().with_window(8), 1).unwrap();
        let mut c = StopClassifier::new(&stage1, StopClassifierConfig::default(), 2).unwrap();
        let train = toy_items(40, 5);
        let cfg = TrainConfig {
            initial_lr: 1e-2,
            batch_size: 8,
            max_epochs: 150,
            ..Default::default()
        };
        let out = train_stop_classifier(&mut c, &train, &toy_items(20, 6), &cfg, |_| {}).unwrap();
        assert!(out.log[0].valid_accuracy.is_some() && out.log[0].valid_si_snr_db.is_none());
        assert!(c.accuracy(&train).unwrap() >= 0.9);
        assert_eq!(c.encoder_weights(), stage1.encoder_weights().as_slice());
        let feats: Vec<Vec<f64>> = train.iter().map(|(x, _)| c.features(x).unwrap()).collect();
        for k in 0..feats[0].len() {
            let m = feats.iter().map(|f| f[k]).sum::<f64>() / feats.len() as f64;
            assert!(m.abs() < 1e-9, "feature {k} mean {m}");
        }
        let back = StopClassifier::from_checkpoint(&Checkpoint::from_bytes(&c.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        for (x, _) in &train {
            assert_eq!(back.p_continue(x).unwrap(), c.p_continue(x).unwrap());
        }
        let single: Vec<Labeled> = train.iter().filter(|(_, l)| *l).cloned().collect();
        assert!(train_stop_classifier(&mut c, &single, &[], &cfg, |_| {}).is_err());
    }

    #[test]
    fn residual_labels_follow_remaining_speaker_count() {
        let stage1 = Separator::new(tiny_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |n: usize, rng: &mut ChaCha8Rng| {
            let sources: Vec<Vec<f64>> = (0..n).map(|_| (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            Example {
                mixture: (0..40).map(|t| sources.iter().map(|s| s[t]).sum()).collect(),
                sources,
                speaker_ids: (0..n).map(|i| i.to_string()).collect(),
            }
        };
        let data = recursion_residuals(&stage1, &[mk(2, &mut rng), mk(3, &mut rng)]).unwrap();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        assert_eq!(labels, vec![false, true, false]);
    }
}
