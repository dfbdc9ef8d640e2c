//! Stage-1 training: the recursive cue extractor under the one-and-rest
//! loss, and fine-tuning on first-iteration residuals.

use crate::error::{Error, Result};
use crate::loss::orpit_loss;
use crate::mixsim::Example;
use crate::separator::Separator;
use crate::train::{fit, EpochRecord, Objective, TrainConfig, TrainOutcome};

pub struct Stage1Objective<'a> {
    pub model: &'a mut Separator,
}

impl Objective for Stage1Objective<'_> {
    type Item = Example;

    fn params(&self) -> &[f64] {
        self.model.params().data()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.model.params_mut().data_mut()
    }

    fn loss_and_grad(&self, batch: &[&Example], grads: &mut [f64]) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            let (outs, cache) = self.model.forward_train(&ex.mixture)?;
            let l = orpit_loss(&outs[0], &outs[1], &ex.sources)?;
            let mut dcue = l.grad_cue;
            let mut dres = l.grad_residual;
            dcue.iter_mut().chain(dres.iter_mut()).for_each(|g| *g *= scale);
            self.model.backward(&cache, &[dcue, dres], grads);
            total += l.value * scale;
        }
        Ok(total)
    }

    fn validate(&self, items: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in items {
            let outs = self.model.forward(&ex.mixture)?;
            let l = orpit_loss(&outs[0], &outs[1], &ex.sources)?;
            total += 0.5 * (l.cue_si_snr_db + l.residual_si_snr_db);
        }
        Ok(total / items.len() as f64)
    }
}

/// Splits examples into homogeneous groups by speaker count (ascending N).
pub fn group_by_speakers(items: Vec<Example>) -> Vec<Vec<Example>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<Example>> = Default::default();
    for ex in items {
        groups.entry(ex.num_speakers()).or_default().push(ex);
    }
    groups.into_values().collect()
}

fn check_examples(items: &[Example], what: &str) -> Result<()> {
    if let Some(ex) = items.iter().find(|e| e.num_speakers() < 2) {
        return Err(Error::TrainingData(format!(
            "{what}: stage-1 examples need at least 2 speakers, found {}",
            ex.num_speakers()
        )));
    }
    Ok(())
}

/// Trains `model` in place on the union of `datasets` (typically the
/// two- and three-speaker sets).
pub fn train_stage1(
    model: &mut Separator,
    datasets: Vec<Vec<Example>>,
    valid: &[Example],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if datasets.iter().any(Vec::is_empty) {
        return Err(Error::TrainingData("every stage-1 training set must be nonempty".into()));
    }
    let all: Vec<Example> = datasets.into_iter().flatten().collect();
    check_examples(&all, "training")?;
    check_examples(valid, "validation")?;
    fit(&mut Stage1Objective { model }, &group_by_speakers(all), valid, cfg, on_epoch)
}

/// Runs one recursion on every three-speaker mixture and turns its residual
/// into a two-speaker example whose references are the sources not claimed
/// by the loss-minimizing assignment of the cue.
pub fn derive_residual_examples(model: &Separator, threemix: &[Example]) -> Result<Vec<Example>> {
    threemix
        .iter()
        .map(|ex| {
            if ex.num_speakers() != 3 {
                return Err(Error::TrainingData(format!(
                    "fine-tuning expects 3-speaker mixtures, found {}",
                    ex.num_speakers()
                )));
            }
            let outs = model.forward(&ex.mixture)?;
            let l = orpit_loss(&outs[0], &outs[1], &ex.sources)?;
            let keep: Vec<usize> = (0..3).filter(|&i| i != l.argmin).collect();
            Ok(Example {
                mixture: outs[1].clone(),
                sources: keep.iter().map(|&i| ex.sources[i].clone()).collect(),
                speaker_ids: keep.iter().map(|&i| ex.speaker_ids[i].clone()).collect(),
            })
        })
        .collect()
}

/// Continues training on derived residual pairs plus the original
/// three-speaker mixtures.
pub fn finetune_stage1(
    model: &mut Separator,
    threemix: Vec<Example>,
    valid: &[Example],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if threemix.is_empty() {
        return Err(Error::TrainingData("fine-tuning needs 3-speaker mixtures".into()));
    }
    let derived = derive_residual_examples(model, &threemix)?;
    finetune_on(model, derived, threemix, valid, cfg, on_epoch)
}

/// [`finetune_stage1`] with the residual set already derived.
pub fn finetune_on(
    model: &mut Separator,
    derived: Vec<Example>,
    threemix: Vec<Example>,
    valid: &[Example],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if derived.len() != threemix.len() {
        return Err(Error::TrainingData(format!(
            "{} derived residual examples for {} mixtures",
            derived.len(),
            threemix.len()
        )));
    }
    train_stage1(model, vec![derived, threemix], valid, cfg, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separator::tests::tiny_config;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn examples(n: usize, speakers: usize, len: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let sources: Vec<Vec<f64>> = (0..speakers)
                    .map(|_| (0..len).map(|_| rng.random_range(-0.5..0.5)).collect())
                    .collect();
                let mixture = (0..len).map(|t| sources.iter().map(|s| s[t]).sum()).collect();
                Example {
                    mixture,
                    sources,
                    speaker_ids: (0..speakers).map(|i| format!("s{i}")).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn derived_set_has_one_pair_per_mixture_without_the_argmin_speaker() {
        let model = Separator::new(tiny_config(), 3).unwrap();
        let three = examples(4, 3, 40, 1);
        let derived = derive_residual_examples(&model, &three).unwrap();
        assert_eq!(derived.len(), three.len());
        for (d, ex) in derived.iter().zip(&three) {
            let outs = model.forward(&ex.mixture).unwrap();
            let argmin = orpit_loss(&outs[0], &outs[1], &ex.sources).unwrap().argmin;
            assert_eq!(d.num_speakers(), 2);
            assert!(!d.speaker_ids.contains(&ex.speaker_ids[argmin]));
            assert_eq!(d.mixture, outs[1]);
        }
        assert!(derive_residual_examples(&model, &examples(1, 2, 40, 1)).is_err());
    }

    #[test]
    fn training_is_reproducible_and_rejects_bad_data() {
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 2,
            initial_lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Separator::new(tiny_config(), 5).unwrap();
            let out = train_stage1(&mut m, vec![examples(3, 2, 48, 2), examples(2, 3, 48, 3)], &[], &cfg, |_| {}).unwrap();
            (m.params().data().to_vec(), out.log_lines())
        };
        assert_eq!(run(), run());
        let mut m = Separator::new(tiny_config(), 5).unwrap();
        assert!(train_stage1(&mut m, vec![examples(2, 2, 48, 2), vec![]], &[], &cfg, |_| {}).is_err());
        assert!(train_stage1(&mut m, vec![examples(2, 1, 48, 2)], &[], &cfg, |_| {}).is_err());
    }
}
