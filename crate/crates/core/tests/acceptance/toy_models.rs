//! Criteria that need trained toy models.
//!
//! Stage 1 is the expensive model, so it ships as a fixture produced by
//! `tests/fixtures/toy/recipe.sh`. The stop classifier and the extractor
//! are trained here. Every score is measured on freshly simulated mixtures
//! of held-out toy speakers that no model saw during training.

use std::path::Path;
use std::sync::OnceLock;

use corfsep::checkpoint::Checkpoint;
use corfsep::extractor::{cue_pairs, ConditionedConfig, CuePair, Extractor, FinalCue};
use corfsep::metrics::si_snr;
use corfsep::mixsim::{build_dataset, ingest_corpus, load_dataset, BuildOptions, Example, Segmentation, Split};
use corfsep::pipeline::{evaluate, EvalOptions, Models};
use corfsep::separator::{Separator, SeparatorConfig};
use corfsep::stop::{recursion_residuals, stop_training_data, train_stop_classifier, StopClassifier, StopClassifierConfig};
use corfsep::toy::{write_toy_corpus, ToyCorpusSpec};
use corfsep::train::TrainConfig;

use super::{check, Verdict};

/// Segment length of the toy recipe, in samples.
const SEG: usize = 2000;
const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy/stage1_finetuned.ckpt.json");

pub fn overfit_config() -> SeparatorConfig {
    SeparatorConfig {
        feature_dim: 64,
        bottleneck_dim: 32,
        hidden_dim: 32,
        chunk_size: 16,
        num_blocks: 2,
        num_outputs: 2,
        ..SeparatorConfig::default()
    }
    .with_window(32)
}

struct World {
    stage1: Separator,
    train2: Vec<Example>,
    train3: Vec<Example>,
    valid: Vec<Example>,
    test2: Vec<Example>,
    test3: Vec<Example>,
}

/// Simulates `(speakers, count, seed)` sets from a fresh toy corpus.
fn simulate(dir: &Path, name: &str, split: Split, corpus: (usize, u64), sets: &[(usize, usize, u64)]) -> Vec<Vec<Example>> {
    let root = dir.join(name);
    write_toy_corpus(root.join("corpus"), &ToyCorpusSpec {
        num_speakers: corpus.0,
        utterances_per_speaker: 4,
        min_len: SEG,
        max_len: 3 * SEG,
        prefix: name.into(),
        seed: corpus.1,
    })
    .unwrap();
    let index = ingest_corpus(root.join("corpus"), split).unwrap();
    let opts = BuildOptions { segmentation: Segmentation::with_len(SEG), ..Default::default() };
    sets.iter()
        .map(|&(n, count, seed)| {
            let out = root.join(format!("{n}spk_{seed}"));
            build_dataset(&index, n, count, seed, &out, &opts).unwrap();
            load_dataset(out.join("manifest.tsv")).unwrap()
        })
        .collect()
}

fn world(dir: &Path) -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let stage1 = Separator::from_checkpoint(&Checkpoint::load(FIXTURE).expect("stage-1 fixture")).unwrap();
        let mut train = simulate(dir, "acctrain", Split::Train, (100, 81), &[(2, 400, 82), (3, 400, 83), (2, 30, 84), (3, 30, 85)]);
        let mut test = simulate(dir, "heldout", Split::Test, (20, 91), &[(2, 60, 92), (3, 60, 93)]);
        let valid = [train.pop().unwrap(), train.pop().unwrap()].concat();
        World {
            stage1,
            train3: train.pop().unwrap(),
            train2: train.pop().unwrap(),
            valid,
            test3: test.pop().unwrap(),
            test2: test.pop().unwrap(),
        }
    })
}

fn stop_classifier(w: &World) -> &'static StopClassifier {
    static S: OnceLock<StopClassifier> = OnceLock::new();
    S.get_or_init(|| {
        let mut stop = StopClassifier::new(&w.stage1, StopClassifierConfig::default(), 9).unwrap();
        let train = [stop_training_data(&w.stage1, &w.train2).unwrap(), stop_training_data(&w.stage1, &w.train3).unwrap()].concat();
        let valid = recursion_residuals(&w.stage1, &w.valid).unwrap();
        let cfg = TrainConfig { initial_lr: 3e-3, batch_size: 16, max_epochs: 100, seed: 9, ..Default::default() };
        train_stop_classifier(&mut stop, &train, &valid, &cfg, |_| {}).unwrap();
        stop
    })
}

fn stage2_config(stage1: &Separator) -> ConditionedConfig {
    ConditionedConfig {
        separator: SeparatorConfig { num_outputs: 1, ..stage1.config().clone() },
        conditioning_blocks: vec![1],
        init_from_stage1: true,
    }
}

/// Cuts pairs into non-overlapping `len`-sample pieces, dropping pieces
/// whose reference is silent. Halves the cost of a training step.
fn crop(pairs: &[CuePair], len: usize) -> Vec<CuePair> {
    let mut out = Vec::new();
    for p in pairs {
        let mut s = 0;
        while s + len <= p.mixture.len() {
            if p.reference[s..s + len].iter().all(|v| v.abs() < 1e-4) {
                s += len;
                continue;
            }
            out.push(CuePair {
                mixture: p.mixture[s..s + len].to_vec(),
                cue: p.cue[s..s + len].to_vec(),
                reference: p.reference[s..s + len].to_vec(),
            });
            s += len;
        }
    }
    out
}

fn train_extractor(w: &World, pairs: &[CuePair], valid: &[CuePair], seed: u64) -> Extractor {
    let mut g = Extractor::new(&w.stage1, stage2_config(&w.stage1), seed).unwrap();
    let cfg = TrainConfig {
        initial_lr: 1e-3,
        batch_size: 4,
        steps_per_epoch: Some(100),
        max_epochs: 8,
        seed,
        ..Default::default()
    };
    corfsep::extractor::train_stage2(&mut g, crop(pairs, SEG / 2), valid, &cfg, |_| {}).unwrap();
    g
}

static FIRST_EXTRACTOR: OnceLock<Extractor> = OnceLock::new();

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn c8_stage2_gain(dir: &Path) -> Verdict {
    let t = std::time::Instant::now();
    let w = world(dir);
    let pairs = [
        cue_pairs(&w.stage1, &w.train3, FinalCue::TerminalResidual).unwrap(),
        cue_pairs(&w.stage1, &w.train2, FinalCue::TerminalResidual).unwrap(),
    ]
    .concat();
    let valid = cue_pairs(&w.stage1, &w.valid, FinalCue::TerminalResidual).unwrap();
    let test = cue_pairs(&w.stage1, &w.test3, FinalCue::TerminalResidual).unwrap();
    let coarse = mean(test.iter().map(|p| si_snr(&p.cue, &p.reference).unwrap()));
    eprintln!("  [8] {} training pairs, cues {coarse:.2} dB ({:.0}s)", pairs.len(), t.elapsed().as_secs_f64());
    let mut fine = Vec::new();
    let mut by_iteration = Vec::new();
    for seed in 1..=10 {
        let g = train_extractor(w, &pairs, &valid, seed);
        fine.push(mean(test.iter().map(|p| si_snr(&g.extract(&p.mixture, &p.cue).unwrap(), &p.reference).unwrap())));
        eprintln!("  [8] seed {seed}: {:.2} dB ({:.0}s)", fine[fine.len() - 1], t.elapsed().as_secs_f64());
        if seed == 1 {
            for j in 0..3 {
                // Pairs come three per mixture, in recursion order.
                let sub: Vec<&CuePair> = test.iter().skip(j).step_by(3).collect();
                let c = mean(sub.iter().map(|p| si_snr(&p.cue, &p.reference).unwrap()));
                let f = mean(sub.iter().map(|p| si_snr(&g.extract(&p.mixture, &p.cue).unwrap(), &p.reference).unwrap()));
                by_iteration.push(format!("{c:.2} → {f:.2}"));
            }
            let _ = FIRST_EXTRACTOR.set(g);
        }
    }
    let above = fine.iter().filter(|&&f| f > coarse).count();
    let within = fine.iter().all(|&f| f >= coarse - 0.5);
    let shown: Vec<String> = fine.iter().map(|f| format!("{f:.2}")).collect();
    check(
        within && above >= 6,
        format!(
            "held-out 3-speaker cues {coarse:.2} dB; refined per seed [{}] dB; above the cues in {above}/10 (need ≥ 6), none below −0.5 dB: {within}; seed 1 cue → refined by iteration [{}]",
            shown.join(", "),
            by_iteration.join(", ")
        ),
    )
}

pub fn c9_stop_classifier(dir: &Path) -> Verdict {
    let w = world(dir);
    let stop = stop_classifier(w);
    let held_out = [recursion_residuals(&w.stage1, &w.test2).unwrap(), recursion_residuals(&w.stage1, &w.test3).unwrap()].concat();
    let acc = stop.accuracy(&held_out).unwrap();
    let silence = stop.should_continue(&vec![0.0; SEG]).unwrap();
    check(
        acc >= 0.9 && !silence.continue_,
        format!(
            "held-out residual accuracy {acc:.3} (≥ 0.9) on {} residuals; silence → {} (confidence {:.3})",
            held_out.len(),
            if silence.continue_ { "CONTINUE" } else { "STOP" },
            silence.confidence
        ),
    )
}

pub fn c10_counting(dir: &Path) -> Verdict {
    let w = world(dir);
    let stop = stop_classifier(w).clone();
    let g = match FIRST_EXTRACTOR.get() {
        Some(g) => g.clone(),
        None => {
            let pairs = cue_pairs(&w.stage1, &w.train3, FinalCue::TerminalResidual).unwrap();
            let valid = cue_pairs(&w.stage1, &w.valid, FinalCue::TerminalResidual).unwrap();
            train_extractor(w, &pairs, &valid, 1)
        }
    };
    let models = Models::new(w.stage1.clone(), stop, Some(g)).unwrap();
    let test = [w.test2.clone(), w.test3.clone()].concat();
    let report = evaluate(&test, &models, &EvalOptions::default()).unwrap();
    let mut trend_ok = true;
    let mut trends = Vec::new();
    for n in [2usize, 3] {
        let per: Vec<f64> = (1..=n).filter_map(|j| report.per_iteration.get(&(n, j)).copied()).collect();
        trend_ok &= per.len() == n && per.windows(2).all(|p| p[1] <= p[0]);
        let shown: Vec<String> = per.iter().map(|v| format!("{v:.2}")).collect();
        trends.push(format!("N={n}: [{}]", shown.join(" → ")));
    }
    let acc = report.counting_accuracy;
    check(
        acc >= 0.8 && trend_ok,
        format!(
            "exact count on {:.1}% of {} held-out mixtures (≥ 80%); per-iteration dB {}",
            100.0 * acc,
            test.len(),
            trends.join(", ")
        ),
    )
}
