//! End-to-end inference: recursive coarse extraction with the stop rule,
//! refinement of every cue against the original mixture, and
//! dataset-level evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::extractor::{Extractor, FinalCue};
use crate::metrics::assignment::maximize;
use crate::metrics::{assignment_best_permutation, exhaustive_best_permutation, si_snr, si_snr_matrix, EXHAUSTIVE_MAX_SOURCES};
use crate::mixsim::Example;
use crate::separator::Separator;
use crate::stop::{StopClassifier, StopDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub max_iterations: usize,
    pub final_cue: FinalCue,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            max_iterations: 10,
            final_cue: FinalCue::TerminalResidual,
        }
    }
}

/// The three trained models, checked for compatibility.
#[derive(Clone, Debug)]
pub struct Models {
    pub stage1: Separator,
    pub stop: StopClassifier,
    /// Without a stage-2 model the coarse cues are returned as the outputs.
    pub stage2: Option<Extractor>,
}

impl Models {
    pub fn new(stage1: Separator, stop: StopClassifier, stage2: Option<Extractor>) -> Result<Self> {
        let enc = stage1.encoder_weights();
        if stop.encoder_weights() != enc.as_slice() {
            return Err(Error::Incompatible(format!(
                "stop classifier encoder ({} weights) is not the stage-1 encoder ({} weights)",
                stop.encoder_weights().len(),
                enc.len()
            )));
        }
        if let Some(g) = &stage2 {
            if g.cue_encoder_weights() != enc.as_slice() {
                return Err(Error::Incompatible(format!(
                    "stage-2 cue encoder ({} weights) is not the stage-1 encoder ({} weights)",
                    g.cue_encoder_weights().len(),
                    enc.len()
                )));
            }
        }
        Ok(Models { stage1, stop, stage2 })
    }

    /// Loads checkpoints and verifies that the stop classifier and the
    /// extractor were built from this stage-1 checkpoint.
    pub fn load(stage1: &Path, stop: &Path, stage2: Option<&Path>) -> Result<Self> {
        let s1 = Checkpoint::load(stage1)?;
        let digest = s1.digest()?;
        let check = |what: &str, linked: Option<&str>| -> Result<()> {
            match linked {
                Some(d) if d != digest => Err(Error::Incompatible(format!(
                    "{what} was trained against stage-1 checkpoint {d}, but {} has digest {digest}",
                    stage1.display()
                ))),
                _ => Ok(()),
            }
        };
        let stop = StopClassifier::from_checkpoint(&Checkpoint::load(stop)?)?;
        check("stop classifier", stop.linked_stage1_digest())?;
        let stage2 = match stage2 {
            Some(p) => {
                let g = Extractor::from_checkpoint(&Checkpoint::load(p)?)?;
                check("stage-2 extractor", g.linked_stage1_digest())?;
                Some(g)
            }
            None => None,
        };
        Models::new(Separator::from_checkpoint(&s1)?, stop, stage2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationResult {
    /// Refined outputs in iteration order.
    pub fine_sources: Vec<Waveform>,
    pub coarse_cues: Vec<Waveform>,
    /// `residual_trace[0]` is the input mixture, entry `j` the residual
    /// after iteration `j`.
    pub residual_trace: Vec<Waveform>,
    pub stop_decisions: Vec<StopDecision>,
    pub iterations: usize,
    /// Set when `max_iterations` cut the recursion while the classifier
    /// still asked to continue.
    pub truncated: bool,
}

/// A serializable summary of a [`SeparationResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub iterations: usize,
    pub truncated: bool,
    pub stop_decisions: Vec<StopDecision>,
    pub source_files: Vec<String>,
}

pub fn separate(x: &Waveform, models: &Models, opts: &PipelineOptions) -> Result<SeparationResult> {
    separate_with_hook(x, models, opts, |_, _| {})
}

/// [`separate`], calling `on_refine(mixture, cue)` with the exact inputs of
/// every stage-2 call.
pub fn separate_with_hook(
    x: &Waveform,
    models: &Models,
    opts: &PipelineOptions,
    mut on_refine: impl FnMut(&[f64], &[f64]),
) -> Result<SeparationResult> {
    if opts.max_iterations == 0 {
        return Err(Error::Config("max_iterations must be positive".into()));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rate = x.rate();
    let mut cues: Vec<Vec<f64>> = Vec::new();
    let mut trace = vec![x.clone()];
    let mut decisions = Vec::new();
    let mut truncated = false;
    let mut residual = x.samples().to_vec();
    loop {
        let mut outs = models.stage1.forward(&residual)?.into_iter();
        let cue = outs.next().expect("cue channel");
        let next = outs.next().expect("residual channel");
        let decision = models.stop.should_continue(&next)?;
        cues.push(cue);
        trace.push(Waveform::new(next.clone(), rate)?);
        decisions.push(decision);
        if !decision.continue_ {
            if cues.len() < opts.max_iterations {
                cues.push(match opts.final_cue {
                    FinalCue::TerminalResidual => next,
                    FinalCue::FinalPass => models.stage1.forward(&next)?.swap_remove(0),
                });
            }
            break;
        }
        if cues.len() >= opts.max_iterations {
            truncated = true;
            break;
        }
        residual = next;
    }
    let fine = cues
        .iter()
        .map(|c| match &models.stage2 {
            Some(g) => {
                on_refine(x.samples(), c);
                g.extract(x.samples(), c)
            }
            None => Ok(c.clone()),
        })
        .map(|r| r.and_then(|s| Waveform::new(s, rate)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparationResult {
        iterations: cues.len(),
        coarse_cues: cues.into_iter().map(|c| Waveform::new(c, rate)).collect::<Result<_>>()?,
        fine_sources: fine,
        residual_trace: trace,
        stop_decisions: decisions,
        truncated,
    })
}

/// Matched SI-SNR per estimate (`None` for estimates left unmatched when
/// the predicted count differs from the true one). Equal counts use the
/// best permutation; otherwise the `min(P, N)` best pairs.
pub fn align_scores(ests: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    if ests.is_empty() || refs.is_empty() {
        return Ok(vec![None; ests.len()]);
    }
    let scores = si_snr_matrix(ests, refs)?;
    let mut out = vec![None; ests.len()];
    if ests.len() == refs.len() {
        let perm = if ests.len() <= EXHAUSTIVE_MAX_SOURCES {
            exhaustive_best_permutation(&scores)
        } else {
            assignment_best_permutation(&scores)
        };
        for (i, j) in perm.into_iter().enumerate() {
            out[i] = Some(scores[i][j]);
        }
    } else {
        for (i, j) in maximize(&scores) {
            out[i] = Some(scores[i][j]);
        }
    }
    Ok(out)
}

/// Scores of one mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureScore {
    pub index: usize,
    pub num_speakers: usize,
    pub predicted: usize,
    pub truncated: bool,
    pub fine_si_snr_db: Vec<Option<f64>>,
    pub coarse_si_snr_db: Option<Vec<Option<f64>>>,
    pub mixture_si_snr_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub pipeline: PipelineOptions,
    /// Also score the coarse cues (stage-1-only rows).
    pub score_coarse: bool,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            pipeline: PipelineOptions::default(),
            score_coarse: true,
            workers: 1,
        }
    }
}

/// Per-N aggregate of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub num_speakers: usize,
    pub mixtures: usize,
    /// Mean over mixtures of the mean matched SI-SNR.
    pub mean_si_snr_db: f64,
    /// Mean over mixtures of the mean matched SI-SNR improvement.
    pub mean_si_snr_improvement_db: f64,
    /// Iteration `j` (1-based, index `j-1`) mean over mixtures that reached it.
    pub per_iteration_db: Vec<Option<f64>>,
    pub counting_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_num_speakers: BTreeMap<usize, f64>,
    /// Keyed by `(N, j)` with 1-based `j`.
    pub per_iteration: BTreeMap<(usize, usize), f64>,
    pub coarse_per_num_speakers: Option<BTreeMap<usize, f64>>,
    pub coarse_per_iteration: Option<BTreeMap<(usize, usize), f64>>,
    pub counting_accuracy: f64,
    pub rows: Vec<StageRow>,
    pub mixtures: Vec<MixtureScore>,
}

/// Order-independent mean: values are sorted before summation.
fn mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn row(stage: &str, n: usize, scores: &[&MixtureScore], pick: impl Fn(&MixtureScore) -> &[Option<f64>]) -> StageRow {
    let mut means = Vec::new();
    let mut improvements = Vec::new();
    let mut per_iter: Vec<Vec<f64>> = Vec::new();
    for s in scores {
        let matched: Vec<(usize, f64)> = pick(s).iter().enumerate().filter_map(|(j, v)| v.map(|v| (j, v))).collect();
        if matched.is_empty() {
            continue;
        }
        let mut vals: Vec<f64> = matched.iter().map(|&(_, v)| v).collect();
        means.push(mean(&mut vals));
        let mut base = s.mixture_si_snr_db.clone();
        improvements.push(means.last().unwrap() - mean(&mut base));
        for &(j, v) in &matched {
            if per_iter.len() <= j {
                per_iter.resize(j + 1, Vec::new());
            }
            per_iter[j].push(v);
        }
    }
    let correct = scores.iter().filter(|s| s.predicted == s.num_speakers).count();
    StageRow {
        stage: stage.to_owned(),
        num_speakers: n,
        mixtures: scores.len(),
        mean_si_snr_db: if means.is_empty() { f64::NAN } else { mean(&mut means) },
        mean_si_snr_improvement_db: if improvements.is_empty() { f64::NAN } else { mean(&mut improvements) },
        per_iteration_db: per_iter
            .iter_mut()
            .map(|v| (!v.is_empty()).then(|| mean(v)))
            .collect(),
        counting_accuracy: correct as f64 / scores.len() as f64,
    }
}

/// Aggregates per-mixture scores; the result does not depend on their order.
pub fn aggregate(mut mixtures: Vec<MixtureScore>) -> Result<EvalReport> {
    if mixtures.is_empty() {
        return Err(Error::EmptyInput);
    }
    mixtures.sort_by_key(|m| m.index);
    let mut by_n: BTreeMap<usize, Vec<&MixtureScore>> = BTreeMap::new();
    for m in &mixtures {
        by_n.entry(m.num_speakers).or_default().push(m);
    }
    let has_coarse = mixtures.iter().all(|m| m.coarse_si_snr_db.is_some());
    let mut rows = Vec::new();
    for (&n, scores) in &by_n {
        if has_coarse {
            rows.push(row("coarse", n, scores, |s| s.coarse_si_snr_db.as_deref().expect("checked")));
        }
        rows.push(row("fine", n, scores, |s| &s.fine_si_snr_db));
    }
    let tables = |stage: &str| {
        let mut per_n = BTreeMap::new();
        let mut per_iter = BTreeMap::new();
        for r in rows.iter().filter(|r| r.stage == stage) {
            per_n.insert(r.num_speakers, r.mean_si_snr_db);
            for (j, v) in r.per_iteration_db.iter().enumerate() {
                if let Some(v) = v {
                    per_iter.insert((r.num_speakers, j + 1), *v);
                }
            }
        }
        (per_n, per_iter)
    };
    let (per_num_speakers, per_iteration) = tables("fine");
    let coarse = has_coarse.then(|| tables("coarse"));
    let correct = mixtures.iter().filter(|m| m.predicted == m.num_speakers).count();
    Ok(EvalReport {
        per_num_speakers,
        per_iteration,
        coarse_per_num_speakers: coarse.as_ref().map(|c| c.0.clone()),
        coarse_per_iteration: coarse.map(|c| c.1),
        counting_accuracy: correct as f64 / mixtures.len() as f64,
        rows,
        mixtures,
    })
}

/// Scores one mixture given its separation result.
pub fn score_mixture(index: usize, ex: &Example, result: &SeparationResult, score_coarse: bool) -> Result<MixtureScore> {
    let fine: Vec<Vec<f64>> = result.fine_sources.iter().map(|w| w.samples().to_vec()).collect();
    let coarse: Vec<Vec<f64>> = result.coarse_cues.iter().map(|w| w.samples().to_vec()).collect();
    Ok(MixtureScore {
        index,
        num_speakers: ex.num_speakers(),
        predicted: result.iterations,
        truncated: result.truncated,
        fine_si_snr_db: align_scores(&fine, &ex.sources)?,
        coarse_si_snr_db: if score_coarse { Some(align_scores(&coarse, &ex.sources)?) } else { None },
        mixture_si_snr_db: ex.sources.iter().map(|s| si_snr(&ex.mixture, s)).collect::<Result<_>>()?,
    })
}

/// Evaluates an arbitrary separation function over `examples`.
pub fn evaluate_with<F>(examples: &[Example], opts: &EvalOptions, separate_fn: F) -> Result<EvalReport>
where
    F: Fn(&Example) -> Result<SeparationResult> + Sync,
{
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scores = crate::parallel::map_indexed(examples.len(), opts.workers, |k| {
        let result = separate_fn(&examples[k])?;
        score_mixture(k, &examples[k], &result, opts.score_coarse)
    })?;
    aggregate(scores)
}

pub fn evaluate(examples: &[Example], models: &Models, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(examples, opts, |ex| {
        separate(&Waveform::at_8k(ex.mixture.clone())?, models, &opts.pipeline)
    })
}

fn fmt_db(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.2}"),
        _ => "-".into(),
    }
}

impl EvalReport {
    /// One JSON object per stage and speaker count, then an overall line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out += &serde_json::to_string(r).expect("rows serialize");
            out.push('\n');
        }
        out += &serde_json::json!({ "counting_accuracy": self.counting_accuracy, "mixtures": self.mixtures.len() }).to_string();
        out.push('\n');
        out
    }

    /// Per-mixture scores, one JSON object per line in index order.
    pub fn mixtures_jsonl(&self) -> String {
        self.mixtures
            .iter()
            .map(|m| serde_json::to_string(m).expect("scores serialize") + "\n")
            .collect()
    }

    /// Rows are speaker counts, columns iterations.
    pub fn table(&self) -> String {
        let iters = self.rows.iter().map(|r| r.per_iteration_db.len()).max().unwrap_or(0);
        let mut header = vec!["stage".to_owned(), "N".into(), "mixtures".into(), "SI-SNR".into(), "SI-SNRi".into()];
        header.extend((1..=iters).map(|j| format!("j={j}")));
        header.push("count acc".into());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut cells = vec![
                r.stage.clone(),
                r.num_speakers.to_string(),
                r.mixtures.to_string(),
                fmt_db(Some(r.mean_si_snr_db)),
                fmt_db(Some(r.mean_si_snr_improvement_db)),
            ];
            cells.extend((0..iters).map(|j| fmt_db(r.per_iteration_db.get(j).copied().flatten())));
            cells.push(format!("{:.3}", r.counting_accuracy));
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("writing to a string");
        }
        writeln!(out, "counting accuracy: {:.3}", self.counting_accuracy).expect("writing to a string");
        out
    }

    /// Writes `report.jsonl`, `mixtures.jsonl` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("report.jsonl", self.to_jsonl()),
            ("mixtures.jsonl", self.mixtures_jsonl()),
            ("report.txt", self.table()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::SI_SNR_CAP_DB;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example(n: usize, len: usize, seed: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
        Example {
            mixture: (0..len).map(|t| sources.iter().map(|s| s[t]).sum()).collect(),
            sources,
            speaker_ids: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    fn oracle(ex: &Example, reversed: bool) -> Result<SeparationResult> {
        let mut srcs: Vec<Waveform> = ex.sources.iter().map(|s| Waveform::at_8k(s.clone()).unwrap()).collect();
        if reversed {
            srcs.reverse();
        }
        Ok(SeparationResult {
            iterations: srcs.len(),
            coarse_cues: srcs.clone(),
            fine_sources: srcs,
            residual_trace: vec![Waveform::at_8k(ex.mixture.clone()).unwrap()],
            stop_decisions: Vec::new(),
            truncated: false,
        })
    }

    #[test]
    fn oracle_separator_hits_the_cap() {
        let data: Vec<Example> = (0..6).map(|k| example(2 + k % 2, 64, k as u64)).collect();
        let report = evaluate_with(&data, &EvalOptions::default(), |ex| oracle(ex, true)).unwrap();
        assert_eq!(report.counting_accuracy, 1.0);
        for n in [2, 3] {
            assert!((report.per_num_speakers[&n] - SI_SNR_CAP_DB).abs() < 1e-6);
            assert!((report.coarse_per_num_speakers.as_ref().unwrap()[&n] - SI_SNR_CAP_DB).abs() < 1e-6);
        }
        assert!(report.table().contains("coarse") && report.table().contains("fine"));
    }

    #[test]
    fn aggregation_ignores_mixture_order() {
        let data: Vec<Example> = (0..9).map(|k| example(2 + k % 2, 48, 100 + k as u64)).collect();
        let noisy = |ex: &Example| {
            let mut r = oracle(ex, false)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ex.mixture[0].to_bits());
            for w in r.fine_sources.iter_mut() {
                *w = Waveform::at_8k(w.samples().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect()).unwrap();
            }
            if ex.mixture[1] > 0.0 {
                r.fine_sources.pop();
                r.iterations -= 1;
            }
            Ok(r)
        };
        let a = evaluate_with(&data, &EvalOptions::default(), noisy).unwrap();
        let mut shuffled = data.clone();
        shuffled.reverse();
        shuffled.swap(0, 4);
        let b = evaluate_with(&shuffled, &EvalOptions::default(), noisy).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.table(), b.table());
    }

    #[test]
    fn miscounts_score_the_best_subset() {
        let ex = example(3, 64, 7);
        let ests = vec![ex.sources[2].clone(), ex.sources[0].clone()];
        let s = align_scores(&ests, &ex.sources).unwrap();
        assert!(s.iter().all(|v| (v.unwrap() - SI_SNR_CAP_DB).abs() < 1e-6));
        let extra = vec![ex.sources[1].clone(), ex.mixture.clone(), ex.sources[0].clone(), ex.sources[2].clone()];
        let s = align_scores(&extra, &ex.sources).unwrap();
        assert_eq!(s.iter().filter(|v| v.is_none()).count(), 1);
        assert!(s[1].is_none());
    }

    fn untrained_models(threshold: f64) -> Models {
        use crate::extractor::ConditionedConfig;
        use crate::separator::{tests::tiny_config, SeparatorConfig};
        use crate::stop::StopClassifierConfig;
        let stage1 = Separator::new(tiny_config(), 1).unwrap();
        let mut stop = StopClassifier::new(&stage1, StopClassifierConfig::default(), 2).unwrap();
        stop.set_threshold(threshold).unwrap();
        let cfg = ConditionedConfig {
            separator: SeparatorConfig {
                num_outputs: 1,
                ..tiny_config()
            },
            conditioning_blocks: vec![1],
            init_from_stage1: false,
        };
        let g = Extractor::new(&stage1, cfg, 3).unwrap();
        Models::new(stage1, stop, Some(g)).unwrap()
    }

    #[test]
    fn iteration_cap_and_stage2_dataflow() {
        let x = Waveform::at_8k(example(3, 80, 11).mixture).unwrap();
        let always = untrained_models(0.0);
        let opts = PipelineOptions {
            max_iterations: 1,
            ..Default::default()
        };
        let r = separate(&x, &always, &opts).unwrap();
        assert_eq!((r.iterations, r.fine_sources.len(), r.truncated), (1, 1, true));

        let opts = PipelineOptions {
            max_iterations: 4,
            ..Default::default()
        };
        let mut seen = Vec::new();
        let r = separate_with_hook(&x, &always, &opts, |mix, cue| seen.push((mix.to_vec(), cue.to_vec()))).unwrap();
        assert_eq!(r.iterations, 4);
        assert!(r.truncated);
        assert_eq!(r.residual_trace[0], x);
        assert_eq!(r.residual_trace.len(), 5);
        assert_eq!(seen.len(), 4);
        for (k, (mix, cue)) in seen.iter().enumerate() {
            assert_eq!(mix.as_slice(), x.samples());
            assert_eq!(cue.as_slice(), r.coarse_cues[k].samples());
        }
        for w in r.fine_sources.iter().chain(&r.coarse_cues).chain(&r.residual_trace) {
            assert_eq!(w.len(), 80);
            assert!(w.samples().iter().all(|v| v.is_finite()));
        }
        assert_eq!(separate(&x, &always, &opts).unwrap(), r);
    }

    #[test]
    fn stop_appends_the_terminal_residual() {
        let x = Waveform::at_8k(example(2, 80, 12).mixture).unwrap();
        let never = untrained_models(1.0);
        let r = separate(&x, &never, &PipelineOptions::default()).unwrap();
        assert_eq!(r.iterations, 2);
        assert!(!r.truncated);
        assert_eq!(r.coarse_cues[1], r.residual_trace[1]);
        let opts = PipelineOptions {
            final_cue: FinalCue::FinalPass,
            ..Default::default()
        };
        let r2 = separate(&x, &never, &opts).unwrap();
        assert_eq!(r2.coarse_cues[1].samples(), never.stage1.forward(r.residual_trace[1].samples()).unwrap()[0].as_slice());
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(evaluate_with(&[], &EvalOptions::default(), |ex| oracle(ex, false)).is_err());
    }
}
