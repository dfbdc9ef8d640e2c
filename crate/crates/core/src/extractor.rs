//! Stage-2 target extractor `G(x, ĉ)`.
//!
//! The mixture goes through a trainable encoder; the coarse cue goes
//! through a frozen copy of the stage-1 encoder followed by its own
//! normalization and bottleneck. The chunked cue representation multiplies
//! the running representation at the entry of the conditioned dual-path
//! blocks, and a single PReLU mask is decoded to the target waveform.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_records, records, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::loss::neg_si_snr;
use crate::metrics::si_snr;
use crate::mixsim::Example;
use crate::nn::chunk::ChunkLayout;
use crate::nn::conv::{Decoder, Encoder, EncoderCache, FeatureMap};
use crate::nn::layers::{GlobalLayerNorm, Linear, NormCache};
use crate::nn::params::ParamStore;
use crate::separator::{MaskNet, MaskNetCache, Separator, SeparatorConfig};
use crate::train::{fit, EpochRecord, Objective, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionedConfig {
    pub separator: SeparatorConfig,
    /// 1-indexed blocks whose input is multiplied by the cue representation.
    pub conditioning_blocks: Vec<usize>,
    /// Start from the stage-1 weights (see [`Extractor::warm_start`]).
    pub init_from_stage1: bool,
}

impl Default for ConditionedConfig {
    fn default() -> Self {
        ConditionedConfig {
            separator: SeparatorConfig {
                num_outputs: 1,
                ..SeparatorConfig::default()
            },
            conditioning_blocks: vec![1, 3, 5],
            init_from_stage1: false,
        }
    }
}

impl ConditionedConfig {
    /// Odd 1-indexed blocks of a stack of `num_blocks`.
    pub fn odd_blocks(num_blocks: usize) -> Vec<usize> {
        (1..=num_blocks).step_by(2).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.separator.validate()?;
        if self.separator.num_outputs != 1 {
            return Err(Error::Config(format!(
                "the extractor has one output, num_outputs is {}",
                self.separator.num_outputs
            )));
        }
        let n = self.separator.num_blocks;
        if let Some(b) = self.conditioning_blocks.iter().find(|&&b| b == 0 || b > n) {
            return Err(Error::Config(format!(
                "conditioning block {b} outside 1..={n}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    extractor: ConditionedConfig,
    cue_encoder_window: usize,
    cue_encoder_stride: usize,
    cue_feature_dim: usize,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    cfg: ConditionedConfig,
    params: ParamStore,
    encoder: Encoder,
    cue_norm: GlobalLayerNorm,
    cue_bottleneck: Linear,
    masknet: MaskNet,
    decoder: Decoder,
    /// Frozen stage-1 encoder weights; never touched by training.
    frozen: ParamStore,
    cue_encoder: Encoder,
    linked_stage1_digest: Option<String>,
}

pub struct ExtractorCache {
    features: FeatureMap,
    encoder: EncoderCache,
    cue_norm: NormCache,
    cue_normed: Array2<f64>,
    cond: Array2<f64>,
    layout: ChunkLayout,
    masknet: MaskNetCache,
    mask: Array2<f64>,
}

/// Zero-pads or truncates `f` to `frames` rows.
fn align_frames(f: ArrayView2<f64>, frames: usize) -> Array2<f64> {
    let mut out = Array2::zeros((frames, f.ncols()));
    let n = frames.min(f.nrows());
    out.slice_mut(s![..n, ..]).assign(&f.slice(s![..n, ..]));
    out
}

impl Extractor {
    /// A fresh extractor whose cue encoder is a frozen copy of `stage1`'s.
    pub fn new(stage1: &Separator, cfg: ConditionedConfig, seed: u64) -> Result<Self> {
        let sc = stage1.config();
        let warm = cfg.init_from_stage1;
        let mut model = Self::build(cfg, sc.encoder_window, sc.encoder_stride, sc.feature_dim, seed)?;
        model.frozen.data_mut().copy_from_slice(&stage1.encoder_weights());
        if warm {
            model.warm_start(stage1);
        }
        Ok(model)
    }

    /// Copies every stage-1 tensor of matching name and shape, the cue
    /// channel of the mask head, and makes the cue projection output all
    /// ones. The extractor then starts out computing stage 1's cue channel
    /// and learns to use the conditioning from there. Returns the number of
    /// tensors taken from stage 1.
    pub fn warm_start(&mut self, stage1: &Separator) -> usize {
        let mut copied = 0;
        let src = stage1.params();
        let infos = self.params.infos().to_vec();
        let data = self.params.data_mut();
        for info in &infos {
            let Some(from) = src.infos().iter().find(|i| i.name == info.name) else {
                continue;
            };
            let values = from.slot.of(src.data());
            let dst = info.slot.of_mut(data);
            if from.shape == info.shape {
                dst.copy_from_slice(values);
            } else if info.name.starts_with("masknet.head.") && from.shape[1..] == info.shape[1..] {
                // output 0 occupies the leading rows
                dst.copy_from_slice(&values[..dst.len()]);
            } else {
                continue;
            }
            copied += 1;
        }
        let w = self.cue_bottleneck.weight.of_mut(data);
        w.fill(0.0);
        if let Some(b) = self.cue_bottleneck.bias {
            b.of_mut(data).fill(1.0);
        }
        copied
    }

    fn build(cfg: ConditionedConfig, cue_window: usize, cue_stride: usize, cue_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sc = &cfg.separator;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "encoder", sc.encoder_window, sc.encoder_stride, sc.feature_dim, &mut rng);
        let cue_norm = GlobalLayerNorm::new(&mut params, "cue.norm", cue_dim, &mut rng);
        let cue_bottleneck = Linear::new(&mut params, "cue.bottleneck", cue_dim, sc.bottleneck_dim, true, &mut rng);
        let conditioned = cfg.conditioning_blocks.iter().map(|b| b - 1).collect();
        let masknet = MaskNet::new(&mut params, "masknet", sc, conditioned, &mut rng);
        let decoder = Decoder::new(&mut params, "decoder", sc.encoder_window, sc.encoder_stride, sc.feature_dim, &mut rng);
        let mut frozen = ParamStore::new();
        let cue_encoder = Encoder::new(&mut frozen, "cue_encoder", cue_window, cue_stride, cue_dim, &mut rng);
        Ok(Extractor {
            cfg,
            params,
            encoder,
            cue_norm,
            cue_bottleneck,
            masknet,
            decoder,
            frozen,
            cue_encoder,
            linked_stage1_digest: None,
        })
    }

    pub fn config(&self) -> &ConditionedConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cue_encoder_weights(&self) -> &[f64] {
        self.frozen.data()
    }

    pub fn mixture_encoder_weights(&self) -> &[f64] {
        self.encoder.weight.of(self.params.data())
    }

    pub fn linked_stage1_digest(&self) -> Option<&str> {
        self.linked_stage1_digest.as_deref()
    }

    pub fn set_linked_stage1_digest(&mut self, digest: String) {
        self.linked_stage1_digest = Some(digest);
    }

    /// Cue features from the frozen stage-1 encoder.
    pub fn encode_cue(&self, cue: &[f64]) -> Result<FeatureMap> {
        if cue.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.cue_encoder.encode(self.frozen.data(), cue)
    }

    /// `ô = G(x, ĉ)`, same length as `x`.
    pub fn extract(&self, x: &[f64], cue: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_train(x, cue)?.0)
    }

    pub fn forward_train(&self, x: &[f64], cue: &[f64]) -> Result<(Vec<f64>, ExtractorCache)> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        let p = self.params.data();
        let (features, encoder) = self.encoder.forward(p, x)?;
        let frames = features.frames();
        let cue_feats = align_frames(self.encode_cue(cue)?.values.view(), frames);
        let (cue_normed, cue_norm) = self.cue_norm.forward(p, cue_feats.view());
        let cue_b = self.cue_bottleneck.forward(p, cue_normed.view());
        let layout = self.masknet.layout(frames)?;
        let cond = layout.split(cue_b.view());
        let (mut masks, masknet) = self.masknet.forward(p, features.values.view(), Some(cond.view()))?;
        let mask = masks.pop().expect("one output");
        let out = self.decoder.forward(p, &(&mask * &features.values), x.len());
        Ok((
            out,
            ExtractorCache {
                features,
                encoder,
                cue_norm,
                cue_normed,
                cond,
                layout,
                masknet,
                mask,
            },
        ))
    }

    /// Accumulates `dL/dθ` for the trainable parameters into `grads`.
    pub fn backward(&self, cache: &ExtractorCache, dy: &[f64], grads: &mut [f64]) {
        let p = self.params.data();
        let feats = &cache.features.values;
        let masked = &cache.mask * feats;
        let dmasked = self.decoder.backward(p, grads, &masked, dy);
        let mut dfeats = &dmasked * &cache.mask;
        let dmask = dmasked * feats;
        let (dthrough, dcond) = self.masknet.backward(p, grads, &cache.masknet, &[dmask], Some(cache.cond.view()));
        dfeats += &dthrough;
        self.encoder.backward(grads, &cache.features, &cache.encoder, &dfeats);
        let dcue_b = cache.layout.split_adjoint(dcond.view());
        let dnormed = self.cue_bottleneck.backward(p, grads, cache.cue_normed.view(), dcue_b.view());
        self.cue_norm.backward(p, grads, &cache.cue_norm, dnormed.view());
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let stored = StoredConfig {
            extractor: self.cfg.clone(),
            cue_encoder_window: self.cue_encoder.window,
            cue_encoder_stride: self.cue_encoder.stride,
            cue_feature_dim: self.cue_encoder.dim,
        };
        let mut ck = Checkpoint::new(
            ModelKind::Stage2Extractor,
            serde_json::to_value(stored).expect("config serializes"),
            &self.params,
        );
        ck.frozen = records(&self.frozen);
        ck.linked_stage1_digest = self.linked_stage1_digest.clone();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Stage2Extractor)?;
        let stored: StoredConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad extractor config: {e}")))?;
        let mut model = Self::build(stored.extractor, stored.cue_encoder_window, stored.cue_encoder_stride, stored.cue_feature_dim, 0)?;
        load_records(&mut model.params, &ck.tensors)?;
        load_records(&mut model.frozen, &ck.frozen)?;
        model.linked_stage1_digest = ck.linked_stage1_digest.clone();
        Ok(model)
    }
}

/// Which signal serves as the last coarse cue of a recursion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalCue {
    /// The residual on which the classifier said STOP.
    #[default]
    TerminalResidual,
    /// The cue channel of one more pass over that residual.
    FinalPass,
}

/// A training pair for the extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuePair {
    pub mixture: Vec<f64>,
    pub cue: Vec<f64>,
    pub reference: Vec<f64>,
}

/// Coarse cues of an `n`-step recursion with a known speaker count.
pub fn coarse_cues(stage1: &Separator, x: &[f64], n: usize, final_cue: FinalCue) -> Result<Vec<Vec<f64>>> {
    let mut cues = Vec::with_capacity(n);
    let mut residual = x.to_vec();
    for j in 1..=n {
        if j == n && final_cue == FinalCue::TerminalResidual && n > 1 {
            cues.push(residual);
            break;
        }
        let mut outs = stage1.forward(&residual)?.into_iter();
        cues.push(outs.next().expect("cue channel"));
        residual = outs.next().expect("residual channel");
    }
    Ok(cues)
}

/// Greedy best-SI-SNR matching of cues (in order) to distinct references.
pub fn greedy_match(cues: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<Vec<usize>> {
    if cues.len() > refs.len() {
        return Err(Error::SizeMismatch(format!(
            "{} cues for {} references",
            cues.len(),
            refs.len()
        )));
    }
    let mut used = vec![false; refs.len()];
    let mut out = Vec::with_capacity(cues.len());
    for cue in cues {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in refs.iter().enumerate().filter(|(i, _)| !used[*i]) {
            let v = si_snr(cue, r)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (i, _) = best.expect("an unused reference remains");
        used[i] = true;
        out.push(i);
    }
    Ok(out)
}

/// One pair per speaker per mixture: the recursion runs as many iterations
/// as the mixture has speakers.
pub fn cue_pairs(stage1: &Separator, mixtures: &[Example], final_cue: FinalCue) -> Result<Vec<CuePair>> {
    let mut pairs = Vec::new();
    for ex in mixtures {
        let cues = coarse_cues(stage1, &ex.mixture, ex.num_speakers(), final_cue)?;
        let matched = greedy_match(&cues, &ex.sources)?;
        for (cue, i) in cues.into_iter().zip(matched) {
            pairs.push(CuePair {
                mixture: ex.mixture.clone(),
                cue,
                reference: ex.sources[i].clone(),
            });
        }
    }
    Ok(pairs)
}

pub struct Stage2Objective<'a> {
    pub model: &'a mut Extractor,
}

impl Objective for Stage2Objective<'_> {
    type Item = CuePair;

    fn params(&self) -> &[f64] {
        self.model.params.data()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.model.params.data_mut()
    }

    fn loss_and_grad(&self, batch: &[&CuePair], grads: &mut [f64]) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for pair in batch {
            let (out, cache) = self.model.forward_train(&pair.mixture, &pair.cue)?;
            let (l, mut g) = neg_si_snr(&out, &pair.reference)?;
            g.iter_mut().for_each(|v| *v *= scale);
            self.model.backward(&cache, &g, grads);
            total += l * scale;
        }
        Ok(total)
    }

    fn validate(&self, items: &[CuePair]) -> Result<f64> {
        let mut total = 0.0;
        for pair in items {
            total += si_snr(&self.model.extract(&pair.mixture, &pair.cue)?, &pair.reference)?;
        }
        Ok(total / items.len() as f64)
    }
}

/// Trains the extractor on cue pairs built with the frozen stage-1 model.
pub fn train_stage2(
    model: &mut Extractor,
    train: Vec<CuePair>,
    valid: &[CuePair],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::TrainingData("no stage-2 training pairs".into()));
    }
    fit(&mut Stage2Objective { model }, &[train], valid, cfg, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separator::tests::tiny_config;
    use rand::Rng;

    fn tiny() -> ConditionedConfig {
        ConditionedConfig {
            separator: SeparatorConfig {
                num_outputs: 1,
                num_blocks: 3,
                ..tiny_config()
            },
            conditioning_blocks: vec![1, 3],
            init_from_stage1: false,
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn warm_start_reproduces_the_stage1_cue_channel() {
        let stage1 = Separator::new(tiny_config(), 7).unwrap();
        let cfg = ConditionedConfig {
            separator: SeparatorConfig {
                num_outputs: 1,
                ..tiny_config()
            },
            conditioning_blocks: vec![1],
            init_from_stage1: true,
        };
        let g = Extractor::new(&stage1, cfg, 3).unwrap();
        let x = noise(96, 1);
        let expected = &stage1.forward(&x).unwrap()[0];
        let got = g.extract(&x, &noise(96, 2)).unwrap();
        for (a, b) in got.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn config_rules() {
        assert!(ConditionedConfig::default().validate().is_ok());
        assert_eq!(ConditionedConfig::odd_blocks(6), vec![1, 3, 5]);
        let bad = ConditionedConfig {
            conditioning_blocks: vec![0],
            ..tiny()
        };
        assert!(bad.validate().is_err());
        let bad = ConditionedConfig {
            conditioning_blocks: vec![4],
            ..tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cue_encoder_is_the_frozen_stage1_encoder() {
        let stage1 = Separator::new(tiny_config(), 3).unwrap();
        let g = Extractor::new(&stage1, tiny(), 4).unwrap();
        let cue = noise(50, 1);
        assert_eq!(g.encode_cue(&cue).unwrap().values, stage1.encode(&cue).unwrap().values);
        assert!(g.encode_cue(&[0.0; 50]).unwrap().values.iter().all(|&v| v == 0.0));
        assert_ne!(g.mixture_encoder_weights(), g.cue_encoder_weights());
    }

    #[test]
    fn output_length_and_finiteness_with_mismatched_cue_lengths() {
        let stage1 = Separator::new(tiny_config(), 3).unwrap();
        let g = Extractor::new(&stage1, tiny(), 4).unwrap();
        let x = noise(61, 2);
        for cue_len in [2usize, 30, 61, 90] {
            let y = g.extract(&x, &noise(cue_len, 5)).unwrap();
            assert_eq!(y.len(), 61);
            assert!(y.iter().all(|v| v.is_finite()));
        }
        assert!(g.extract(&x, &[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let stage1 = Separator::new(tiny_config(), 3).unwrap();
        let g = Extractor::new(&stage1, tiny(), 4).unwrap();
        let x = noise(40, 6);
        let cue = noise(40, 7);
        let target = noise(40, 8);
        let loss = |m: &Extractor| neg_si_snr(&m.extract(&x, &cue).unwrap(), &target).unwrap().0;
        let (out, cache) = g.forward_train(&x, &cue).unwrap();
        let (_, dy) = neg_si_snr(&out, &target).unwrap();
        let mut grads = g.params().zeros_like();
        g.backward(&cache, &dy, &mut grads);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for info in g.params().infos() {
            for _ in 0..3 {
                let i = info.slot.offset + rng.random_range(0..info.slot.len);
                let h = 1e-5;
                let mut plus = g.clone();
                plus.params_mut().data_mut()[i] += h;
                let mut minus = g.clone();
                minus.params_mut().data_mut()[i] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(1e-3);
                worst = worst.max(err);
                assert!(err < 1e-3, "{}: numeric {numeric} analytic {}", info.name, grads[i]);
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn training_leaves_stage1_untouched_and_round_trips() {
        let stage1 = Separator::new(tiny_config(), 3).unwrap();
        let before = stage1.params().data().to_vec();
        let mut g = Extractor::new(&stage1, tiny(), 4).unwrap();
        let frozen_before = g.cue_encoder_weights().to_vec();
        let pairs: Vec<CuePair> = (0..4)
            .map(|k| CuePair {
                mixture: noise(48, k),
                cue: noise(48, k + 10),
                reference: noise(48, k + 20),
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 2,
            ..Default::default()
        };
        train_stage2(&mut g, pairs.clone(), &pairs, &cfg, |_| {}).unwrap();
        assert_eq!(stage1.params().data(), before.as_slice());
        assert_eq!(g.cue_encoder_weights(), frozen_before.as_slice());
        let back = Extractor::from_checkpoint(&Checkpoint::from_bytes(&g.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.extract(&pairs[0].mixture, &pairs[0].cue).unwrap(), g.extract(&pairs[0].mixture, &pairs[0].cue).unwrap());
    }

    #[test]
    fn greedy_matching_is_a_bijection() {
        let refs: Vec<Vec<f64>> = (0..3).map(|k| noise(64, 30 + k)).collect();
        let blend: Vec<f64> = refs[2].iter().zip(&refs[1]).map(|(a, b)| a + 0.5 * b).collect();
        // the blend scores best against refs[2], which is already taken
        let cues = vec![refs[2].clone(), blend, refs[0].clone()];
        assert_eq!(greedy_match(&cues, &refs).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn pairs_per_mixture_equal_speaker_count() {
        let stage1 = Separator::new(tiny_config(), 3).unwrap();
        let sources: Vec<Vec<f64>> = (0..3).map(|k| noise(40, 40 + k)).collect();
        let ex = Example {
            mixture: (0..40).map(|t| sources.iter().map(|s| s[t]).sum()).collect(),
            sources,
            speaker_ids: vec!["a".into(), "b".into(), "c".into()],
        };
        for mode in [FinalCue::TerminalResidual, FinalCue::FinalPass] {
            let pairs = cue_pairs(&stage1, std::slice::from_ref(&ex), mode).unwrap();
            assert_eq!(pairs.len(), 3);
            let mut refs: Vec<&Vec<f64>> = pairs.iter().map(|p| &p.reference).collect();
            refs.dedup();
            assert_eq!(refs.len(), 3);
        }
        let cues = coarse_cues(&stage1, &ex.mixture, 3, FinalCue::TerminalResidual).unwrap();
        let r2 = stage1.forward(&stage1.forward(&ex.mixture).unwrap()[1]).unwrap()[1].clone();
        assert_eq!(cues[2], r2);
    }
}
