//! Encoder → masking network → decoder separator shared by both stages.
//!
//! The masking network normalizes the encoded features, projects them to
//! the bottleneck width, chunks them, runs the dual-path stack, merges the
//! chunks and produces one PReLU-activated mask per output. Masks multiply
//! the encoded mixture and every masked feature map is decoded separately.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::checkpoint::{load_records, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::chunk::ChunkLayout;
use crate::nn::conv::{Decoder, Encoder, EncoderCache, FeatureMap};
use crate::nn::dual_path::{DualPathStack, StackCache};
use crate::nn::layers::{GlobalLayerNorm, Linear, NormCache, PRelu};
use crate::nn::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorConfig {
    pub encoder_window: usize,
    pub encoder_stride: usize,
    pub feature_dim: usize,
    /// Width of the dual-path stack.
    pub bottleneck_dim: usize,
    pub chunk_size: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_outputs: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig {
            encoder_window: 2,
            encoder_stride: 1,
            feature_dim: 64,
            bottleneck_dim: 64,
            chunk_size: 250,
            num_blocks: 6,
            hidden_dim: 128,
            num_outputs: 2,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.encoder_window;
        if w == 0 {
            return Err(Error::Config("encoder_window must be positive".into()));
        }
        let expected_stride = if w.is_multiple_of(2) { w / 2 } else { w };
        if self.encoder_stride != expected_stride {
            return Err(Error::Config(format!(
                "encoder_stride must be {expected_stride} for window {w}, got {}",
                self.encoder_stride
            )));
        }
        if self.chunk_size < 2 || !self.chunk_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "chunk_size must be even and at least 2, got {}",
                self.chunk_size
            )));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("num_outputs", self.num_outputs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Window/stride with the stride derived from the window.
    pub fn with_window(mut self, window: usize) -> Self {
        self.encoder_window = window;
        self.encoder_stride = if window.is_multiple_of(2) { window / 2 } else { window };
        self
    }
}

/// Normalization, bottleneck, dual-path stack and mask head.
#[derive(Clone, Debug)]
pub struct MaskNet {
    norm: GlobalLayerNorm,
    bottleneck: Linear,
    pub stack: DualPathStack,
    head: Linear,
    activations: Vec<PRelu>,
    chunk_size: usize,
    feature_dim: usize,
}

pub struct MaskNetCache {
    norm: NormCache,
    normed: Array2<f64>,
    pub layout: ChunkLayout,
    stack: StackCache,
    merged: Array2<f64>,
    head_out: Array2<f64>,
}

impl MaskNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SeparatorConfig, conditioned: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let norm = GlobalLayerNorm::new(store, &format!("{name}.norm"), cfg.feature_dim, rng);
        let bottleneck = Linear::new(store, &format!("{name}.bottleneck"), cfg.feature_dim, cfg.bottleneck_dim, true, rng);
        let stack = DualPathStack::new(store, &format!("{name}.blocks"), cfg.num_blocks, cfg.bottleneck_dim, cfg.hidden_dim, conditioned, rng);
        let head = Linear::new(store, &format!("{name}.head"), cfg.bottleneck_dim, cfg.num_outputs * cfg.feature_dim, true, rng);
        let activations = (0..cfg.num_outputs)
            .map(|o| PRelu::new(store, &format!("{name}.mask_act.{o}"), rng))
            .collect();
        MaskNet {
            norm,
            bottleneck,
            stack,
            head,
            activations,
            chunk_size: cfg.chunk_size,
            feature_dim: cfg.feature_dim,
        }
    }

    pub fn layout(&self, frames: usize) -> Result<ChunkLayout> {
        ChunkLayout::new(frames, self.chunk_size)
    }

    /// One `frames × feature_dim` mask per output. `cond` must be in the
    /// chunked layout of `feats`.
    pub fn forward(&self, p: &[f64], feats: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<(Vec<Array2<f64>>, MaskNetCache)> {
        let layout = self.layout(feats.nrows())?;
        let (normed_raw, norm) = self.norm.forward(p, feats);
        let bottled = self.bottleneck.forward(p, normed_raw.view());
        let chunks = layout.split(bottled.view());
        let (out, stack) = self.stack.forward(p, chunks, cond, &layout);
        let merged = layout.merge(out.view());
        let head_out = self.head.forward(p, merged.view());
        let n = self.feature_dim;
        let masks = self
            .activations
            .iter()
            .enumerate()
            .map(|(o, act)| act.forward(p, head_out.slice(s![.., o * n..(o + 1) * n])))
            .collect();
        Ok((
            masks,
            MaskNetCache {
                norm,
                normed: normed_raw,
                layout,
                stack,
                merged,
                head_out,
            },
        ))
    }

    /// Returns `(dL/dfeats, dL/dcond)`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &MaskNetCache, dmasks: &[Array2<f64>], cond: Option<ArrayView2<f64>>) -> (Array2<f64>, Array2<f64>) {
        let n = self.feature_dim;
        let mut dhead = Array2::zeros(cache.head_out.raw_dim());
        for (o, (act, dm)) in self.activations.iter().zip(dmasks).enumerate() {
            let x = cache.head_out.slice(s![.., o * n..(o + 1) * n]);
            let dx = act.backward(p, g, x, dm.view());
            dhead.slice_mut(s![.., o * n..(o + 1) * n]).assign(&dx);
        }
        let dmerged = self.head.backward(p, g, cache.merged.view(), dhead.view());
        let dout = cache.layout.merge_adjoint(dmerged.view());
        let (dchunks, dcond) = self.stack.backward(p, g, &cache.stack, dout, cond, &cache.layout);
        let dbottled = cache.layout.split_adjoint(dchunks.view());
        let dnormed = self.bottleneck.backward(p, g, cache.normed.view(), dbottled.view());
        let dfeats = self.norm.backward(p, g, &cache.norm, dnormed.view());
        (dfeats, dcond)
    }
}

/// The stage-1 separator: one mixture in, `num_outputs` waveforms out
/// (channel 0 is the extracted cue, channel 1 the residual).
#[derive(Clone, Debug)]
pub struct Separator {
    cfg: SeparatorConfig,
    params: ParamStore,
    encoder: Encoder,
    masknet: MaskNet,
    decoder: Decoder,
}

pub struct SeparatorCache {
    features: FeatureMap,
    encoder: EncoderCache,
    masknet: MaskNetCache,
    masks: Vec<Array2<f64>>,
}

impl Separator {
    pub fn new(cfg: SeparatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "encoder", cfg.encoder_window, cfg.encoder_stride, cfg.feature_dim, &mut rng);
        let masknet = MaskNet::new(&mut params, "masknet", &cfg, Vec::new(), &mut rng);
        let decoder = Decoder::new(&mut params, "decoder", cfg.encoder_window, cfg.encoder_stride, cfg.feature_dim, &mut rng);
        Ok(Separator {
            cfg,
            params,
            encoder,
            masknet,
            decoder,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// The encoder's weights as a standalone `feature_dim × window` buffer.
    pub fn encoder_weights(&self) -> Vec<f64> {
        self.encoder.weight.of(self.params.data()).to_vec()
    }

    pub fn encode(&self, x: &[f64]) -> Result<FeatureMap> {
        self.encoder.encode(self.params.data(), x)
    }

    pub fn decode(&self, f: &FeatureMap) -> Result<Vec<f64>> {
        self.decoder.decode(self.params.data(), f)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, SeparatorCache)> {
        let p = self.params.data();
        let (features, encoder) = self.encoder.forward(p, x)?;
        let (masks, masknet) = self.masknet.forward(p, features.values.view(), None)?;
        let outputs = masks
            .iter()
            .map(|m| self.decoder.forward(p, &(m * &features.values), x.len()))
            .collect();
        Ok((
            outputs,
            SeparatorCache {
                features,
                encoder,
                masknet,
                masks,
            },
        ))
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/doutput` for every output.
    pub fn backward(&self, cache: &SeparatorCache, doutputs: &[Vec<f64>], grads: &mut [f64]) {
        let p = self.params.data();
        let feats = &cache.features.values;
        let mut dfeats = Array2::<f64>::zeros(feats.raw_dim());
        let mut dmasks = Vec::with_capacity(cache.masks.len());
        for (mask, dy) in cache.masks.iter().zip(doutputs) {
            let masked = mask * feats;
            let dmasked = self.decoder.backward(p, grads, &masked, dy);
            dfeats += &(&dmasked * mask);
            dmasks.push(dmasked * feats);
        }
        let (dthrough, _) = self.masknet.backward(p, grads, &cache.masknet, &dmasks, None);
        dfeats += &dthrough;
        self.encoder.backward(grads, &cache.features, &cache.encoder, &dfeats);
    }

    /// One recursion step: `(cue, residual) = F(x)`.
    pub fn separate2(&self, x: &Waveform) -> Result<(Waveform, Waveform)> {
        if self.cfg.num_outputs != 2 {
            return Err(Error::Config(format!(
                "separate2 needs a two-output model, this one has {}",
                self.cfg.num_outputs
            )));
        }
        let mut outs = self.forward(x.samples())?.into_iter();
        let cue = Waveform::new(outs.next().expect("two outputs"), x.rate())?;
        let residual = Waveform::new(outs.next().expect("two outputs"), x.rate())?;
        Ok((cue, residual))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            ModelKind::Stage1Separator,
            serde_json::to_value(&self.cfg).expect("config serializes"),
            &self.params,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Stage1Separator)?;
        let cfg: SeparatorConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad separator config: {e}")))?;
        let mut model = Separator::new(cfg, 0)?;
        load_records(&mut model.params, &ckpt.tensors)?;
        Ok(model)
    }
}
