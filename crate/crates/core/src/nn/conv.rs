//! Learned strided filterbank encoder and its overlap-add decoder.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::layers::{view2, view2_mut};
use super::params::{Init, ParamStore, Slot};
use crate::error::{Error, Result};

/// Encoded features with the framing needed to invert them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `frames × feature_dim`.
    pub values: Array2<f64>,
    pub window: usize,
    pub stride: usize,
    /// Length of the waveform the frames were cut from.
    pub source_len: usize,
}

impl FeatureMap {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

pub fn frame_count(len: usize, window: usize, stride: usize) -> Result<usize> {
    if len < window {
        return Err(Error::TooShort { len, window });
    }
    Ok((len - window) / stride + 1)
}

/// `frames × window` matrix of strided slices of `x`.
pub fn frame_signal(x: &[f64], window: usize, stride: usize) -> Result<Array2<f64>> {
    let frames = frame_count(x.len(), window, stride)?;
    Ok(Array2::from_shape_fn((frames, window), |(t, w)| x[t * stride + w]))
}

/// Adds frame rows back into a signal of length `len`.
pub fn overlap_add(frames: &Array2<f64>, stride: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (t, row) in frames.rows().into_iter().enumerate() {
        for (w, v) in row.iter().enumerate() {
            out[t * stride + w] += v;
        }
    }
    out
}

/// Bias-free strided linear map per frame followed by ReLU, so silence
/// encodes to exactly zero.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub weight: Slot,
    pub window: usize,
    pub stride: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    frames: Array2<f64>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, window: usize, stride: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (window as f64).sqrt();
        Encoder {
            weight: store.add(&format!("{name}.weight"), &[dim, window], Init::Uniform(bound), rng),
            window,
            stride,
            dim,
        }
    }

    pub fn encode(&self, p: &[f64], x: &[f64]) -> Result<FeatureMap> {
        Ok(self.forward(p, x)?.0)
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Result<(FeatureMap, EncoderCache)> {
        let frames = frame_signal(x, self.window, self.stride)?;
        let w = view2(self.weight.of(p), self.dim, self.window);
        let values = frames.dot(&w.t()).mapv(|v| v.max(0.0));
        Ok((
            FeatureMap {
                values,
                window: self.window,
                stride: self.stride,
                source_len: x.len(),
            },
            EncoderCache { frames },
        ))
    }

    /// Weight gradient only; the waveform input never needs a gradient.
    pub fn backward(&self, g: &mut [f64], out: &FeatureMap, cache: &EncoderCache, dout: &Array2<f64>) {
        let mut dpre = dout.clone();
        ndarray::Zip::from(&mut dpre)
            .and(&out.values)
            .for_each(|d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            });
        let mut gw = view2_mut(self.weight.of_mut(g), self.dim, self.window);
        general_mat_mul(1.0, &dpre.t(), &cache.frames, 1.0, &mut gw);
    }
}

/// Transposed strided linear map with overlap-add.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub weight: Slot,
    pub window: usize,
    pub stride: usize,
    pub dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, window: usize, stride: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Decoder {
            weight: store.add(&format!("{name}.weight"), &[dim, window], Init::Uniform(bound), rng),
            window,
            stride,
            dim,
        }
    }

    pub fn decode(&self, p: &[f64], f: &FeatureMap) -> Result<Vec<f64>> {
        if f.window != self.window || f.stride != self.stride || f.dim() != self.dim {
            return Err(Error::SizeMismatch(format!(
                "feature map geometry (window {}, stride {}, dim {}) vs decoder (window {}, stride {}, dim {})",
                f.window,
                f.stride,
                f.dim(),
                self.window,
                self.stride,
                self.dim
            )));
        }
        if frame_count(f.source_len, f.window, f.stride)? != f.frames() {
            return Err(Error::SizeMismatch(format!(
                "{} frames cannot come from a {}-sample signal",
                f.frames(),
                f.source_len
            )));
        }
        Ok(self.forward(p, &f.values, f.source_len))
    }

    pub fn forward(&self, p: &[f64], feats: &Array2<f64>, len: usize) -> Vec<f64> {
        let w = view2(self.weight.of(p), self.dim, self.window);
        overlap_add(&feats.dot(&w), self.stride, len)
    }

    /// Accumulates the weight gradient and returns `dL/dfeats`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], feats: &Array2<f64>, dy: &[f64]) -> Array2<f64> {
        let dframes = Array2::from_shape_fn((feats.nrows(), self.window), |(t, w)| dy[t * self.stride + w]);
        {
            let mut gw = view2_mut(self.weight.of_mut(g), self.dim, self.window);
            general_mat_mul(1.0, &feats.t(), &dframes, 1.0, &mut gw);
        }
        let w = view2(self.weight.of(p), self.dim, self.window);
        dframes.dot(&w.t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(window: usize, stride: usize, dim: usize) -> (ParamStore, Encoder, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", window, stride, dim, &mut rng);
        let dec = Decoder::new(&mut store, "dec", window, stride, dim, &mut rng);
        (store, enc, dec)
    }

    #[test]
    fn frame_arithmetic() {
        assert_eq!(frame_count(32000, 2, 1).unwrap(), 31999);
        assert_eq!(frame_count(33, 16, 8).unwrap(), 3);
        assert!(matches!(frame_count(1, 2, 1), Err(Error::TooShort { .. })));
    }

    #[test]
    fn silence_encodes_to_zero_and_decodes_to_zero() {
        let (store, enc, dec) = setup(2, 1, 8);
        let f = enc.encode(store.data(), &[0.0; 100]).unwrap();
        assert_eq!(f.frames(), 99);
        assert!(f.values.iter().all(|&v| v == 0.0));
        let y = dec.decode(store.data(), &f).unwrap();
        assert_eq!(y.len(), 100);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_output_is_nonnegative_and_lengths_round_trip() {
        let (store, enc, dec) = setup(16, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for len in [16usize, 17, 100, 257] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = enc.encode(store.data(), &x).unwrap();
            assert!(f.values.iter().all(|&v| v >= 0.0));
            assert_eq!(dec.decode(store.data(), &f).unwrap().len(), len);
        }
    }

    #[test]
    fn decode_rejects_bad_geometry() {
        let (store, enc, _) = setup(4, 2, 6);
        let (_, _, other) = setup(8, 4, 6);
        let f = enc.encode(store.data(), &[0.1; 40]).unwrap();
        assert!(other.decode(store.data(), &f).is_err());
    }
}
