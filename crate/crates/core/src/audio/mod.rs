//! Audio persistence: mono 16-bit PCM WAV files and line-delimited dataset manifests.

mod manifest;

pub use manifest::{load_manifest, save_manifest, ManifestEntry};

use std::path::Path;

use crate::error::{Error, Result};

/// Sampling rate of every waveform that enters separation.
pub const SAMPLE_RATE: u32 = 8000;

/// A sampled mono signal. Samples are nominally in `[-1, 1]` and always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::SampleRate {
                expected: SAMPLE_RATE,
                actual: 0,
            });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Waveform { samples, rate })
    }

    /// Waveform at the separation rate.
    pub fn at_8k(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn zeros(len: usize, rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    pub fn ensure_rate(&self, expected: u32) -> Result<()> {
        if self.rate != expected {
            return Err(Error::SampleRate {
                expected,
                actual: self.rate,
            });
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

const PCM16_SCALE: f64 = 32768.0;

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::Unsupported | hound::Error::FormatError(_) => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: e.to_string(),
        },
        other => wav_err(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::ChannelCount {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || !matches!(spec.bits_per_sample, 16 | 24 | 32)
    {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
    let samples = reader
        .samples::<i32>()
        .map(|s| s.map(|v| v as f64 / scale))
        .collect::<Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Samples are clipped to `[-1, 1)` before quantization.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample(quantize16(s)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn quantize16(s: f64) -> i16 {
    (s * PCM16_SCALE).round().clamp(-PCM16_SCALE, PCM16_SCALE - 1.0) as i16
}
