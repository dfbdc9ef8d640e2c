//! Synthetic speaker corpus for smoke tests and desk-scale experiments.
//!
//! Every speaker is a source-filter voice: a harmonic glottal source at a
//! speaker-specific pitch shaped by vowel formants scaled by a
//! speaker-specific vocal-tract factor, cut into syllables with silent gaps.
//! The result is not speech, but it has the properties separation relies on
//! (per-speaker pitch and timbre, sparse overlap in time and frequency) and
//! it can be written in the speaker-per-directory layout that
//! [`crate::mixsim::ingest_corpus`] reads.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// F1, F2, F3 in Hz for a handful of vowels.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];
const FORMANT_BANDWIDTH: [f64; 3] = [90.0, 110.0, 170.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    /// Median pitch in Hz.
    pub f0: f64,
    /// Multiplier applied to every formant frequency.
    pub formant_scale: f64,
    /// Spectral tilt in dB per octave above the fundamental.
    pub tilt_db: f64,
    pub vibrato_hz: f64,
    /// Breath noise level relative to the harmonic part.
    pub breath: f64,
}

impl Voice {
    pub fn random(rng: &mut impl Rng) -> Self {
        Voice {
            f0: 90.0 * (300.0f64 / 90.0).powf(rng.random::<f64>()),
            formant_scale: rng.random_range(0.85..1.2),
            tilt_db: rng.random_range(-9.0..-4.0),
            vibrato_hz: rng.random_range(4.0..7.0),
            breath: rng.random_range(0.01..0.04),
        }
    }

    fn envelope(&self, freq: f64, vowel: &[f64; 3]) -> f64 {
        let formants: f64 = vowel
            .iter()
            .zip(FORMANT_BANDWIDTH)
            .map(|(&f, bw)| {
                let d = (freq - f * self.formant_scale) / bw;
                1.0 / (1.0 + d * d)
            })
            .sum();
        let octaves = (freq / self.f0).log2().max(0.0);
        (0.15 + formants) * 10f64.powf(self.tilt_db * octaves / 20.0)
    }

    /// Renders `len` samples of this voice. Syllables last 80–250 ms and are
    /// separated by gaps of up to 120 ms.
    pub fn utterance(&self, len: usize, rng: &mut impl Rng) -> Vec<f64> {
        let rate = SAMPLE_RATE as f64;
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = vec![0.0; len];
        let mut t = (rng.random_range(0.0..0.06) * rate) as usize;
        let mut phase = 0.0;
        while t < len {
            let dur = ((rng.random_range(0.08..0.25) * rate) as usize).min(len - t);
            let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
            let glide = rng.random_range(-0.12..0.12);
            let start_pitch = self.f0 * rng.random_range(0.92..1.08);
            let loud = rng.random_range(0.6..1.0);
            for k in 0..dur {
                let u = k as f64 / dur.max(1) as f64;
                let vib = 1.0 + 0.015 * (2.0 * PI * self.vibrato_hz * (t + k) as f64 / rate).sin();
                let f0 = start_pitch * (1.0 + glide * u) * vib;
                phase += 2.0 * PI * f0 / rate;
                let mut v = 0.0;
                let mut h = 1.0;
                while h * f0 < 0.47 * rate {
                    v += self.envelope(h * f0, &vowel) * (h * phase).sin();
                    h += 1.0;
                }
                let win = (PI * u).sin().powf(0.6);
                out[t + k] = loud * win * (v + self.breath * 4.0 * noise.sample(rng));
            }
            phase %= 2.0 * PI;
            t += dur + (rng.random_range(0.0..0.12) * rate) as usize;
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            out.iter_mut().for_each(|v| *v *= 0.5 / peak);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Utterance length range in samples.
    pub min_len: usize,
    pub max_len: usize,
    /// Speaker directories are named `{prefix}{index:03}`.
    pub prefix: String,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            num_speakers: 8,
            utterances_per_speaker: 4,
            min_len: 2 * SAMPLE_RATE as usize,
            max_len: 6 * SAMPLE_RATE as usize,
            prefix: "spk".into(),
            seed: 0,
        }
    }
}

/// Writes a synthetic corpus in speaker-per-directory layout and returns the
/// voices used, in speaker order.
pub fn write_toy_corpus(root: impl AsRef<Path>, spec: &ToyCorpusSpec) -> Result<Vec<Voice>> {
    let root = root.as_ref();
    if spec.num_speakers == 0 || spec.utterances_per_speaker == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!("invalid toy corpus spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut voices = Vec::with_capacity(spec.num_speakers);
    for s in 0..spec.num_speakers {
        let voice = Voice::random(&mut rng);
        let dir = root.join(format!("{}{s:03}", spec.prefix));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for u in 0..spec.utterances_per_speaker {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let samples = voice.utterance(len, &mut rng);
            write_wav(dir.join(format!("utt{u:03}.wav")), &Waveform::at_8k(samples)?)?;
        }
        voices.push(voice);
    }
    Ok(voices)
}
