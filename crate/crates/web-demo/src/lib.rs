//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations run client-side: simulating a toy mixture, scoring a
//! distorted estimate with SI-SNR, and showing how an utterance is cut into
//! training segments. The plain-Rust functions hold the logic; the
//! `#[wasm_bindgen]` wrappers only convert types and errors.

use corfsep::audio::{Waveform, SAMPLE_RATE};
use corfsep::metrics::si_snr;
use corfsep::mixsim::{mix, Segmentation};
use corfsep::toy::Voice;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// A simulated mixture and its scaled references.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct DemoMixture {
    mixture: Vec<f64>,
    sources: Vec<Vec<f64>>,
    gains_db: Vec<f64>,
}

/// Renders `speakers` random toy voices of `seconds` each and mixes them
/// with relative gains drawn from `[0, max_gain_db]`.
pub fn simulate(seed: u64, speakers: usize, seconds: f64, max_gain_db: f64) -> corfsep::Result<DemoMixture> {
    if !(seconds > 0.0 && seconds <= 30.0) {
        return Err(corfsep::Error::Config(format!("duration must be in (0, 30] s, got {seconds}")));
    }
    let len = (seconds * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = (0..speakers)
        .map(|_| {
            let voice = Voice::random(&mut rng);
            Waveform::at_8k(voice.utterance(len, &mut rng))
        })
        .collect::<corfsep::Result<Vec<_>>>()?;
    let ex = mix(&sources, (0.0, max_gain_db.max(0.0)), seed)?;
    Ok(DemoMixture {
        mixture: ex.mixture.samples().to_vec(),
        sources: ex.sources.iter().map(|s| s.samples().to_vec()).collect(),
        gains_db: ex.gains_db,
    })
}

impl DemoMixture {
    /// `scale · (s_target + 10^(−leak_db/20) · Σ_{other} s)`.
    pub fn distorted(&self, target: usize, scale: f64, leak_db: f64) -> corfsep::Result<Vec<f64>> {
        let s = self
            .sources
            .get(target)
            .ok_or_else(|| corfsep::Error::Config(format!("no source {target}")))?;
        let leak = 10f64.powf(-leak_db / 20.0);
        Ok((0..s.len())
            .map(|t| {
                let rest = self.mixture[t] - s[t];
                scale * (s[t] + leak * rest)
            })
            .collect())
    }
}

#[wasm_bindgen]
impl DemoMixture {
    pub fn mixture(&self) -> Vec<f64> {
        self.mixture.clone()
    }

    pub fn source(&self, index: usize) -> Vec<f64> {
        self.sources.get(index).cloned().unwrap_or_default()
    }

    #[wasm_bindgen(js_name = numSources)]
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    #[wasm_bindgen(js_name = gainsDb)]
    pub fn gains_db(&self) -> Vec<f64> {
        self.gains_db.clone()
    }

    #[wasm_bindgen(js_name = sampleRate)]
    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// SI-SNR (dB) of a scaled estimate with leakage from the other
    /// speakers, against source `target`.
    #[wasm_bindgen(js_name = scoreDistorted)]
    pub fn score_distorted(&self, target: usize, scale: f64, leak_db: f64) -> Result<f64, JsError> {
        let est = self.distorted(target, scale, leak_db).map_err(js)?;
        si_snr(&est, &self.sources[target]).map_err(js)
    }

    #[wasm_bindgen(js_name = distortedEstimate)]
    pub fn distorted_estimate(&self, target: usize, scale: f64, leak_db: f64) -> Result<Vec<f64>, JsError> {
        self.distorted(target, scale, leak_db).map_err(js)
    }
}

fn js(e: corfsep::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = simulateMixture)]
pub fn simulate_mixture(seed: u32, speakers: usize, seconds: f64, max_gain_db: f64) -> Result<DemoMixture, JsError> {
    simulate(seed.into(), speakers, seconds, max_gain_db).map_err(js)
}

#[wasm_bindgen(js_name = siSnrDb)]
pub fn si_snr_db(estimate: &[f64], reference: &[f64]) -> Result<f64, JsError> {
    si_snr(estimate, reference).map_err(js)
}

/// Flat `[start0, end0, start1, end1, …]` window bounds in samples.
pub fn segments(len: usize, seg_len: usize, hop: usize, min_len: usize) -> corfsep::Result<Vec<u32>> {
    let seg = Segmentation { seg_len, hop, min_len };
    Ok(corfsep::mixsim::segment_bounds(len, &seg)?
        .into_iter()
        .flat_map(|(a, b)| [a as u32, b as u32])
        .collect())
}

#[wasm_bindgen(js_name = segmentBounds)]
pub fn segment_bounds(len: usize, seg_len: usize, hop: usize, min_len: usize) -> Result<Vec<u32>, JsError> {
    segments(len, seg_len, hop, min_len).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_is_seeded_and_sums_to_the_mixture() {
        let a = simulate(4, 3, 0.5, 5.0).unwrap();
        let b = simulate(4, 3, 0.5, 5.0).unwrap();
        assert_eq!(a.mixture, b.mixture);
        assert_eq!(a.num_sources(), 3);
        assert_eq!(a.mixture.len(), 4000);
        for t in 0..a.mixture.len() {
            let sum: f64 = a.sources.iter().map(|s| s[t]).sum();
            assert!((sum - a.mixture[t]).abs() < 1e-12);
        }
        assert!(simulate(4, 2, 0.0, 5.0).is_err());
        assert!(simulate(4, 0, 1.0, 5.0).is_err());
    }

    #[test]
    fn distortion_score_ignores_scale_and_drops_with_leakage() {
        let m = simulate(1, 2, 0.5, 0.0).unwrap();
        let at = |scale, leak| si_snr(&m.distorted(0, scale, leak).unwrap(), &m.sources[0]).unwrap();
        assert!((at(1.0, 20.0) - at(0.3, 20.0)).abs() < 1e-6);
        assert!(at(1.0, 30.0) > at(1.0, 10.0));
        assert!(m.distorted(5, 1.0, 0.0).is_err());
    }

    #[test]
    fn segment_bounds_follow_the_window_rules() {
        assert_eq!(segments(48000, 32000, 16000, 16000).unwrap(), vec![0, 32000, 16000, 48000]);
        assert_eq!(segments(24000, 32000, 16000, 16000).unwrap(), vec![0, 24000]);
        assert!(segments(12000, 32000, 16000, 16000).unwrap().is_empty());
        assert!(segments(100, 0, 1, 0).is_err());
    }
}
