//! Corpus-agnostic simulation of N-speaker mixtures.
//!
//! A corpus is a directory with one subdirectory per speaker holding that
//! speaker's WAV utterances. Sources are cut into fixed-length windows,
//! scaled to random SNRs relative to the first speaker and summed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, save_manifest, write_wav, ManifestEntry, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusIndex {
    pub split: Split,
    /// Speaker id → sorted utterance paths.
    pub speakers: BTreeMap<String, Vec<PathBuf>>,
}

impl CorpusIndex {
    pub fn num_utterances(&self) -> usize {
        self.speakers.values().map(Vec::len).sum()
    }

    pub fn speaker_ids(&self) -> Vec<&str> {
        self.speakers.keys().map(String::as_str).collect()
    }

    /// Fails if any speaker appears in both indices.
    pub fn ensure_disjoint(&self, other: &CorpusIndex) -> Result<()> {
        let shared: Vec<&String> = self
            .speakers
            .keys()
            .filter(|k| other.speakers.contains_key(*k))
            .collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Corpus(format!(
                "{:?} and {:?} splits share speakers {shared:?}",
                self.split, other.split
            )))
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Indexes `root/<speaker>/*.wav`. Traversal is sorted, so the index is
/// deterministic; speakers without utterances are skipped.
pub fn ingest_corpus(root: impl AsRef<Path>, split: Split) -> Result<CorpusIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Corpus(format!("{} is not a directory", root.display())));
    }
    let mut speakers = BTreeMap::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let utts: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        if !utts.is_empty() {
            let id = dir.file_name().expect("entry has a name").to_string_lossy().into_owned();
            speakers.insert(id, utts);
        }
    }
    match speakers.len() {
        0 => Err(Error::Corpus(format!("no speakers with utterances under {}", root.display()))),
        1 => Err(Error::Corpus(format!("only one speaker under {}", root.display()))),
        _ => Ok(CorpusIndex { split, speakers }),
    }
}

/// Window geometry for cutting utterances, in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Segmentation {
    pub seg_len: usize,
    pub hop: usize,
    /// Windows (and utterances) with fewer real samples are dropped.
    pub min_len: usize,
}

impl Default for Segmentation {
    /// 4 s windows, 2 s hop, nothing shorter than 2 s at 8 kHz.
    fn default() -> Self {
        Segmentation {
            seg_len: 4 * SAMPLE_RATE as usize,
            hop: 2 * SAMPLE_RATE as usize,
            min_len: 2 * SAMPLE_RATE as usize,
        }
    }
}

impl Segmentation {
    /// Window of `seg_len` with half-length hop and minimum.
    pub fn with_len(seg_len: usize) -> Self {
        Segmentation {
            seg_len,
            hop: seg_len / 2,
            min_len: seg_len / 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.seg_len == 0 || self.hop == 0 || self.hop > self.seg_len || self.min_len > self.seg_len {
            return Err(Error::Config(format!("invalid segmentation {self:?}")));
        }
        Ok(())
    }
}

/// `(start, end)` sample ranges of the windows [`segment_utterance`] cuts
/// from `len` samples; `end − start` real samples, the rest is padding.
pub fn segment_bounds(len: usize, seg: &Segmentation) -> Result<Vec<(usize, usize)>> {
    seg.validate()?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + seg.seg_len).min(len);
        if end - start < seg.min_len {
            break;
        }
        out.push((start, end));
        if end == len {
            break;
        }
        start += seg.hop;
    }
    Ok(out)
}

/// Cuts `w` into overlapping windows.
///
/// Windows start every `hop` samples until one reaches the end of the
/// utterance; a last window shorter than `seg_len` is zero padded if it holds
/// at least `min_len` real samples and dropped otherwise. Utterances shorter
/// than `min_len` yield nothing.
pub fn segment_utterance(w: &Waveform, seg: &Segmentation) -> Result<Vec<Waveform>> {
    w.ensure_rate(SAMPLE_RATE)?;
    let x = w.samples();
    segment_bounds(x.len(), seg)?
        .into_iter()
        .map(|(start, end)| {
            let mut window = x[start..end].to_vec();
            window.resize(seg.seg_len, 0.0);
            Waveform::new(window, w.rate())
        })
        .collect()
}

/// A simulated mixture with its references; `mixture == Σ sources`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    /// SNR of source 0 over source `i` in dB (0 for source 0).
    pub gains_db: Vec<f64>,
    pub speaker_ids: Vec<String>,
    pub seed: u64,
}

impl MixtureExample {
    pub fn num_speakers(&self) -> usize {
        self.sources.len()
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Peak of any mixture after which all signals are jointly rescaled to
/// [`RESCALE_PEAK`].
pub const CLIP_PEAK: f64 = 1.0;
pub const RESCALE_PEAK: f64 = 0.9;

/// Mixes `sources` with SNRs drawn uniformly from `snr_range_db` and
/// rounded to 0.01 dB (the precision the manifest records).
pub fn mix(sources: &[Waveform], snr_range_db: (f64, f64), seed: u64) -> Result<MixtureExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = snr_range_db;
    if !(lo <= hi) {
        return Err(Error::Config(format!("empty SNR range [{lo}, {hi}]")));
    }
    let gains: Vec<f64> = (0..sources.len())
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                let g: f64 = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                (g * 100.0).round() / 100.0
            }
        })
        .collect();
    let mut ex = mix_with_gains(sources, &gains)?;
    ex.seed = seed;
    Ok(ex)
}

/// Scales source `i ≥ 1` so that `10·log10(P_0 / P_i) == gains_db[i]`.
pub fn mix_with_gains(sources: &[Waveform], gains_db: &[f64]) -> Result<MixtureExample> {
    let Some(first) = sources.first() else {
        return Err(Error::EmptyInput);
    };
    if gains_db.len() != sources.len() {
        return Err(Error::SizeMismatch(format!(
            "{} sources but {} gains",
            sources.len(),
            gains_db.len()
        )));
    }
    let len = first.len();
    for (i, s) in sources.iter().enumerate() {
        if s.len() != len {
            return Err(Error::LengthMismatch(s.len(), len));
        }
        if s.rate() != first.rate() {
            return Err(Error::SampleRate {
                expected: first.rate(),
                actual: s.rate(),
            });
        }
        if s.samples().iter().all(|&v| v == 0.0) {
            return Err(Error::SilentSource(i));
        }
    }
    let p0 = mean_power(first.samples());
    let mut scaled: Vec<Vec<f64>> = sources
        .iter()
        .zip(gains_db)
        .enumerate()
        .map(|(i, (s, g))| {
            let scale = if i == 0 {
                1.0
            } else {
                (p0 / (mean_power(s.samples()) * 10f64.powf(g / 10.0))).sqrt()
            };
            s.samples().iter().map(|v| v * scale).collect()
        })
        .collect();
    let mut mixture = vec![0.0; len];
    for s in &scaled {
        mixture.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    let peak = mixture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > CLIP_PEAK {
        let f = RESCALE_PEAK / peak;
        mixture.iter_mut().for_each(|v| *v *= f);
        scaled.iter_mut().flatten().for_each(|v| *v *= f);
    }
    let rate = first.rate();
    Ok(MixtureExample {
        mixture: Waveform::new(mixture, rate)?,
        sources: scaled
            .into_iter()
            .map(|s| Waveform::new(s, rate))
            .collect::<Result<_>>()?,
        gains_db: gains_db.to_vec(),
        speaker_ids: (0..sources.len()).map(|i| i.to_string()).collect(),
        seed: 0,
    })
}

/// Deterministic per-item seed derived from a run seed.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index.wrapping_add(0x1234_5678)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildOptions {
    pub segmentation: Segmentation,
    pub snr_range_db: (f64, f64),
    pub workers: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            segmentation: Segmentation::default(),
            snr_range_db: (0.0, 5.0),
            workers: 1,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

fn simulate_one(index: &CorpusIndex, n_speakers: usize, seed: u64, opts: &BuildOptions) -> Result<MixtureExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = index.speaker_ids();
    let chosen: Vec<&str> = sample(&mut rng, ids.len(), n_speakers)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    let mut sources = Vec::with_capacity(n_speakers);
    for spk in &chosen {
        let utts = &index.speakers[*spk];
        let mut picked = None;
        for _ in 0..32 {
            let path = &utts[rng.random_range(0..utts.len())];
            let segments = segment_utterance(&read_wav(path)?, &opts.segmentation)?;
            let voiced: Vec<Waveform> = segments.into_iter().filter(|s| s.energy() > 0.0).collect();
            if !voiced.is_empty() {
                let k = rng.random_range(0..voiced.len());
                picked = voiced.into_iter().nth(k);
                break;
            }
        }
        sources.push(picked.ok_or_else(|| {
            Error::Corpus(format!("speaker {spk} has no usable utterance segments"))
        })?);
    }
    let mut ex = mix(&sources, opts.snr_range_db, rng.random())?;
    ex.speaker_ids = chosen.iter().map(|s| s.to_string()).collect();
    ex.seed = seed;
    Ok(ex)
}

/// Simulates `count` mixtures into `out_dir` and writes `manifest.tsv`.
///
/// Mixture `k` is produced from `sub_seed(seed, k)` alone, so the output
/// does not depend on `opts.workers`.
pub fn build_dataset(
    index: &CorpusIndex,
    n_speakers: usize,
    count: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
    opts: &BuildOptions,
) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    if n_speakers == 0 || index.speakers.len() < n_speakers {
        return Err(Error::Corpus(format!(
            "{n_speakers} speakers per mixture requested but the corpus has {}",
            index.speakers.len()
        )));
    }
    for sub in std::iter::once("mix".to_owned()).chain((1..=n_speakers).map(|i| format!("s{i}"))) {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let make = |k: usize| -> Result<ManifestEntry> {
        let ex = simulate_one(index, n_speakers, sub_seed(seed, k as u64), opts)?;
        let name = format!("{k:05}.wav");
        let mixture_path = PathBuf::from("mix").join(&name);
        write_wav(out_dir.join(&mixture_path), &ex.mixture)?;
        let mut source_paths = Vec::with_capacity(n_speakers);
        for (i, s) in ex.sources.iter().enumerate() {
            let p = PathBuf::from(format!("s{}", i + 1)).join(&name);
            write_wav(out_dir.join(&p), s)?;
            source_paths.push(p);
        }
        Ok(ManifestEntry {
            mixture_path,
            source_paths,
            speaker_ids: ex.speaker_ids,
            gains_db: ex.gains_db,
            seed: ex.seed,
        })
    };
    let entries = crate::parallel::map_indexed(count, opts.workers, make)?;
    save_manifest(out_dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

/// A manifest entry loaded into memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub mixture: Vec<f64>,
    pub sources: Vec<Vec<f64>>,
    pub speaker_ids: Vec<String>,
}

impl Example {
    pub fn num_speakers(&self) -> usize {
        self.sources.len()
    }

    pub fn from_mixture(ex: &MixtureExample) -> Self {
        Example {
            mixture: ex.mixture.samples().to_vec(),
            sources: ex.sources.iter().map(|s| s.samples().to_vec()).collect(),
            speaker_ids: ex.speaker_ids.clone(),
        }
    }
}

/// Reads every mixture and source listed in a manifest file.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<Example>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    crate::audio::load_manifest(manifest)?
        .iter()
        .map(|e| {
            let (mix, srcs) = e.resolve(base);
            let mixture = read_wav(&mix)?;
            mixture.ensure_rate(SAMPLE_RATE)?;
            let sources = srcs
                .iter()
                .map(|p| read_wav(p).map(Waveform::into_samples))
                .collect::<Result<Vec<_>>>()?;
            Ok(Example {
                mixture: mixture.into_samples(),
                sources,
                speaker_ids: e.speaker_ids.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize, freq: f64, amp: f64) -> Waveform {
        Waveform::at_8k(
            (0..len)
                .map(|t| amp * (2.0 * std::f64::consts::PI * freq * t as f64 / 8000.0).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn segmentation_rules() {
        let seg = Segmentation::default();
        let six = Waveform::at_8k((0..48000).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
        let parts = segment_utterance(&six, &seg).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].samples(), &six.samples()[..32000]);
        assert_eq!(parts[1].samples(), &six.samples()[16000..48000]);

        let three = Waveform::at_8k(vec![0.5; 24000]).unwrap();
        let parts = segment_utterance(&three, &seg).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), 32000);
        assert!(parts[0].samples()[24000..].iter().all(|&v| v == 0.0));

        let short = Waveform::at_8k(vec![0.5; 12000]).unwrap();
        assert!(segment_utterance(&short, &seg).unwrap().is_empty());

        let wrong = Waveform::new(vec![0.0; 48000], 16000).unwrap();
        assert!(matches!(segment_utterance(&wrong, &seg), Err(Error::SampleRate { .. })));
    }

    #[test]
    fn segmentation_tail_and_reconstruction() {
        let seg = Segmentation::default();
        for len in [16000usize, 31999, 32000, 40000, 52000, 56001, 70000] {
            let w = Waveform::at_8k((0..len).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect()).unwrap();
            let parts = segment_utterance(&w, &seg).unwrap();
            let mut rebuilt: Vec<f64> = parts[0].samples()[..seg.seg_len.min(len)].to_vec();
            for p in &parts[1..] {
                rebuilt.extend_from_slice(&p.samples()[seg.seg_len - seg.hop..]);
            }
            assert!(rebuilt.len() >= len, "len {len}");
            assert_eq!(&rebuilt[..len], w.samples(), "len {len}");
        }
    }

    #[test]
    fn zero_db_leaves_unit_power_sources_unscaled() {
        let a = Waveform::at_8k((0..800).map(|t| if t % 2 == 0 { 0.5 } else { -0.5 }).collect()).unwrap();
        let b = Waveform::at_8k((0..800).map(|t| if t % 4 < 2 { 0.5 } else { -0.5 }).collect()).unwrap();
        let ex = mix_with_gains(&[a.clone(), b.clone()], &[0.0, 0.0]).unwrap();
        assert_eq!(ex.sources[1], b);
        let ratio = 10.0 * (mean_power(ex.sources[0].samples()) / mean_power(ex.sources[1].samples())).log10();
        assert!(ratio.abs() < 1e-9);
    }

    #[test]
    fn requested_snr_is_measured_back() {
        let srcs = [tone(4000, 220.0, 0.3), tone(4000, 530.0, 0.8), tone(4000, 1210.0, 0.1)];
        for seed in 0..20 {
            let ex = mix(&srcs, (0.0, 5.0), seed).unwrap();
            for i in 1..3 {
                let measured = 10.0
                    * (mean_power(ex.sources[0].samples()) / mean_power(ex.sources[i].samples())).log10();
                assert!((measured - ex.gains_db[i]).abs() < 0.01);
                assert!((0.0..=5.0).contains(&ex.gains_db[i]));
            }
            for t in 0..4000 {
                let s: f64 = ex.sources.iter().map(|w| w.samples()[t]).sum();
                assert!((s - ex.mixture.samples()[t]).abs() <= 1e-6 * s.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn loud_mixtures_are_rescaled_jointly() {
        let ex = mix_with_gains(&[tone(1000, 100.0, 0.9), tone(1000, 100.0, 0.9)], &[0.0, 0.0]).unwrap();
        assert!((ex.mixture.peak() - RESCALE_PEAK).abs() < 1e-12);
        let ratio = mean_power(ex.sources[0].samples()) / mean_power(ex.sources[1].samples());
        assert!((ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_source_and_errors() {
        let a = tone(100, 300.0, 0.4);
        let ex = mix(std::slice::from_ref(&a), (0.0, 5.0), 3).unwrap();
        assert_eq!(ex.mixture, a);
        assert!(matches!(
            mix(&[a.clone(), Waveform::zeros(100, SAMPLE_RATE)], (0.0, 5.0), 1),
            Err(Error::SilentSource(1))
        ));
        assert!(matches!(
            mix(&[a, tone(99, 300.0, 0.4)], (0.0, 5.0), 1),
            Err(Error::LengthMismatch(99, 100))
        ));
    }
}
