//! Overlapped-speech mixture synthesis.
//!
//! Source `n` starts a uniform fraction in `[0, 0.9]` of source `n-1`'s
//! duration after source `n-1` starts, and sits a uniform `[-3, +3]` dB away
//! from it in level. Gains compound down the chain. The summed mixture is
//! rescaled to the RMS of the first source.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav_i16, AudioError, Waveform};
use crate::codec::{order_speakers, serialize, CodecError, TimedTranscript, TogglStream};
use crate::manifest::{write_jsonl, ManifestError, UtteranceRecord};

/// Largest start offset as a fraction of the previous source's duration.
pub const MAX_OFFSET_FRACTION: f64 = 0.9;
/// Largest relative level change between consecutive sources, in dB.
pub const MAX_GAIN_DB: f64 = 3.0;

pub type Result<T> = std::result::Result<T, MixError>;

#[derive(Error, Debug)]
pub enum MixError {
    #[error("no sources given")]
    NoSources,
    #[error("source duration {0} must be positive and finite")]
    BadDuration(f64),
    #[error("{sources} sources but the mix spec describes {spec}")]
    Arity { sources: usize, spec: usize },
    #[error("sample rates differ: {0} vs {1}")]
    RateMismatch(u32, u32),
    #[error("first source must have zero offset and zero gain")]
    FirstSource,
    #[error("offset {offset} of source {index} is outside [0, {bound}]")]
    OffsetOutOfRange { index: usize, offset: f64, bound: f64 },
    #[error("gain {gain_db} dB of source {index} is outside [-3, 3]")]
    GainOutOfRange { index: usize, gain_db: f64 },
    #[error("mix depth {0} must be between 1 and 4")]
    BadDepth(usize),
    #[error("need {needed} distinct speakers, manifest has {available}")]
    InsufficientSpeakers { needed: usize, available: usize },
    #[error("utterance {0} has no audio path")]
    MissingAudio(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Per-source offsets and gains, each relative to the previous source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub offsets_s: Vec<f64>,
    pub gains_db: Vec<f64>,
}

impl MixSpec {
    pub fn single() -> Self {
        Self {
            offsets_s: vec![0.0],
            gains_db: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets_s.is_empty()
    }

    /// Start time of each source measured from the mixture start.
    pub fn absolute_offsets(&self) -> Vec<f64> {
        self.offsets_s
            .iter()
            .scan(0.0, |acc, o| {
                *acc += o;
                Some(*acc)
            })
            .collect()
    }

    /// Amplitude factor of each source after compounding the relative gains.
    pub fn amplitude_factors(&self) -> Vec<f64> {
        self.gains_db
            .iter()
            .scan(1.0, |acc, g| {
                *acc *= db_to_amplitude(*g);
                Some(*acc)
            })
            .collect()
    }

    /// Checks the offset and gain bounds against the source durations.
    pub fn validate(&self, durations: &[f64]) -> Result<()> {
        if self.offsets_s.len() != self.gains_db.len() || self.len() != durations.len() {
            return Err(MixError::Arity {
                sources: durations.len(),
                spec: self.len(),
            });
        }
        if self.is_empty() {
            return Err(MixError::NoSources);
        }
        if self.offsets_s[0] != 0.0 || self.gains_db[0] != 0.0 {
            return Err(MixError::FirstSource);
        }
        for index in 1..self.len() {
            let offset = self.offsets_s[index];
            let bound = MAX_OFFSET_FRACTION * durations[index - 1];
            if !(0.0..=bound).contains(&offset) {
                return Err(MixError::OffsetOutOfRange { index, offset, bound });
            }
            let gain_db = self.gains_db[index];
            if !(-MAX_GAIN_DB..=MAX_GAIN_DB).contains(&gain_db) {
                return Err(MixError::GainOutOfRange { index, gain_db });
            }
        }
        Ok(())
    }
}

pub fn db_to_amplitude(gain_db: f64) -> f64 {
    10f64.powf(gain_db / 20.0)
}

fn check_durations(durations: &[f64]) -> Result<()> {
    if durations.is_empty() {
        return Err(MixError::NoSources);
    }
    if let Some(&d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(MixError::BadDuration(d));
    }
    Ok(())
}

/// Draws offsets and gains for sources of the given durations.
pub fn sample_mix_spec(durations: &[f64], seed: u64) -> Result<MixSpec> {
    sample_mix_spec_with(durations, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_mix_spec_with<R: Rng + ?Sized>(durations: &[f64], rng: &mut R) -> Result<MixSpec> {
    check_durations(durations)?;
    let mut spec = MixSpec::single();
    for prev in &durations[..durations.len() - 1] {
        spec.offsets_s.push(rng.random_range(0.0..=MAX_OFFSET_FRACTION * prev));
        spec.gains_db.push(rng.random_range(-MAX_GAIN_DB..=MAX_GAIN_DB));
    }
    Ok(spec)
}

/// Fraction of the mixture's duration during which two or more sources are
/// active. Source `n` is active on `[start_n, start_n + duration_n)`.
pub fn compute_overlap_fraction(spec: &MixSpec, durations: &[f64]) -> f64 {
    let starts = spec.absolute_offsets();
    let mut events: Vec<(f64, i32)> = Vec::with_capacity(2 * durations.len());
    for (s, d) in starts.iter().zip(durations) {
        events.push((*s, 1));
        events.push((s + d, -1));
    }
    // ends sort before starts at the same instant (half-open intervals)
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let total = starts
        .iter()
        .zip(durations)
        .map(|(s, d)| s + d)
        .fold(0.0, f64::max);
    if total <= 0.0 {
        return 0.0;
    }
    let mut active = 0;
    let mut overlapped = 0.0;
    let mut last = 0.0;
    for (t, delta) in events {
        if active >= 2 {
            overlapped += t - last;
        }
        active += delta;
        last = t;
    }
    (overlapped / total).clamp(0.0, 1.0)
}

/// A synthesized mixture with everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub mixture: Waveform,
    pub spec: MixSpec,
    pub sources: Vec<String>,
    pub overlap_fraction: f64,
}

/// Gain-scale, shift, sum, then match the RMS of the first source.
pub fn mix(sources: &[(&str, &Waveform)], spec: &MixSpec) -> Result<MixtureRecord> {
    let first = sources.first().ok_or(MixError::NoSources)?.1;
    if spec.len() != sources.len() {
        return Err(MixError::Arity {
            sources: sources.len(),
            spec: spec.len(),
        });
    }
    let rate = first.sample_rate();
    if let Some((_, w)) = sources.iter().find(|(_, w)| w.sample_rate() != rate) {
        return Err(MixError::RateMismatch(rate, w.sample_rate()));
    }
    let durations: Vec<f64> = sources.iter().map(|(_, w)| w.duration()).collect();
    spec.validate(&durations)?;

    let starts: Vec<usize> = spec
        .absolute_offsets()
        .iter()
        .map(|s| (s * f64::from(rate)).round() as usize)
        .collect();
    let len = sources
        .iter()
        .zip(&starts)
        .map(|((_, w), s)| s + w.len())
        .max()
        .unwrap_or(0);
    let mut acc = vec![0.0f64; len];
    for (((_, w), start), amp) in sources.iter().zip(&starts).zip(spec.amplitude_factors()) {
        for (dst, &s) in acc[*start..].iter_mut().zip(w.samples()) {
            *dst += amp * f64::from(s);
        }
    }

    let target = first.rms();
    let current = (acc.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    let scale = if current > 0.0 { target / current } else { 1.0 };
    let samples: Vec<f32> = acc.iter().map(|x| (x * scale) as f32).collect();

    Ok(MixtureRecord {
        mixture: Waveform::new(samples, rate)?,
        spec: spec.clone(),
        sources: sources.iter().map(|(id, _)| id.to_string()).collect(),
        overlap_fraction: compute_overlap_fraction(spec, &durations),
    })
}

/// One dataset item: the mixture plus its staggered target.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureItem {
    pub id: String,
    pub record: MixtureRecord,
    /// Source transcripts shifted onto the mixture timeline, in mixing order.
    pub transcripts: Vec<TimedTranscript>,
    pub target: TogglStream,
}

/// Manifest line describing a written mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifestRecord {
    pub id: String,
    pub wav_path: PathBuf,
    pub sources: Vec<String>,
    pub offsets_s: Vec<f64>,
    pub gains_db: Vec<f64>,
    pub overlap_fraction: f64,
    pub toggl_target: TogglStream,
    pub clipped_samples: usize,
}

/// Utterances grouped by speaker, in speaker-name order for determinism.
pub struct SourcePool<'a> {
    by_speaker: BTreeMap<&'a str, Vec<&'a UtteranceRecord>>,
}

impl<'a> SourcePool<'a> {
    pub fn new(records: &'a [UtteranceRecord]) -> Self {
        let mut by_speaker: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
        for r in records {
            by_speaker.entry(r.speaker.as_str()).or_default().push(r);
        }
        Self { by_speaker }
    }

    pub fn speakers(&self) -> usize {
        self.by_speaker.len()
    }

    /// Distinct speakers uniformly without replacement, then one utterance
    /// uniformly from each.
    pub fn draw<R: Rng + ?Sized>(&self, n_mix: usize, rng: &mut R) -> Result<Vec<&'a UtteranceRecord>> {
        if n_mix > self.speakers() {
            return Err(MixError::InsufficientSpeakers {
                needed: n_mix,
                available: self.speakers(),
            });
        }
        let mut names: Vec<&str> = self.by_speaker.keys().copied().collect();
        let (chosen, _) = names.partial_shuffle(rng, n_mix);
        Ok(chosen
            .iter()
            .map(|name| {
                let utts = &self.by_speaker[name];
                utts[rng.random_range(0..utts.len())]
            })
            .collect())
    }
}

/// RNG for dataset item `index`, independent of every other item.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds item `index` of a dataset. Pure in `(seed, index)`.
pub fn synthesize_item<F>(pool: &SourcePool<'_>, n_mix: usize, seed: u64, index: u64, load: &mut F) -> Result<MixtureItem>
where
    F: FnMut(&UtteranceRecord) -> Result<Waveform>,
{
    if !(1..=4).contains(&n_mix) {
        return Err(MixError::BadDepth(n_mix));
    }
    let mut rng = item_rng(seed, index);
    let picked = pool.draw(n_mix, &mut rng)?;
    let waves = picked.iter().map(|r| load(r)).collect::<Result<Vec<_>>>()?;
    let durations: Vec<f64> = waves.iter().map(Waveform::duration).collect();
    let spec = sample_mix_spec_with(&durations, &mut rng)?;

    let named: Vec<(&str, &Waveform)> = picked.iter().map(|r| r.id.as_str()).zip(&waves).collect();
    let record = mix(&named, &spec)?;
    let transcripts = picked
        .iter()
        .zip(spec.absolute_offsets())
        .map(|(r, off)| r.transcript()?.shifted(off))
        .collect::<std::result::Result<Vec<_>, CodecError>>()?;
    let target = serialize(&transcripts, &order_speakers(&transcripts)?)?;
    Ok(MixtureItem {
        id: format!("mix{n_mix}_{index:06}"),
        record,
        transcripts,
        target,
    })
}

/// Builds `count` items in index order.
pub fn synthesize_dataset<F>(records: &[UtteranceRecord], n_mix: usize, count: usize, seed: u64, mut load: F) -> Result<Vec<MixtureItem>>
where
    F: FnMut(&UtteranceRecord) -> Result<Waveform>,
{
    let pool = SourcePool::new(records);
    if n_mix > pool.speakers() {
        return Err(MixError::InsufficientSpeakers {
            needed: n_mix,
            available: pool.speakers(),
        });
    }
    (0..count as u64)
        .map(|i| synthesize_item(&pool, n_mix, seed, i, &mut load))
        .collect()
}

/// Loader that reads each utterance's WAV, resolving relative paths against
/// `base`.
pub fn wav_loader(base: PathBuf) -> impl FnMut(&UtteranceRecord) -> Result<Waveform> {
    move |r: &UtteranceRecord| {
        let rel = r.wav_path.as_ref().ok_or_else(|| MixError::MissingAudio(r.id.clone()))?;
        let path = if rel.is_absolute() { rel.clone() } else { base.join(rel) };
        Ok(crate::audio::read_wav(&path)?)
    }
}

/// Writes every mixture as 16-bit WAV plus `manifest.jsonl` into `out_dir`.
pub fn write_dataset(items: &[MixtureItem], out_dir: &Path) -> Result<Vec<MixManifestRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| {
        MixError::Manifest(ManifestError::Io {
            path: out_dir.to_path_buf(),
            source: e,
        })
    })?;
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let file = format!("{}.wav", item.id);
        let stats = write_wav_i16(&out_dir.join(&file), &item.record.mixture)?;
        records.push(MixManifestRecord {
            id: item.id.clone(),
            wav_path: PathBuf::from(file),
            sources: item.record.sources.clone(),
            offsets_s: item.record.spec.offsets_s.clone(),
            gains_db: item.record.spec.gains_db.clone(),
            overlap_fraction: item.record.overlap_fraction,
            toggl_target: item.target.clone(),
            clipped_samples: stats.clipped_samples,
        });
    }
    write_jsonl(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{deserialize, DecodeMode, TimedToken};

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn db_examples() {
        assert_eq!(db_to_amplitude(0.0), 1.0);
        assert!((db_to_amplitude(3.0) - 1.41254).abs() < 1e-5);
        assert!((db_to_amplitude(-3.0) - 0.70795).abs() < 1e-5);
    }

    #[test]
    fn single_source_spec() {
        for seed in 0..5 {
            assert_eq!(sample_mix_spec(&[4.0], seed).unwrap(), MixSpec::single());
        }
    }

    #[test]
    fn offsets_within_ninety_percent() {
        for seed in 0..500 {
            let s = sample_mix_spec(&[4.0, 3.0], seed).unwrap();
            assert!((0.0..=3.6).contains(&s.offsets_s[1]));
            assert!(s.validate(&[4.0, 3.0]).is_ok());
        }
    }

    #[test]
    fn spec_sampling_is_deterministic() {
        assert_eq!(sample_mix_spec(&[1.0, 2.0, 3.0], 7).unwrap(), sample_mix_spec(&[1.0, 2.0, 3.0], 7).unwrap());
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(sample_mix_spec(&[], 0), Err(MixError::NoSources)));
        assert!(matches!(sample_mix_spec(&[1.0, 0.0], 0), Err(MixError::BadDuration(_))));
    }

    #[test]
    fn gain_draws_are_uniform_on_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_mix_spec_with(&[1.0, 1.0], &mut rng).unwrap().gains_db[1])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!(draws.iter().all(|g| (-3.0..=3.0).contains(g)));
    }

    #[test]
    fn overlap_examples() {
        let two = MixSpec {
            offsets_s: vec![0.0, 0.0],
            gains_db: vec![0.0, 0.0],
        };
        assert_eq!(compute_overlap_fraction(&two, &[2.0, 2.0]), 1.0);
        let half = MixSpec {
            offsets_s: vec![0.0, 1.0],
            gains_db: vec![0.0, 0.0],
        };
        assert!((compute_overlap_fraction(&half, &[2.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(compute_overlap_fraction(&MixSpec::single(), &[2.0]), 0.0);
    }

    #[test]
    fn overlap_matches_grid_oracle() {
        // 1 ms grid count of instants covered by two or more sources
        let grid = |starts: &[f64], durs: &[f64]| {
            let end = starts.iter().zip(durs).map(|(s, d)| s + d).fold(0.0, f64::max);
            let steps = (end * 1000.0).round() as usize;
            let covered = (0..steps)
                .filter(|&i| {
                    let t = (i as f64 + 0.5) / 1000.0;
                    starts.iter().zip(durs).filter(|(s, d)| t >= **s && t < **s + **d).count() >= 2
                })
                .count();
            covered as f64 / steps as f64
        };
        let spec = MixSpec {
            offsets_s: vec![0.0, 0.8, 0.3],
            gains_db: vec![0.0, 1.0, -1.0],
        };
        let durs = [1.0, 0.5, 2.0];
        let got = compute_overlap_fraction(&spec, &durs);
        assert!((got - grid(&spec.absolute_offsets(), &durs)).abs() < 1e-3);
    }

    #[test]
    fn single_source_mix_is_identity() {
        let w = wave(vec![0.1, -0.2, 0.3, 0.0]);
        let r = mix(&[("a", &w)], &MixSpec::single()).unwrap();
        assert_eq!(r.mixture.samples(), w.samples());
        assert_eq!(r.overlap_fraction, 0.0);
    }

    #[test]
    fn mix_normalizes_to_first_source() {
        let a = wave(vec![0.25; 1600]);
        let b = wave(vec![0.5; 1600]);
        let spec = MixSpec {
            offsets_s: vec![0.0, 0.0],
            gains_db: vec![0.0, 0.0],
        };
        let r = mix(&[("a", &a), ("b", &b)], &spec).unwrap();
        assert!((r.mixture.rms() / a.rms() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mix_length_follows_offsets() {
        let a = wave(vec![0.1; 32_000]);
        let b = wave(vec![0.1; 32_000]);
        let spec = MixSpec {
            offsets_s: vec![0.0, 1.0],
            gains_db: vec![0.0, 0.0],
        };
        let r = mix(&[("a", &a), ("b", &b)], &spec).unwrap();
        assert_eq!(r.mixture.len(), 48_000);
        assert!((r.overlap_fraction - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mix_errors() {
        let a = wave(vec![0.1; 100]);
        let b = Waveform::new(vec![0.1; 100], 8_000).unwrap();
        let spec = MixSpec {
            offsets_s: vec![0.0, 0.0],
            gains_db: vec![0.0, 0.0],
        };
        assert!(matches!(mix(&[("a", &a), ("b", &b)], &spec), Err(MixError::RateMismatch(..))));
        assert!(matches!(mix(&[("a", &a)], &spec), Err(MixError::Arity { .. })));
        let late = MixSpec {
            offsets_s: vec![0.0, 1.0],
            gains_db: vec![0.0, 0.0],
        };
        assert!(matches!(mix(&[("a", &a), ("a2", &a)], &late), Err(MixError::OffsetOutOfRange { .. })));
    }

    fn corpus(speakers: usize, per_speaker: usize) -> (Vec<UtteranceRecord>, BTreeMap<String, Waveform>) {
        let mut recs = Vec::new();
        let mut audio = BTreeMap::new();
        for s in 0..speakers {
            for u in 0..per_speaker {
                let id = format!("s{s}u{u}");
                let n = 800 + 160 * ((s + u) % 5);
                let samples = (0..n).map(|i| 0.3 * ((i as f32) * 0.05 * (s + 1) as f32).sin()).collect();
                audio.insert(id.clone(), Waveform::new(samples, 16_000).unwrap());
                let words = (n / 400).max(1);
                let tokens = (0..words)
                    .map(|w| TimedToken::new(format!("w{s}_{w}"), w as f64 * 0.025).unwrap())
                    .collect();
                recs.push(UtteranceRecord {
                    id,
                    speaker: format!("spk{s}"),
                    tokens,
                    wav_path: None,
                });
            }
        }
        (recs, audio)
    }

    #[test]
    fn dataset_is_deterministic_and_item_local() {
        let (recs, audio) = corpus(4, 3);
        let load = |r: &UtteranceRecord| Ok(audio[&r.id].clone());
        let a = synthesize_dataset(&recs, 2, 6, 99, load).unwrap();
        let b = synthesize_dataset(&recs, 2, 6, 99, load).unwrap();
        assert_eq!(a, b);
        let pool = SourcePool::new(&recs);
        let mut l = load;
        let lone = synthesize_item(&pool, 2, 99, 4, &mut l).unwrap();
        assert_eq!(lone, a[4]);
    }

    #[test]
    fn dataset_targets_round_trip() {
        let (recs, audio) = corpus(4, 3);
        let load = |r: &UtteranceRecord| Ok(audio[&r.id].clone());
        let one = synthesize_dataset(&recs, 1, 5, 1, load).unwrap();
        assert!(one.iter().all(|i| i.target.control_count() == 0 && i.record.overlap_fraction == 0.0));
        for item in synthesize_dataset(&recs, 3, 10, 2, load).unwrap() {
            let speakers: std::collections::BTreeSet<_> = item.transcripts.iter().map(|t| t.speaker_id()).collect();
            assert_eq!(speakers.len(), 3);
            let order = order_speakers(&item.transcripts).unwrap();
            let decoded = deserialize(&item.target, DecodeMode::Strict).unwrap();
            for (rank, &pos) in order.ordering().iter().enumerate() {
                assert_eq!(decoded[&rank], item.transcripts[pos].texts());
            }
            assert!((item.record.mixture.rms() / audio[&item.record.sources[0]].rms() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dataset_needs_enough_speakers() {
        let (recs, audio) = corpus(2, 2);
        let load = |r: &UtteranceRecord| Ok(audio[&r.id].clone());
        assert!(matches!(
            synthesize_dataset(&recs, 3, 1, 0, load),
            Err(MixError::InsufficientSpeakers { needed: 3, available: 2 })
        ));
    }
}
