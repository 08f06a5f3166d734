//! Synthetic symbolic mixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{symbol_token, Result, ToyError};
use crate::codec::{order_speakers, serialize, TimedToken, TimedTranscript, TogglStream};
use crate::mixture::{db_to_amplitude, MAX_GAIN_DB, MAX_OFFSET_FRACTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    pub frames_per_symbol: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub max_speakers: usize,
    /// Per-speaker symbol count range, inclusive.
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// The first frame of every symbol is scaled by `1 + onset_boost`, so
    /// symbol boundaries and repeats stay visible inside a sum.
    pub onset_boost: f64,
    /// Draw offsets so no two speakers share a symbol-onset phase modulo
    /// `frames_per_symbol`. The phase is then the only cue to who is
    /// speaking.
    pub distinct_onset_phases: bool,
    /// Silent frames before the first speaker, drawn uniformly from
    /// `0..=max_lead_in`.
    pub max_lead_in: usize,
    pub embedding_seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            frames_per_symbol: 3,
            feature_dim: 16,
            noise_std: 0.05,
            max_speakers: 3,
            min_symbols: 2,
            max_symbols: 5,
            onset_boost: 1.0,
            distinct_onset_phases: true,
            max_lead_in: 0,
            embedding_seed: 0x5eed,
        }
    }
}

/// Offsets (in frames, relative to the previous speaker's start; the first
/// delays speaker 0) and relative gains for one mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMix {
    pub offsets: Vec<usize>,
    pub gains_db: Vec<f64>,
}

impl FrameMix {
    pub fn aligned(speakers: usize) -> Self {
        Self {
            offsets: vec![0; speakers],
            gains_db: vec![0.0; speakers],
        }
    }
}

/// One rendered mixture with its references.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyItem {
    pub frames: Vec<Vec<f64>>,
    pub symbols: Vec<Vec<usize>>,
    pub mix: FrameMix,
    /// Token start times are frame indices.
    pub transcripts: Vec<TimedTranscript>,
    pub target: TogglStream,
}

impl ToyItem {
    pub fn speakers(&self) -> usize {
        self.symbols.len()
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ToyError::Config(m.to_string()));
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.frames_per_symbol < 1 || self.feature_dim < 1 {
            return fail("frames_per_symbol and feature_dim must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative");
        }
        if self.max_speakers < 1 {
            return fail("max_speakers must be positive");
        }
        if self.min_symbols < 1 || self.min_symbols > self.max_symbols {
            return fail("need 1 <= min_symbols <= max_symbols");
        }
        if !(self.onset_boost.is_finite() && self.onset_boost > -1.0) {
            return fail("onset_boost must be finite and above -1");
        }
        if self.distinct_onset_phases {
            if self.max_speakers > self.frames_per_symbol {
                return fail("distinct onset phases need max_speakers <= frames_per_symbol");
            }
            if self.max_offset(self.min_symbols) + 1 < self.frames_per_symbol {
                return fail("shortest speaker leaves no room for distinct onset phases");
            }
        }
        Ok(())
    }

    /// Lexical tokens in symbol order.
    pub fn tokens(&self) -> Vec<String> {
        (0..self.vocab_size).map(symbol_token).collect()
    }

    /// Fixed feature vector of every symbol.
    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.embedding_seed);
        (0..self.vocab_size)
            .map(|_| (0..self.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn max_offset(&self, prev_symbols: usize) -> usize {
        (MAX_OFFSET_FRACTION * (prev_symbols * self.frames_per_symbol) as f64).floor() as usize
    }

    /// Draws an `n_mix`-speaker item.
    pub fn sample_item<R: Rng + ?Sized>(&self, n_mix: usize, rng: &mut R) -> Result<ToyItem> {
        if n_mix == 0 || n_mix > self.max_speakers {
            return Err(ToyError::TooManySpeakers {
                count: n_mix,
                max: self.max_speakers,
            });
        }
        let symbols: Vec<Vec<usize>> = (0..n_mix)
            .map(|_| {
                let len = rng.random_range(self.min_symbols..=self.max_symbols);
                (0..len).map(|_| rng.random_range(0..self.vocab_size)).collect()
            })
            .collect();
        let fps = self.frames_per_symbol;
        let mut mix = FrameMix::aligned(1);
        let mut start = rng.random_range(0..=self.max_lead_in);
        mix.offsets[0] = start;
        let mut phases = vec![start % fps];
        for prev in &symbols[..n_mix - 1] {
            let candidates: Vec<usize> = (0..=self.max_offset(prev.len()))
                .filter(|o| !self.distinct_onset_phases || !phases.contains(&((start + o) % fps)))
                .collect();
            let offset = candidates[rng.random_range(0..candidates.len())];
            start += offset;
            phases.push(start % fps);
            mix.offsets.push(offset);
            mix.gains_db.push(rng.random_range(-MAX_GAIN_DB..=MAX_GAIN_DB));
        }
        render_features(self, &symbols, &mix, rng.random())
    }
}

/// Renders symbol sequences into summed, noisy frames and builds the
/// staggered target from the symbol onsets.
pub fn render_features(task: &SyntheticTask, symbols: &[Vec<usize>], mix: &FrameMix, seed: u64) -> Result<ToyItem> {
    if symbols.is_empty() || symbols.len() > task.max_speakers {
        return Err(ToyError::TooManySpeakers {
            count: symbols.len(),
            max: task.max_speakers,
        });
    }
    if mix.offsets.len() != symbols.len() || mix.gains_db.len() != symbols.len() {
        return Err(ToyError::Config("mix arity differs from speaker count".into()));
    }
    if let Some(&symbol) = symbols.iter().flatten().find(|&&s| s >= task.vocab_size) {
        return Err(ToyError::BadSymbol {
            symbol,
            vocab: task.vocab_size,
        });
    }
    let fps = task.frames_per_symbol;
    let starts: Vec<usize> = mix
        .offsets
        .iter()
        .scan(0, |acc, o| {
            *acc += o;
            Some(*acc)
        })
        .collect();
    let gains: Vec<f64> = mix
        .gains_db
        .iter()
        .scan(1.0, |acc, g| {
            *acc *= db_to_amplitude(*g);
            Some(*acc)
        })
        .collect();
    let len = symbols
        .iter()
        .zip(&starts)
        .map(|(s, st)| st + s.len() * fps)
        .max()
        .unwrap_or(0);

    let table = task.embeddings();
    let mut frames = vec![vec![0.0; task.feature_dim]; len];
    for ((seq, &start), &gain) in symbols.iter().zip(&starts).zip(&gains) {
        for (j, &sym) in seq.iter().enumerate() {
            for f in 0..fps {
                let scale = if f == 0 { gain * (1.0 + task.onset_boost) } else { gain };
                let frame = &mut frames[start + j * fps + f];
                for (x, e) in frame.iter_mut().zip(&table[sym]) {
                    *x += scale * e;
                }
            }
        }
    }
    if task.noise_std > 0.0 {
        let noise = Normal::new(0.0, task.noise_std).expect("validated noise");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in frames.iter_mut().flatten() {
            *x += noise.sample(&mut rng);
        }
    }

    let transcripts = symbols
        .iter()
        .zip(&starts)
        .enumerate()
        .map(|(n, (seq, &start))| {
            let tokens = seq
                .iter()
                .enumerate()
                .map(|(j, &s)| TimedToken::new(symbol_token(s), (start + j * fps) as f64))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(TimedTranscript::new(format!("spk{n}"), tokens)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let target = serialize(&transcripts, &order_speakers(&transcripts)?)?;
    Ok(ToyItem {
        frames,
        symbols: symbols.to_vec(),
        mix: mix.clone(),
        transcripts,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SyntheticTask {
        SyntheticTask {
            noise_std: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_speaker_frame_count() {
        let task = SyntheticTask {
            frames_per_symbol: 2,
            ..Default::default()
        };
        let item = render_features(&task, &[vec![1, 2, 3]], &FrameMix::aligned(1), 0).unwrap();
        assert_eq!(item.frames.len(), 6);
        assert_eq!(item.target.control_count(), 0);
        assert_eq!(item.target.to_string(), "w1 w2 w3");
    }

    #[test]
    fn identical_aligned_speakers_sum() {
        let task = quiet();
        let one = render_features(&task, &[vec![4, 5]], &FrameMix::aligned(1), 3).unwrap();
        let two = render_features(&task, &[vec![4, 5], vec![4, 5]], &FrameMix::aligned(2), 3).unwrap();
        for (a, b) in one.frames.iter().flatten().zip(two.frames.iter().flatten()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let task = SyntheticTask::default();
        let mix = FrameMix {
            offsets: vec![0, 4],
            gains_db: vec![0.0, 1.5],
        };
        let a = render_features(&task, &[vec![1, 2], vec![3]], &mix, 9).unwrap();
        let b = render_features(&task, &[vec![1, 2], vec![3]], &mix, 9).unwrap();
        assert_eq!(a, b);
        let c = render_features(&task, &[vec![1, 2], vec![3]], &mix, 10).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn onset_frame_carries_boost() {
        let task = quiet();
        let item = render_features(&task, &[vec![7]], &FrameMix::aligned(1), 0).unwrap();
        for (a, b) in item.frames[0].iter().zip(&item.frames[1]) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_speakers_rejected() {
        let task = SyntheticTask::default();
        let syms = vec![vec![1]; 4];
        assert!(matches!(
            render_features(&task, &syms, &FrameMix::aligned(4), 0),
            Err(ToyError::TooManySpeakers { count: 4, max: 3 })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(task.sample_item(4, &mut rng).is_err());
    }

    #[test]
    fn sampled_offsets_follow_the_rules() {
        let task = SyntheticTask::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let item = task.sample_item(3, &mut rng).unwrap();
            let mut start = 0;
            let mut phases = vec![0];
            for n in 1..3 {
                let bound = (0.9 * (item.symbols[n - 1].len() * 3) as f64).floor() as usize;
                assert!(item.mix.offsets[n] <= bound);
                assert!(item.mix.gains_db[n].abs() <= 3.0);
                start += item.mix.offsets[n];
                assert!(!phases.contains(&(start % 3)));
                phases.push(start % 3);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(SyntheticTask::default().validate().is_ok());
        let bad = SyntheticTask {
            max_speakers: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticTask {
            vocab_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
