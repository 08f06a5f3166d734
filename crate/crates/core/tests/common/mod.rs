//! Independent reference implementations shared by the property and
//! acceptance targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use itertools::Itertools;
use rand::Rng;
use toggl_core::codec::{SpeakerOrder, TimedTranscript};

/// Plain Levenshtein distance over tokens.
pub fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Minimum total edit distance over every pairing of reference speakers
/// with hypothesis streams, unmatched sides paired with nothing.
pub fn brute_force_pit(refs: &[Vec<String>], hyps: &[Vec<String>]) -> usize {
    let n = refs.len().max(hyps.len());
    let empty = Vec::new();
    let at = |v: &[Vec<String>], i: usize| v.get(i).cloned().unwrap_or_else(|| empty.clone());
    (0..n)
        .permutations(n)
        .map(|p| (0..n).map(|r| levenshtein(&at(refs, r), &at(hyps, p[r]))).sum())
        .min()
        .unwrap_or(0)
}

/// Lowest `(errors, words)` rate over every size-`k` subset of references.
pub fn brute_force_oracle(refs: &[Vec<String>], hyps: &[Vec<String>], k: usize) -> (usize, usize) {
    (0..refs.len())
        .combinations(k)
        .map(|subset| {
            let chosen: Vec<Vec<String>> = subset.iter().map(|&i| refs[i].clone()).collect();
            let words = chosen.iter().map(Vec::len).sum::<usize>();
            (brute_force_pit(&chosen, hyps), words)
        })
        .min_by(|a, b| rate_cmp(*a, *b))
        .expect("k within range")
}

fn rate_cmp(a: (usize, usize), b: (usize, usize)) -> std::cmp::Ordering {
    let key = |(e, w): (usize, usize)| if w == 0 { if e == 0 { 0.0 } else { f64::INFINITY } } else { e as f64 / w as f64 };
    key(a).total_cmp(&key(b)).then(a.0.cmp(&b.0))
}

/// Sum over all `V^T` label paths that collapse to `target`.
pub fn brute_force_ctc(probs: &[Vec<f64>], target: &[usize]) -> f64 {
    let t = probs.len();
    let v = probs[0].len();
    let mut total = 0.0;
    for path in (0..t).map(|_| 0..v).multi_cartesian_product() {
        let mut collapsed: Vec<usize> = path.clone();
        collapsed.dedup();
        collapsed.retain(|&l| l != 0);
        if collapsed == target {
            total += path.iter().enumerate().map(|(f, &l)| probs[f][l]).product::<f64>();
        }
    }
    total.ln()
}

/// A random probability grid with every entry at least about 1e-3.
pub fn random_probs<R: Rng>(rng: &mut R, frames: usize, vocab: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| {
            let w: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Tokens from a small alphabet so speakers share words; start times on a
/// coarse grid so ties are common.
pub fn random_transcripts<R: Rng>(rng: &mut R, max_speakers: usize, max_tokens: usize) -> Vec<TimedTranscript> {
    let speakers = rng.random_range(1..=max_speakers);
    (0..speakers)
        .map(|s| {
            let n = rng.random_range(1..=max_tokens);
            let mut start = rng.random_range(0..6) as f64 * 0.25;
            let pairs: Vec<(String, f64)> = (0..n)
                .map(|_| {
                    start += rng.random_range(0..3) as f64 * 0.25;
                    (format!("t{}", rng.random_range(0..5)), start)
                })
                .collect();
            TimedTranscript::from_pairs(&format!("spk{s}"), &pairs).unwrap()
        })
        .collect()
}

/// What decoding a stream serialized in `order` must give back.
pub fn expected_speakers(transcripts: &[TimedTranscript], order: &SpeakerOrder) -> BTreeMap<usize, Vec<String>> {
    order.ordering().iter().enumerate().map(|(k, &i)| (k, transcripts[i].texts())).collect()
}

/// Tokens of every speaker merged by `(start, rank in order)`, stable within
/// a speaker.
pub fn merged_tokens(transcripts: &[TimedTranscript], order: &SpeakerOrder) -> Vec<(usize, String)> {
    let mut all: Vec<(f64, usize, usize, String)> = Vec::new();
    for (rank, &i) in order.ordering().iter().enumerate() {
        for (pos, tok) in transcripts[i].tokens().iter().enumerate() {
            all.push((tok.start(), rank, pos, tok.text().to_string()));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().map(|(_, rank, _, text)| (rank, text)).collect()
}

pub fn random_words<R: Rng>(rng: &mut R, max_len: usize) -> Vec<String> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| format!("w{}", rng.random_range(0..3))).collect()
}

pub fn as_set(streams: &[Vec<String>]) -> BTreeMap<usize, Vec<String>> {
    streams.iter().cloned().enumerate().collect()
}
