//! Multi-speaker word error rate.
//!
//! Hypothesis streams are matched to reference speakers by the assignment that
//! minimises the total edit count. Unmatched reference words are deletions and
//! unmatched hypothesis words are insertions.

use std::collections::BTreeMap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod assignment;

pub type Result<T> = std::result::Result<T, ScoringError>;

/// Arity up to which the assignment is found by enumerating permutations.
pub const EXHAUSTIVE_ARITY: usize = 5;

/// Lower edges of the overlap buckets plus the closing 1.0.
pub const DEFAULT_BUCKET_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ScoringError {
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("oracle subset size {k} must be between 1 and the {available} reference speakers")]
    BadSubsetSize { k: usize, available: usize },
    #[error("bucket edges must be strictly increasing with at least two entries: {0:?}")]
    BadEdges(Vec<f64>),
    #[error("overlap fraction {0} lies outside the bucket range")]
    FractionOutOfRange(f64),
}

/// Stream index -> token sequence.
pub type SpeakerSetTranscript = BTreeMap<usize, Vec<String>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

impl std::ops::Add for EditCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            substitutions: self.substitutions + rhs.substitutions,
            insertions: self.insertions + rhs.insertions,
            deletions: self.deletions + rhs.deletions,
        }
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Minimal S/I/D between two token sequences. Among alignments of equal total
/// cost the one with the most substitutions wins.
pub fn edit_distance<A: AsRef<str>, B: AsRef<str>>(reference: &[A], hypothesis: &[B]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    // (total, insertions + deletions) compared lexicographically
    let mut dp = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    let mut back = vec![vec![0u8; m + 1]; n + 1];
    for i in 1..=n {
        dp[i][0] = (i, i);
        back[i][0] = 1;
    }
    for j in 1..=m {
        dp[0][j] = (j, j);
        back[0][j] = 2;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let (dt, dg) = dp[i - 1][j - 1];
            let diag = (dt + usize::from(!same), dg);
            let del = (dp[i - 1][j].0 + 1, dp[i - 1][j].1 + 1);
            let ins = (dp[i][j - 1].0 + 1, dp[i][j - 1].1 + 1);
            let mut best = (diag, 0u8);
            if del < best.0 {
                best = (del, 1);
            }
            if ins < best.0 {
                best = (ins, 2);
            }
            dp[i][j] = best.0;
            back[i][j] = best.1;
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match back[i][j] {
            0 => {
                if reference[i - 1].as_ref() != hypothesis[j - 1].as_ref() {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
            }
            1 => {
                counts.deletions += 1;
                i -= 1;
            }
            _ => {
                counts.insertions += 1;
                j -= 1;
            }
        }
    }
    counts
}

/// Pooled error counts with the derived rate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_word_count: usize,
    pub wer: f64,
    /// Hypothesis stream -> matched reference speaker, `None` when the stream
    /// was paired with padding.
    pub assignment: BTreeMap<usize, Option<usize>>,
    /// Set for optimistic subset scores.
    #[serde(default)]
    pub oracle: bool,
    /// Reference speakers kept by an oracle subset score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<usize>>,
}

impl ScoreReport {
    pub fn counts(&self) -> EditCounts {
        EditCounts {
            substitutions: self.substitutions,
            insertions: self.insertions,
            deletions: self.deletions,
        }
    }

    pub fn errors(&self) -> usize {
        self.counts().errors()
    }

    fn from_counts(counts: EditCounts, ref_word_count: usize) -> Self {
        Self {
            substitutions: counts.substitutions,
            insertions: counts.insertions,
            deletions: counts.deletions,
            ref_word_count,
            wer: rate(counts.errors(), ref_word_count),
            ..Default::default()
        }
    }
}

/// `errors / words`; zero words give 0 when there are no errors and
/// infinity otherwise.
pub fn rate(errors: usize, words: usize) -> f64 {
    match (errors, words) {
        (0, 0) => 0.0,
        (_, 0) => f64::INFINITY,
        (e, w) => e as f64 / w as f64,
    }
}

/// Permutation-optimal multi-speaker WER.
pub fn pit_wer(refs: &SpeakerSetTranscript, hyps: &SpeakerSetTranscript) -> Result<ScoreReport> {
    if refs.is_empty() {
        return Err(ScoringError::EmptyReferences);
    }
    let ref_keys: Vec<usize> = refs.keys().copied().collect();
    let hyp_keys: Vec<usize> = hyps.keys().copied().collect();
    let arity = ref_keys.len().max(hyp_keys.len());
    let empty: Vec<String> = Vec::new();
    let ref_at = |r: usize| ref_keys.get(r).map_or(&empty, |k| &refs[k]);
    let hyp_at = |h: usize| hyp_keys.get(h).map_or(&empty, |k| &hyps[k]);

    let pair: Vec<Vec<EditCounts>> = (0..arity)
        .map(|h| (0..arity).map(|r| edit_distance(ref_at(r), hyp_at(h))).collect())
        .collect();
    let cost: Vec<Vec<i64>> = pair
        .iter()
        .map(|row| row.iter().map(|c| c.errors() as i64).collect())
        .collect();

    let matched = if arity <= EXHAUSTIVE_ARITY {
        assignment::exhaustive(&cost)
    } else {
        assignment::hungarian(&cost)
    };

    let mut counts = EditCounts::default();
    let mut map = BTreeMap::new();
    for (h, &r) in matched.iter().enumerate() {
        counts += pair[h][r];
        if let Some(&hk) = hyp_keys.get(h) {
            map.insert(hk, ref_keys.get(r).copied());
        }
    }
    let words = refs.values().map(Vec::len).sum();
    let mut report = ScoreReport::from_counts(counts, words);
    report.assignment = map;
    Ok(report)
}

/// WER in fixed order: hypothesis stream `i` is compared with the `i`-th
/// reference speaker, extra streams on either side against nothing.
pub fn fixed_order_wer(refs: &SpeakerSetTranscript, hyps: &SpeakerSetTranscript) -> Result<ScoreReport> {
    if refs.is_empty() {
        return Err(ScoringError::EmptyReferences);
    }
    let ref_keys: Vec<usize> = refs.keys().copied().collect();
    let hyp_keys: Vec<usize> = hyps.keys().copied().collect();
    let empty: Vec<String> = Vec::new();
    let mut counts = EditCounts::default();
    let mut map = BTreeMap::new();
    for i in 0..ref_keys.len().max(hyp_keys.len()) {
        let r = ref_keys.get(i).map_or(&empty, |k| &refs[k]);
        let h = hyp_keys.get(i).map_or(&empty, |k| &hyps[k]);
        counts += edit_distance(r, h);
        if let Some(&hk) = hyp_keys.get(i) {
            map.insert(hk, ref_keys.get(i).copied());
        }
    }
    let words = refs.values().map(Vec::len).sum();
    let mut report = ScoreReport::from_counts(counts, words);
    report.assignment = map;
    Ok(report)
}

/// Optimistic score against the `k` reference speakers that give the lowest
/// WER, ties going to fewer errors and then to the earlier subset.
pub fn oracle_k_wer(refs: &SpeakerSetTranscript, hyps: &SpeakerSetTranscript, k: usize) -> Result<ScoreReport> {
    if refs.is_empty() {
        return Err(ScoringError::EmptyReferences);
    }
    if k == 0 || k > refs.len() {
        return Err(ScoringError::BadSubsetSize {
            k,
            available: refs.len(),
        });
    }
    let mut best: Option<ScoreReport> = None;
    for subset in refs.keys().copied().combinations(k) {
        let chosen: SpeakerSetTranscript = subset.iter().map(|s| (*s, refs[s].clone())).collect();
        let mut report = pit_wer(&chosen, hyps)?;
        report.subset = Some(subset);
        let better = match &best {
            None => true,
            Some(b) => better_rate(&report, b),
        };
        if better {
            best = Some(report);
        }
    }
    let mut best = best.expect("at least one subset");
    best.oracle = true;
    Ok(best)
}

/// Strict "a beats b" on (rate, errors), compared exactly.
fn better_rate(a: &ScoreReport, b: &ScoreReport) -> bool {
    use std::cmp::Ordering::*;
    let (ea, wa) = (a.errors() as u128, a.ref_word_count as u128);
    let (eb, wb) = (b.errors() as u128, b.ref_word_count as u128);
    // a zero-word subset has rate 0 without errors and infinity with them
    let by_rate = match (wa == 0, wb == 0) {
        (false, false) => (ea * wb).cmp(&(eb * wa)),
        (true, true) => (ea > 0).cmp(&(eb > 0)),
        (true, false) if ea == 0 => if eb == 0 { Equal } else { Less },
        (true, false) => Greater,
        (false, true) if eb == 0 => if ea == 0 { Equal } else { Greater },
        (false, true) => Less,
    };
    by_rate.then(ea.cmp(&eb)) == Less
}

/// Per-bucket pooled counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lower: f64,
    pub upper: f64,
    pub utterances: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_word_count: usize,
    pub wer: f64,
}

impl BucketRow {
    pub fn label(&self) -> String {
        format!("{}-{}", (self.lower * 100.0).round(), (self.upper * 100.0).round())
    }
}

/// Pools error counts by overlap fraction. Buckets are lower-inclusive and
/// upper-exclusive except the last, which is closed.
pub fn bucket_report(results: &[(ScoreReport, f64)], edges: &[f64]) -> Result<Vec<BucketRow>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(ScoringError::BadEdges(edges.to_vec()));
    }
    let buckets = edges.len() - 1;
    let mut rows: Vec<BucketRow> = edges
        .windows(2)
        .map(|w| BucketRow {
            lower: w[0],
            upper: w[1],
            utterances: 0,
            substitutions: 0,
            insertions: 0,
            deletions: 0,
            ref_word_count: 0,
            wer: 0.0,
        })
        .collect();
    for (report, fraction) in results {
        let f = *fraction;
        if !(f >= edges[0] && f <= edges[buckets]) {
            return Err(ScoringError::FractionOutOfRange(f));
        }
        let idx = edges[1..buckets].iter().take_while(|&&e| f >= e).count();
        let row = &mut rows[idx];
        row.utterances += 1;
        row.substitutions += report.substitutions;
        row.insertions += report.insertions;
        row.deletions += report.deletions;
        row.ref_word_count += report.ref_word_count;
    }
    for row in &mut rows {
        row.wer = rate(row.substitutions + row.insertions + row.deletions, row.ref_word_count);
    }
    Ok(rows)
}

/// Sums per-utterance reports into one corpus-level report.
pub fn pool<'a>(reports: impl IntoIterator<Item = &'a ScoreReport>) -> ScoreReport {
    let mut counts = EditCounts::default();
    let mut words = 0;
    let mut oracle = false;
    for r in reports {
        counts += r.counts();
        words += r.ref_word_count;
        oracle |= r.oracle;
    }
    let mut report = ScoreReport::from_counts(counts, words);
    report.oracle = oracle;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(streams: &[(usize, &[&str])]) -> SpeakerSetTranscript {
        streams
            .iter()
            .map(|(k, v)| (*k, v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&["a", "b"], &["a", "b"]), EditCounts::default());
        assert_eq!(
            edit_distance(&["a", "b", "c"], &["a", "x", "c"]),
            EditCounts { substitutions: 1, insertions: 0, deletions: 0 }
        );
        assert_eq!(
            edit_distance::<&str, &str>(&["a", "b"], &[]),
            EditCounts { substitutions: 0, insertions: 0, deletions: 2 }
        );
        assert_eq!(
            edit_distance::<&str, &str>(&[], &["a"]),
            EditCounts { substitutions: 0, insertions: 1, deletions: 0 }
        );
    }

    #[test]
    fn edit_distance_prefers_substitutions_on_ties() {
        // two subs or one del + one ins both cost 2
        assert_eq!(
            edit_distance(&["a", "b"], &["b", "c"]),
            EditCounts { substitutions: 2, insertions: 0, deletions: 0 }
        );
    }

    #[test]
    fn pit_swaps_streams() {
        let refs = set(&[(0, &["a", "b"]), (1, &["x", "y"])]);
        let hyps = set(&[(0, &["x", "y"]), (1, &["a", "b"])]);
        let r = pit_wer(&refs, &hyps).unwrap();
        assert_eq!(r.wer, 0.0);
        assert_eq!(r.assignment[&0], Some(1));
        assert_eq!(r.assignment[&1], Some(0));
    }

    #[test]
    fn pit_empty_hypothesis() {
        let refs = set(&[(0, &["a", "b"])]);
        let r = pit_wer(&refs, &BTreeMap::new()).unwrap();
        assert_eq!(r.deletions, 2);
        assert_eq!(r.wer, 1.0);
        assert!(r.assignment.is_empty());
    }

    #[test]
    fn pit_extra_hypothesis_streams_are_insertions() {
        let refs = set(&[(0, &["a"])]);
        let hyps = set(&[(0, &["a"]), (1, &["q", "r"])]);
        let r = pit_wer(&refs, &hyps).unwrap();
        assert_eq!(r.insertions, 2);
        assert_eq!(r.assignment[&1], None);
    }

    #[test]
    fn pit_rejects_empty_refs() {
        assert_eq!(pit_wer(&BTreeMap::new(), &BTreeMap::new()), Err(ScoringError::EmptyReferences));
    }

    #[test]
    fn fixed_order_does_not_swap() {
        let refs = set(&[(0, &["a", "b"]), (1, &["x", "y"])]);
        let hyps = set(&[(0, &["x", "y"]), (1, &["a", "b"])]);
        assert_eq!(fixed_order_wer(&refs, &hyps).unwrap().substitutions, 4);
    }

    #[test]
    fn oracle_examples() {
        let refs = set(&[(0, &["a", "b"]), (1, &["x", "y", "z"]), (2, &["p"])]);
        let all = oracle_k_wer(&refs, &set(&[(0, &["a"])]), 3).unwrap();
        let pit = pit_wer(&refs, &set(&[(0, &["a"])])).unwrap();
        assert_eq!(all.counts(), pit.counts());
        assert!(all.oracle);

        let hyps = set(&[(0, &["p"]), (1, &["a", "b"])]);
        let r = oracle_k_wer(&refs, &hyps, 2).unwrap();
        assert_eq!(r.wer, 0.0);
        assert_eq!(r.subset, Some(vec![0, 2]));

        let r = oracle_k_wer(&refs, &BTreeMap::new(), 2).unwrap();
        assert_eq!(r.subset, Some(vec![0, 2]));
        assert_eq!(r.deletions, 3);

        assert!(oracle_k_wer(&refs, &hyps, 4).is_err());
        assert!(oracle_k_wer(&refs, &hyps, 0).is_err());
    }

    #[test]
    fn buckets_follow_half_open_convention() {
        let rep = |errs: usize, words: usize| ScoreReport {
            substitutions: errs,
            ref_word_count: words,
            ..Default::default()
        };
        let results = vec![(rep(1, 10), 0.2), (rep(2, 10), 0.19), (rep(0, 5), 1.0), (rep(3, 5), 0.8)];
        let rows = bucket_report(&results, &DEFAULT_BUCKET_EDGES).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(
            rows.iter().map(BucketRow::label).collect::<Vec<_>>(),
            ["0-20", "20-40", "40-60", "60-80", "80-100"]
        );
        assert_eq!(rows[0].utterances, 1);
        assert_eq!(rows[1].utterances, 1);
        assert_eq!(rows[4].utterances, 2);
        assert_eq!(rows[4].wer, 0.3);
        assert!(bucket_report(&results, &[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(bucket_report(&[(rep(0, 1), 1.2)], &DEFAULT_BUCKET_EDGES).is_err());
    }

    #[test]
    fn single_bucket_equals_corpus() {
        let results: Vec<_> = (0..4)
            .map(|i| {
                (
                    ScoreReport {
                        deletions: i,
                        ref_word_count: 4,
                        ..Default::default()
                    },
                    0.5,
                )
            })
            .collect();
        let rows = bucket_report(&results, &DEFAULT_BUCKET_EDGES).unwrap();
        let corpus = pool(results.iter().map(|(r, _)| r));
        assert_eq!(rows[2].wer, corpus.wer);
    }
}
