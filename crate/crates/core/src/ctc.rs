//! Connectionist temporal classification: forward log-likelihood, gradients,
//! feasibility, and frame duplication for multi-speaker targets.
//!
//! All recursions run in log space over the blank-interleaved target
//! `[blank, l1, blank, l2, ..., blank]`. The blank label is always index 0.

use std::collections::HashMap;

use thiserror::Error;

use crate::codec::{strip_control_tokens, TogglStream};

pub const BLANK: usize = 0;

/// Probabilities below this are raised to it before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

pub type Result<T> = std::result::Result<T, CtcError>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CtcError {
    #[error("duplication factor must be at least 1")]
    ZeroDuplication,
    #[error("frame grid is empty or ragged")]
    BadShape,
    #[error("frame {frame} has an invalid probability row (sum {sum})")]
    BadRow { frame: usize, sum: f64 },
    #[error("label {label} at position {position} is blank or outside the vocabulary")]
    BadLabel { position: usize, label: usize },
    #[error("target of length {len} needs at least {needed} frames, got {frames}")]
    Infeasible {
        frames: usize,
        len: usize,
        needed: usize,
    },
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
}

/// A `T x V` grid of per-frame posteriors, blank at column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameProbs {
    frames: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl FrameProbs {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let frames = rows.len();
        let vocab = rows.first().map_or(0, Vec::len);
        if vocab == 0 || rows.iter().any(|r| r.len() != vocab) {
            return Err(CtcError::BadShape);
        }
        for (frame, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(CtcError::BadRow { frame, sum });
            }
        }
        Ok(Self {
            frames,
            vocab,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.vocab + k]
    }

    /// Floored natural-log rows.
    pub fn log_rows(&self) -> Vec<Vec<f64>> {
        (0..self.frames)
            .map(|t| self.row(t).iter().map(|p| p.max(PROB_FLOOR).ln()).collect())
            .collect()
    }

    /// Each frame repeated `n` times in place.
    pub fn duplicated(&self, n: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.frames).map(|t| self.row(t).to_vec()).collect();
        let rows = duplicate_frames(&rows, n)?;
        Ok(Self {
            frames: rows.len(),
            vocab: self.vocab,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

/// Label indices for CTC, never containing the blank.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CtcTarget {
    labels: Vec<usize>,
}

impl CtcTarget {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if let Some(position) = labels.iter().position(|&l| l == BLANK) {
            return Err(CtcError::BadLabel { position, label: BLANK });
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shortest frame count admitting an alignment: one frame per label plus a
    /// separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.labels.len() + self.labels.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Repeat every frame `n` times consecutively: `[e1, e2]` with `n = 2`
/// becomes `[e1, e1, e2, e2]`.
pub fn duplicate_frames<T: Clone>(frames: &[T], n: usize) -> Result<Vec<T>> {
    if n == 0 {
        return Err(CtcError::ZeroDuplication);
    }
    Ok(frames
        .iter()
        .flat_map(|f| std::iter::repeat_n(f, n))
        .cloned()
        .collect())
}

pub fn ctc_feasible(frames: usize, target: &CtcTarget) -> bool {
    frames >= target.min_frames()
}

fn check_target(frames: usize, vocab: usize, target: &CtcTarget) -> Result<()> {
    if let Some(position) = target.labels.iter().position(|&l| l >= vocab) {
        return Err(CtcError::BadLabel {
            position,
            label: target.labels[position],
        });
    }
    if !ctc_feasible(frames, target) {
        return Err(CtcError::Infeasible {
            frames,
            len: target.len(),
            needed: target.min_frames(),
        });
    }
    Ok(())
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn expanded(target: &CtcTarget) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in &target.labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Whether the forward recursion may skip from `s - 2` into `s`.
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]` in log space. `alpha[t][s]` includes the
/// emission at frame `t`.
fn forward(log_probs: &[Vec<f64>], ext: &[usize]) -> Vec<Vec<f64>> {
    let frames = log_probs.len();
    let states = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; states]; frames];
    alpha[0][0] = log_probs[0][ext[0]];
    if states > 1 {
        alpha[0][1] = log_probs[0][ext[1]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + log_probs[t][ext[s]];
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`: log probability of emitting frames
/// `t+1..` given state `s` at frame `t` (emission at `t` excluded).
fn backward(log_probs: &[Vec<f64>], ext: &[usize]) -> Vec<Vec<f64>> {
    let frames = log_probs.len();
    let states = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; states]; frames];
    beta[frames - 1][states - 1] = 0.0;
    if states > 1 {
        beta[frames - 1][states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[t + 1][s] + log_probs[t + 1][ext[s]];
            if s + 1 < states {
                acc = log_add(acc, beta[t + 1][s + 1] + log_probs[t + 1][ext[s + 1]]);
            }
            if s + 2 < states && can_skip(ext, s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2] + log_probs[t + 1][ext[s + 2]]);
            }
            beta[t][s] = acc;
        }
    }
    beta
}

fn total_from_alpha(alpha: &[Vec<f64>]) -> f64 {
    let last = &alpha[alpha.len() - 1];
    let states = last.len();
    if states == 1 {
        last[0]
    } else {
        log_add(last[states - 1], last[states - 2])
    }
}

/// Log probability of `target` summed over every alignment that collapses to
/// it.
pub fn ctc_forward_logprob(probs: &FrameProbs, target: &CtcTarget) -> Result<f64> {
    check_target(probs.frames, probs.vocab, target)?;
    let log_probs = probs.log_rows();
    let alpha = forward(&log_probs, &expanded(target));
    Ok(total_from_alpha(&alpha))
}

/// The full forward lattice (frames x expanded states) for inspection, along
/// with the expanded label sequence.
pub fn ctc_forward_lattice(probs: &FrameProbs, target: &CtcTarget) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    check_target(probs.frames, probs.vocab, target)?;
    let ext = expanded(target);
    let alpha = forward(&probs.log_rows(), &ext);
    Ok((ext, alpha))
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// Negative log-likelihood of `target` under softmax(`logits`) and its
/// gradient with respect to the logits.
pub fn ctc_nll_and_grad(logits: &[Vec<f64>], target: &CtcTarget) -> Result<(f64, Vec<Vec<f64>>)> {
    let frames = logits.len();
    let vocab = logits.first().map_or(0, Vec::len);
    if frames == 0 || vocab == 0 || logits.iter().any(|r| r.len() != vocab) {
        return Err(CtcError::BadShape);
    }
    check_target(frames, vocab, target)?;
    let log_probs = log_softmax_rows(logits);
    let ext = expanded(target);
    let alpha = forward(&log_probs, &ext);
    let beta = backward(&log_probs, &ext);
    let total = total_from_alpha(&alpha);

    let mut grad = vec![vec![0.0; vocab]; frames];
    for t in 0..frames {
        // posterior occupancy of each label at frame t
        let mut occ = vec![f64::NEG_INFINITY; vocab];
        for (s, &label) in ext.iter().enumerate() {
            occ[label] = log_add(occ[label], alpha[t][s] + beta[t][s]);
        }
        for k in 0..vocab {
            grad[t][k] = log_probs[t][k].exp() - (occ[k] - total).exp();
        }
    }
    Ok((-total, grad))
}

/// Lexical-token to CTC-label mapping; label 0 is reserved for the blank.
#[derive(Debug, Clone, Default)]
pub struct CtcVocab {
    index: HashMap<String, usize>,
}

impl CtcVocab {
    /// Assigns labels `1..=n` in the given order.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_ref().to_string(), i + 1))
            .collect();
        Self { index }
    }

    pub fn label(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Number of CTC classes including the blank.
    pub fn classes(&self) -> usize {
        self.index.len() + 1
    }
}

/// Control tokens are dropped; only lexical tokens are scored by CTC.
pub fn make_ctc_target(stream: &TogglStream, vocab: &CtcVocab) -> Result<CtcTarget> {
    let labels = strip_control_tokens(stream)
        .into_iter()
        .map(|t| vocab.label(&t).ok_or(CtcError::OutOfVocabulary(t)))
        .collect::<Result<Vec<_>>>()?;
    CtcTarget::new(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> FrameProbs {
        FrameProbs::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn target(labels: &[usize]) -> CtcTarget {
        CtcTarget::new(labels.to_vec()).unwrap()
    }

    #[test]
    fn duplicate_examples() {
        assert_eq!(duplicate_frames(&["e1", "e2"], 3).unwrap(), ["e1", "e1", "e1", "e2", "e2", "e2"]);
        assert_eq!(duplicate_frames(&[1, 2, 3], 1).unwrap(), [1, 2, 3]);
        assert_eq!(duplicate_frames(&[0u8; 7], 2).unwrap().len(), 14);
        assert_eq!(duplicate_frames(&[1], 0), Err(CtcError::ZeroDuplication));
    }

    #[test]
    fn feasibility_examples() {
        assert!(ctc_feasible(3, &target(&[1, 2, 3])));
        assert!(!ctc_feasible(2, &target(&[1, 1])));
        let dup = duplicate_frames(&[0, 1], 2).unwrap();
        assert!(ctc_feasible(dup.len(), &target(&[1, 1])));
        assert!(ctc_feasible(0, &target(&[])));
    }

    #[test]
    fn single_frame_single_label() {
        let p = grid(&[&[0.4, 0.6]]);
        let lp = ctc_forward_logprob(&p, &target(&[1])).unwrap();
        assert!((lp - 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label() {
        let p = grid(&[&[0.4, 0.6], &[0.4, 0.6]]);
        let lp = ctc_forward_logprob(&p, &target(&[1])).unwrap();
        assert!((lp - 0.84f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let p = grid(&[&[0.5, 0.5], &[0.25, 0.75]]);
        let lp = ctc_forward_logprob(&p, &target(&[])).unwrap();
        assert!((lp - (0.125f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_an_error() {
        let p = grid(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(
            ctc_forward_logprob(&p, &target(&[1, 1])),
            Err(CtcError::Infeasible { needed: 3, .. })
        ));
        let dup = p.duplicated(2).unwrap();
        assert!(ctc_forward_logprob(&dup, &target(&[1, 1])).unwrap().is_finite());
    }

    #[test]
    fn rejects_bad_grids_and_labels() {
        assert!(FrameProbs::new(vec![vec![0.5, 0.6]]).is_err());
        assert!(FrameProbs::new(vec![vec![1.5, -0.5]]).is_err());
        assert!(FrameProbs::new(vec![]).is_err());
        assert!(CtcTarget::new(vec![1, 0]).is_err());
        let p = grid(&[&[0.5, 0.5]]);
        assert!(matches!(ctc_forward_logprob(&p, &target(&[2])), Err(CtcError::BadLabel { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = vec![
            vec![0.3, -0.2, 0.9],
            vec![-1.0, 0.5, 0.1],
            vec![0.2, 0.2, -0.7],
            vec![1.1, -0.4, 0.0],
        ];
        let tgt = target(&[1, 2]);
        let (_, grad) = ctc_nll_and_grad(&logits, &tgt).unwrap();
        let h = 1e-6;
        for t in 0..logits.len() {
            for k in 0..3 {
                let mut up = logits.clone();
                up[t][k] += h;
                let mut dn = logits.clone();
                dn[t][k] -= h;
                let fd = (ctc_nll_and_grad(&up, &tgt).unwrap().0 - ctc_nll_and_grad(&dn, &tgt).unwrap().0) / (2.0 * h);
                assert!((fd - grad[t][k]).abs() < 1e-7, "t={t} k={k} fd={fd} an={}", grad[t][k]);
            }
        }
    }

    #[test]
    fn ctc_target_from_stream() {
        let vocab = CtcVocab::new(&["a", "x"]);
        let t = make_ctc_target(&"a [NEXT] x".parse().unwrap(), &vocab).unwrap();
        assert_eq!(t.labels(), &[1, 2]);
        let t = make_ctc_target(&"[NEXT] [PREV]".parse().unwrap(), &vocab).unwrap();
        assert!(t.is_empty());
        assert!(ctc_feasible(1, &t));
        assert_eq!(
            make_ctc_target(&"a q".parse().unwrap(), &vocab),
            Err(CtcError::OutOfVocabulary("q".into()))
        );
    }

    #[test]
    fn log_add_handles_infinities() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.0), -1.0);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
