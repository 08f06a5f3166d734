//! Joint attention/CTC objective with permutation-invariant targets.

use serde::{Deserialize, Serialize};

use super::config::{CtcInfeasible, TrainConfig};
use super::model::ToyModelParams;
use super::{symbol_token, Result};
use crate::codec::PermutationTarget;
use crate::ctc::{ctc_feasible, ctc_nll_and_grad, duplicate_frames, make_ctc_target, CtcError, CtcVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub total: f64,
    /// Mean token cross-entropy of the selected permutation.
    pub att_loss: f64,
    /// CTC negative log-likelihood per target label; zero when skipped.
    pub ctc_loss: f64,
    /// Index into the permutation targets of the selected order.
    pub perm_index: usize,
    pub ctc_skipped: bool,
    /// Gradient of `total` in parameter storage order.
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// `(1 - λ) min_perm CE + λ CTC/|target|`.
///
/// The CTC branch sees the encoder output repeated `duplication_factor`
/// times against the control-free canonical target. With PIT disabled only
/// the canonical target is scored. Ties between permutations keep the
/// earliest.
pub fn loss(params: &ToyModelParams, frames: &[Vec<f64>], targets: &[PermutationTarget], config: &TrainConfig) -> Result<LossOutput> {
    let canonical = targets
        .iter()
        .position(|t| t.canonical)
        .ok_or_else(|| super::ToyError::Config("no canonical permutation target".into()))?;
    let lambda = config.ctc_weight;
    let enc = params.encode(frames)?;
    let mut grad = params.zeros_like();
    let mut d_out = vec![vec![0.0; params.dims.hidden]; enc.frames()];

    let mut att_loss = 0.0;
    let mut perm_index = canonical;
    if lambda < 1.0 {
        let candidates: Vec<usize> = if config.pit_enabled {
            (0..targets.len()).collect()
        } else {
            vec![canonical]
        };
        let mut best = None;
        for i in candidates {
            let ids = params.target_ids(&targets[i].stream)?;
            let cache = params.decode_forward(&enc, &ids);
            if best.as_ref().is_none_or(|(_, b): &(usize, super::model::DecoderCache)| cache.loss < b.loss) {
                best = Some((i, cache));
            }
        }
        let (i, cache) = best.expect("at least one candidate");
        perm_index = i;
        att_loss = cache.loss;
        params.decode_backward(&enc, &cache, 1.0 - lambda, &mut grad, &mut d_out);
    }

    let mut ctc_loss = 0.0;
    let mut ctc_skipped = false;
    if lambda > 0.0 {
        let tokens: Vec<String> = (0..params.vocab).map(symbol_token).collect();
        let target = make_ctc_target(&targets[canonical].stream, &CtcVocab::new(&tokens))?;
        let n = config.duplication_factor;
        let logits = duplicate_frames(&params.ctc_logits(&enc), n)?;
        if ctc_feasible(logits.len(), &target) {
            let (nll, g) = ctc_nll_and_grad(&logits, &target)?;
            let norm = target.len().max(1) as f64;
            ctc_loss = nll / norm;
            let scale = lambda / norm;
            let folded: Vec<Vec<f64>> = g
                .chunks(n)
                .map(|copies| {
                    let mut row = vec![0.0; params.ctc_classes()];
                    for c in copies {
                        for (r, x) in row.iter_mut().zip(c) {
                            *r += scale * x;
                        }
                    }
                    row
                })
                .collect();
            params.ctc_backward(&enc, &folded, &mut grad, &mut d_out);
        } else if config.ctc_infeasible == CtcInfeasible::Error {
            return Err(CtcError::Infeasible {
                frames: logits.len(),
                len: target.len(),
                needed: target.min_frames(),
            }
            .into());
        } else {
            ctc_skipped = true;
        }
    }

    params.encode_backward(&enc, &d_out, &mut grad);
    Ok(LossOutput {
        total: (1.0 - lambda) * att_loss + lambda * ctc_loss,
        att_loss,
        ctc_loss,
        perm_index,
        ctc_skipped,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{enumerate_permutation_targets, DEFAULT_PERMUTATION_CAP};
    use crate::toy::model::ModelDims;
    use crate::toy::task::{render_features, FrameMix, SyntheticTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ModelDims, SyntheticTask) {
        let dims = ModelDims {
            hidden: 5,
            embed: 4,
            subsample: 2,
            context: 1,
            location_width: 1,
        };
        let task = SyntheticTask {
            vocab_size: 4,
            feature_dim: 3,
            frames_per_symbol: 2,
            max_speakers: 2,
            min_symbols: 1,
            max_symbols: 3,
            ..Default::default()
        };
        (dims, task)
    }

    fn config(lambda: f64, pit: bool) -> TrainConfig {
        TrainConfig {
            ctc_weight: lambda,
            pit_enabled: pit,
            duplication_factor: 2,
            ..Default::default()
        }
    }

    /// Max relative error between analytic and central-difference gradients.
    fn check(params: &ToyModelParams, frames: &[Vec<f64>], targets: &[PermutationTarget], cfg: &TrainConfig) -> f64 {
        let out = loss(params, frames, targets, cfg).unwrap();
        let mut p = params.clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.data.len() {
            let x = p.data[i];
            p.data[i] = x + h;
            let up = loss(&p, frames, targets, cfg).unwrap().total;
            p.data[i] = x - h;
            let down = loss(&p, frames, targets, cfg).unwrap().total;
            p.data[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let denom = out.grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((out.grad[i] - numeric).abs() / denom);
        }
        worst
    }

    fn instance(seed: u64) -> (ToyModelParams, Vec<Vec<f64>>, Vec<PermutationTarget>) {
        let (dims, task) = tiny();
        let params = ToyModelParams::init(&dims, &task, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let item = task.sample_item(2, &mut rng).unwrap();
        let targets = enumerate_permutation_targets(&item.transcripts, DEFAULT_PERMUTATION_CAP).unwrap();
        (params, item.frames, targets)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, lambda, pit) in [(1, 0.3, true), (2, 0.0, false), (3, 1.0, true), (4, 0.5, false)] {
            let (params, frames, targets) = instance(seed);
            let err = check(&params, &frames, &targets, &config(lambda, pit));
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn endpoints_select_branches() {
        let (params, frames, targets) = instance(5);
        let att = loss(&params, &frames, &targets, &config(0.0, true)).unwrap();
        assert_eq!(att.total, att.att_loss);
        assert_eq!(att.ctc_loss, 0.0);
        let ctc = loss(&params, &frames, &targets, &config(1.0, true)).unwrap();
        assert_eq!(ctc.total, ctc.ctc_loss);
        assert_eq!(ctc.att_loss, 0.0);
    }

    #[test]
    fn equal_transcripts_tie_to_first_permutation() {
        let (dims, task) = tiny();
        let params = ToyModelParams::init(&dims, &task, 0).unwrap();
        let item = render_features(&task, &[vec![1, 2], vec![1, 2]], &FrameMix::aligned(2), 0).unwrap();
        let targets = enumerate_permutation_targets(&item.transcripts, 4).unwrap();
        assert_eq!(targets[0].stream, targets[1].stream);
        let out = loss(&params, &item.frames, &targets, &config(0.3, true)).unwrap();
        assert_eq!(out.perm_index, 0);
    }

    #[test]
    fn pit_loss_is_invariant_to_input_order() {
        let (dims, task) = tiny();
        let params = ToyModelParams::init(&dims, &task, 8).unwrap();
        let mix = FrameMix {
            offsets: vec![0, 1],
            gains_db: vec![0.0, 0.0],
        };
        let a = render_features(&task, &[vec![0, 3], vec![2, 1, 1]], &mix, 4).unwrap();
        let mut swapped = a.transcripts.clone();
        swapped.reverse();
        let ta = enumerate_permutation_targets(&a.transcripts, 4).unwrap();
        let tb = enumerate_permutation_targets(&swapped, 4).unwrap();
        let la = loss(&params, &a.frames, &ta, &config(0.3, true)).unwrap().total;
        let lb = loss(&params, &a.frames, &tb, &config(0.3, true)).unwrap().total;
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn infeasible_ctc_errors_or_skips() {
        let (dims, task) = tiny();
        let params = ToyModelParams::init(&dims, &task, 0).unwrap();
        // three encoder frames, four labels
        let mix = FrameMix {
            offsets: vec![0, 1],
            gains_db: vec![0.0, 0.0],
        };
        let item = render_features(&task, &[vec![0, 1], vec![2, 3]], &mix, 0).unwrap();
        let targets = enumerate_permutation_targets(&item.transcripts, 4).unwrap();
        let mut cfg = config(0.3, true);
        cfg.duplication_factor = 1;
        cfg.ctc_infeasible = CtcInfeasible::Error;
        assert!(loss(&params, &item.frames, &targets, &cfg).is_err());
        cfg.ctc_infeasible = CtcInfeasible::Skip;
        assert!(loss(&params, &item.frames, &targets, &cfg).unwrap().ctc_skipped);
        cfg.duplication_factor = 2;
        assert!(!loss(&params, &item.frames, &targets, &cfg).unwrap().ctc_skipped);
    }
}
