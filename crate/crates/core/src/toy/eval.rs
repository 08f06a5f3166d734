//! Held-out scoring per speaker-count condition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ToyConfig;
use super::model::{decode_greedy, DecodeOptions, Decoded, ToyModelParams};
use super::task::{SyntheticTask, ToyItem};
use super::Result;
use crate::codec::{deserialize, DecodeMode};
use crate::mixture::item_rng;
use crate::scoring::{oracle_k_wer, pit_wer, pool, ScoreReport};

type Pick = fn(&ConditionReport) -> &ModeScore;

/// Pooled scores for one decoding mode on one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScore {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_word_count: usize,
    /// Items with zero errors and exactly as many streams as speakers.
    pub exact_match: f64,
    pub mean_control_tokens: f64,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub n_mix: usize,
    pub items: usize,
    /// Staggered decoding scored with permutation-optimal WER.
    pub toggl: ModeScore,
    /// Control tokens masked out, scored against the best single speaker.
    pub no_toggle_oracle1: ModeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conditions: Vec<ConditionReport>,
}

impl EvalReport {
    pub fn condition(&self, n_mix: usize) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.n_mix == n_mix)
    }

    /// One row per system, one column per condition, WER in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("system");
        for c in &self.conditions {
            out.push_str(&format!("\t{}-mix", c.n_mix));
        }
        out.push('\n');
        let rows: [(&str, Pick); 2] = [
            ("toggl", |c| &c.toggl),
            ("no-toggle (oracle-1)*", |c| &c.no_toggle_oracle1),
        ];
        for (name, pick) in rows {
            out.push_str(name);
            for c in &self.conditions {
                out.push_str(&format!("\t{:.1}", 100.0 * pick(c).wer));
            }
            out.push('\n');
        }
        out.push_str("toggl exact match");
        for c in &self.conditions {
            out.push_str(&format!("\t{:.1}", 100.0 * c.toggl.exact_match));
        }
        out.push('\n');
        out
    }
}

/// Held-out items for a condition, independent of training batches.
pub fn held_out_items(task: &SyntheticTask, n_mix: usize, count: usize, seed: u64) -> Result<Vec<ToyItem>> {
    let stream_seed = seed.wrapping_add(1_000_003 * n_mix as u64);
    (0..count as u64)
        .map(|i| task.sample_item(n_mix, &mut item_rng(stream_seed, i)))
        .collect()
}

/// Reference streams of an item in first-onset order.
pub fn references(item: &ToyItem) -> Result<BTreeMap<usize, Vec<String>>> {
    Ok(deserialize(&item.target, DecodeMode::Strict)?)
}

/// Scores decoder outputs against item references. `oracle_k` switches
/// from permutation-optimal WER to the best `k`-speaker subset.
pub fn score_outputs(items: &[ToyItem], outputs: &[Decoded], oracle_k: Option<usize>) -> Result<ModeScore> {
    let mut reports: Vec<ScoreReport> = Vec::with_capacity(items.len());
    let mut exact = 0;
    let mut controls = 0;
    let mut truncated = 0;
    for (item, out) in items.iter().zip(outputs) {
        let refs = references(item)?;
        let report = match oracle_k {
            Some(k) => oracle_k_wer(&refs, &out.speakers, k.min(refs.len()))?,
            None => pit_wer(&refs, &out.speakers)?,
        };
        if report.errors() == 0 && out.speakers.len() == refs.len() {
            exact += 1;
        }
        controls += out.stream.control_count();
        truncated += usize::from(out.truncated);
        reports.push(report);
    }
    let pooled = pool(&reports);
    let n = items.len().max(1) as f64;
    Ok(ModeScore {
        wer: pooled.wer,
        substitutions: pooled.substitutions,
        insertions: pooled.insertions,
        deletions: pooled.deletions,
        ref_word_count: pooled.ref_word_count,
        exact_match: exact as f64 / n,
        mean_control_tokens: controls as f64 / n,
        truncated,
    })
}

/// Decodes every item with the given options.
pub fn decode_items(params: &ToyModelParams, items: &[ToyItem], opts: &DecodeOptions) -> Result<Vec<Decoded>> {
    items.iter().map(|i| decode_greedy(params, &i.frames, opts)).collect()
}

/// Scores `params` on fresh held-out sets for every configured condition.
pub fn evaluate(params: &ToyModelParams, config: &ToyConfig) -> Result<EvalReport> {
    let ec = &config.eval;
    let conditions = ec
        .conditions
        .iter()
        .map(|&n| {
            let items = held_out_items(&config.task, n, ec.items_per_condition, ec.seed)?;
            let staggered = decode_items(params, &items, &DecodeOptions::for_speakers(config.task.max_speakers, ec.max_len))?;
            let flat = decode_items(params, &items, &DecodeOptions::without_controls(ec.max_len))?;
            Ok(ConditionReport {
                n_mix: n,
                items: items.len(),
                toggl: score_outputs(&items, &staggered, None)?,
                no_toggle_oracle1: score_outputs(&items, &flat, Some(1))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { conditions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TogglStream;

    fn replay(item: &ToyItem) -> Decoded {
        Decoded {
            stream: item.target.clone(),
            truncated: false,
            speakers: deserialize(&item.target, DecodeMode::Lenient).unwrap(),
        }
    }

    fn empty() -> Decoded {
        Decoded {
            stream: TogglStream::default(),
            truncated: false,
            speakers: BTreeMap::new(),
        }
    }

    #[test]
    fn oracle_replay_scores_zero() {
        let task = SyntheticTask::default();
        for n in 1..=3 {
            let items = held_out_items(&task, n, 20, 5).unwrap();
            let outs: Vec<Decoded> = items.iter().map(replay).collect();
            let s = score_outputs(&items, &outs, None).unwrap();
            assert_eq!(s.wer, 0.0);
            assert_eq!(s.exact_match, 1.0);
        }
    }

    #[test]
    fn empty_output_scores_one() {
        let task = SyntheticTask::default();
        let items = held_out_items(&task, 2, 20, 5).unwrap();
        let outs: Vec<Decoded> = items.iter().map(|_| empty()).collect();
        let s = score_outputs(&items, &outs, None).unwrap();
        assert_eq!(s.wer, 1.0);
        assert_eq!(s.exact_match, 0.0);
    }

    #[test]
    fn held_out_sets_are_reproducible_and_distinct_per_condition() {
        let task = SyntheticTask::default();
        let a = held_out_items(&task, 2, 5, 1).unwrap();
        assert_eq!(a, held_out_items(&task, 2, 5, 1).unwrap());
        assert!(held_out_items(&task, 3, 5, 1).unwrap().iter().all(|i| i.speakers() == 3));
    }

    #[test]
    fn untrained_model_report_has_every_condition() {
        let mut config = ToyConfig::default();
        config.eval.items_per_condition = 3;
        config.model.hidden = 6;
        config.model.embed = 6;
        let params = crate::toy::train::initial_params(&config).unwrap();
        let report = evaluate(&params, &config).unwrap();
        assert_eq!(report.conditions.len(), 3);
        assert_eq!(report.to_tsv().lines().count(), 4);
    }
}
