//! Cumulative knob-removal grid.
//!
//! Each row names the training features it removes from the full recipe
//! (PIT, 3-speaker data, CTC with frame duplication). All rows share the
//! data and initialization seeds so a row differs from its parent only by
//! the removed knobs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{CtcInfeasible, ToyConfig};
use super::eval::evaluate;
use super::train::train;
use super::{Result, ToyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKnob {
    Pit,
    CtcEnhancement,
    Ctc,
    ThreeMixData,
}

impl AblationKnob {
    pub fn key(self) -> &'static str {
        match self {
            AblationKnob::Pit => "pit",
            AblationKnob::CtcEnhancement => "ctc_enhancement",
            AblationKnob::Ctc => "ctc",
            AblationKnob::ThreeMixData => "three_mix_data",
        }
    }
}

impl fmt::Display for AblationKnob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AblationKnob {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self> {
        [
            AblationKnob::Pit,
            AblationKnob::CtcEnhancement,
            AblationKnob::Ctc,
            AblationKnob::ThreeMixData,
        ]
        .into_iter()
        .find(|k| k.key() == s)
        .ok_or_else(|| ToyError::Config(format!("unknown ablation knob {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Knobs removed in each row; the empty row is the full recipe.
    pub rows: Vec<Vec<String>>,
    /// Weight of 3-speaker items in the full recipe's training mix.
    pub three_mix_weight: f64,
    /// Training steps per row; 0 uses the train section's value.
    pub steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let row = |ks: &[&str]| ks.iter().map(|k| k.to_string()).collect();
        Self {
            rows: vec![
                row(&[]),
                row(&["pit"]),
                row(&["pit", "ctc_enhancement"]),
                row(&["pit", "ctc"]),
                row(&["pit", "ctc", "three_mix_data"]),
            ],
            three_mix_weight: 1.0,
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub removed: Vec<AblationKnob>,
    pub wer_1mix: f64,
    pub wer_2mix: f64,
    pub exact_2mix: f64,
    pub ctc_skipped: usize,
}

fn label(removed: &[AblationKnob]) -> String {
    if removed.is_empty() {
        return "full".into();
    }
    removed.iter().map(|k| format!("-{k}")).collect::<Vec<_>>().join(" ")
}

/// Parses every row and builds its training config; fails before any
/// training if a key is unknown or a derived config is invalid.
pub fn plan(config: &ToyConfig) -> Result<Vec<(Vec<AblationKnob>, ToyConfig)>> {
    let ab = &config.ablation;
    if !(ab.three_mix_weight.is_finite() && ab.three_mix_weight > 0.0) {
        return Err(ToyError::Config("three_mix_weight must be positive".into()));
    }
    ab.rows
        .iter()
        .map(|keys| {
            let removed = keys.iter().map(|k| k.parse()).collect::<Result<Vec<AblationKnob>>>()?;
            let cfg = row_config(config, &removed);
            cfg.validate()?;
            Ok((removed, cfg))
        })
        .collect()
}

/// Full recipe minus `removed`.
pub fn row_config(base: &ToyConfig, removed: &[AblationKnob]) -> ToyConfig {
    let mut cfg = base.clone();
    let tc = &mut cfg.train;
    tc.mix_weights.resize(2, 0.0);
    if !removed.contains(&AblationKnob::ThreeMixData) {
        tc.mix_weights.push(base.ablation.three_mix_weight);
    }
    tc.pit_enabled = !removed.contains(&AblationKnob::Pit);
    tc.duplication_factor = tc.max_train_speakers().max(1);
    if removed.contains(&AblationKnob::CtcEnhancement) {
        tc.duplication_factor = 1;
        tc.ctc_infeasible = CtcInfeasible::Skip;
    }
    if removed.contains(&AblationKnob::Ctc) {
        tc.ctc_weight = 0.0;
    }
    if base.ablation.steps > 0 {
        tc.steps = base.ablation.steps;
    }
    cfg.eval.conditions = vec![1, 2];
    cfg
}

/// Trains and scores every row in order.
pub fn run_ablation<F: FnMut(&AblationRow)>(config: &ToyConfig, mut on_row: F) -> Result<Vec<AblationRow>> {
    let planned = plan(config)?;
    let mut rows = Vec::with_capacity(planned.len());
    for (removed, cfg) in planned {
        let outcome = train(&cfg)?;
        let report = evaluate(&outcome.params, &cfg)?;
        let pick = |n: usize| report.condition(n).map(|c| c.toggl.clone());
        let one = pick(1).expect("1-mix evaluated");
        let two = pick(2).expect("2-mix evaluated");
        let row = AblationRow {
            label: label(&removed),
            removed,
            wer_1mix: one.wer,
            wer_2mix: two.wer,
            exact_2mix: two.exact_match,
            ctc_skipped: outcome.ctc_skipped,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Rows as aligned-width TSV, WER in percent.
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}\t1-mix\t2-mix\n", "model");
    for r in rows {
        out.push_str(&format!("{:<width$}\t{:.1}\t{:.1}\n", r.label, 100.0 * r.wer_1mix, 100.0 * r.wer_2mix));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_five_rows() {
        let planned = plan(&ToyConfig::default()).unwrap();
        assert_eq!(planned.len(), 5);
        let (_, full) = &planned[0];
        assert!(full.train.pit_enabled);
        assert_eq!(full.train.mix_weights.len(), 3);
        assert_eq!(full.train.duplication_factor, 3);
        let (_, no_enh) = &planned[2];
        assert!(!no_enh.train.pit_enabled);
        assert_eq!(no_enh.train.duplication_factor, 1);
        let (_, no_ctc) = &planned[3];
        assert_eq!(no_ctc.train.ctc_weight, 0.0);
        let (_, no_three) = &planned[4];
        assert_eq!(no_three.train.max_train_speakers(), 2);
    }

    #[test]
    fn unknown_knob_fails_planning() {
        let mut c = ToyConfig::default();
        c.ablation.rows.push(vec!["dropout".into()]);
        assert!(matches!(plan(&c), Err(ToyError::Config(_))));
    }

    #[test]
    fn labels_and_table() {
        assert_eq!(label(&[]), "full");
        assert_eq!(label(&[AblationKnob::Pit, AblationKnob::Ctc]), "-pit -ctc");
        let rows = vec![AblationRow {
            label: "full".into(),
            removed: vec![],
            wer_1mix: 0.1,
            wer_2mix: 0.25,
            exact_2mix: 0.5,
            ctc_skipped: 0,
        }];
        assert_eq!(ablation_tsv(&rows), "model\t1-mix\t2-mix\nfull \t10.0\t25.0\n");
    }

    #[test]
    fn knob_keys_round_trip() {
        for k in [AblationKnob::Pit, AblationKnob::CtcEnhancement, AblationKnob::Ctc, AblationKnob::ThreeMixData] {
            assert_eq!(k.key().parse::<AblationKnob>().unwrap(), k);
        }
    }
}
