use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use toggl_core::ctc::{ctc_feasible, ctc_forward_lattice, CtcTarget, FrameProbs};

use crate::failure;
use crate::output::{prepare, write_json, write_text, Table};

#[derive(Args, Debug)]
pub struct CtcCheckArgs {
    /// JSON array of per-frame probability rows, blank in column 0.
    #[arg(long)]
    pub probs: PathBuf,
    /// Comma-separated target labels, none of them 0.
    #[arg(long, default_value = "")]
    pub target: String,
    /// Repeat every frame this many times before the forward pass.
    #[arg(long, default_value_t = 1)]
    pub duplicate: usize,
}

#[derive(Serialize)]
struct CtcReport {
    frames: usize,
    vocab: usize,
    duplicate: usize,
    target: Vec<usize>,
    min_frames: usize,
    feasible: bool,
    /// Absent when the target cannot be aligned.
    log_prob: Option<f64>,
}

fn parse_target(text: &str) -> anyhow::Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| failure::config(format!("bad target label {s:?}"))))
        .collect()
}

pub fn run(args: CtcCheckArgs, out_dir: &Path) -> anyhow::Result<()> {
    if args.duplicate == 0 {
        return Err(failure::config("--duplicate must be at least 1"));
    }
    let text = std::fs::read_to_string(&args.probs).with_context(|| format!("reading {}", args.probs.display()))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.probs.display()))?;
    let probs = FrameProbs::new(rows)?.duplicated(args.duplicate)?;
    let target = CtcTarget::new(parse_target(&args.target)?)?;
    let feasible = ctc_feasible(probs.frames(), &target);

    let out_dir = prepare(out_dir)?;
    let mut report = CtcReport {
        frames: probs.frames(),
        vocab: probs.vocab(),
        duplicate: args.duplicate,
        target: target.labels().to_vec(),
        min_frames: target.min_frames(),
        feasible,
        log_prob: None,
    };
    if feasible {
        let (states, alpha) = ctc_forward_lattice(&probs, &target)?;
        let mut header = vec!["t".to_string()];
        header.extend(states.iter().enumerate().map(|(s, l)| format!("s{s}:{l}")));
        let mut table = Table::new(&header);
        for (t, row) in alpha.iter().enumerate() {
            let mut cells = vec![t.to_string()];
            cells.extend(row.iter().map(|a| if a.is_finite() { format!("{a:.6}") } else { "-inf".into() }));
            table.push(cells);
        }
        write_text(&out_dir, "lattice.tsv", &table.render())?;
        report.log_prob = Some(toggl_core::ctc::ctc_forward_logprob(&probs, &target)?);
    }
    write_json(&out_dir, "ctc_check.json", &report)
}
