use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use toggl_core::toy::ablation::{ablation_tsv, plan};
use toggl_core::toy::train::{initial_params, train_from};
use toggl_core::toy::{evaluate, load_checkpoint, run_ablation, save_checkpoint, AblationRow, EvalReport, ToyConfig};

use crate::failure;
use crate::output::{prepare, write_json, write_jsonl, write_text, Table};

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML config; omitted sections keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| failure::config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut node = table;
    for part in parents {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| failure::config(format!("override {key:?}: {part} is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn read_table(path: Option<&Path>) -> anyhow::Result<toml::Table> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| failure::config(format!("config {}: {e}", p.display())))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn from_table(table: toml::Table) -> anyhow::Result<ToyConfig> {
    let config: ToyConfig = toml::Value::Table(table).try_into().context("config")?;
    config.validate()?;
    Ok(config)
}

/// File, then overrides, then the global seed; validated before anything is written.
pub fn load_config(args: &ConfigArgs, seed: Option<u64>) -> anyhow::Result<ToyConfig> {
    let mut table = read_table(args.config.as_deref())?;
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    let mut config = from_table(table)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    Ok(config)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss: Option<f64>,
    final_ctc_loss: Option<f64>,
    final_att_loss: Option<f64>,
    ctc_skipped: usize,
    parameters: usize,
    config_hash: String,
}

pub fn train(args: TrainArgs, out_dir: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let config = load_config(&args.config, seed)?;
    let resolved = toml::to_string(&config).context("rendering resolved config")?;
    let params = initial_params(&config)?;
    let every = (config.train.steps / 20).max(1);
    let outcome = train_from(&config, params, |e| {
        if (e.step + 1) % every == 0 {
            eprintln!("step {:>6}  loss {:.4}", e.step + 1, e.loss);
        }
    })?;

    let out_dir = prepare(out_dir)?;
    save_checkpoint(&out_dir.join("model.ckpt"), &outcome.params, &config)?;
    write_jsonl(&out_dir, "train_log.jsonl", &outcome.log)?;
    write_text(&out_dir, "config.toml", &resolved)?;
    let last = outcome.log.last();
    let summary = TrainSummary {
        steps: outcome.log.len(),
        final_loss: last.map(|e| e.loss),
        final_ctc_loss: last.map(|e| e.ctc_loss),
        final_att_loss: last.map(|e| e.att_loss),
        ctc_skipped: outcome.ctc_skipped,
        parameters: outcome.params.data.len(),
        config_hash: config.hash(),
    };
    write_json(&out_dir, "train_summary.json", &summary)?;
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut table = Table::new(&["steps", "loss", "ctc_loss", "att_loss", "ctc_skipped", "parameters"]);
    table.push(vec![
        summary.steps.to_string(),
        opt(summary.final_loss),
        opt(summary.final_ctc_loss),
        opt(summary.final_att_loss),
        summary.ctc_skipped.to_string(),
        summary.parameters.to_string(),
    ]);
    write_text(&out_dir, "train_summary.tsv", &table.render())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Override an evaluation key, e.g. `--set eval.items_per_condition=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Serialize)]
struct EvalFile<'a> {
    config_hash: String,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(args: EvalArgs, out_dir: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut config = ckpt.config;
    if !args.overrides.is_empty() {
        let mut table = toml::Table::try_from(&config).context("config")?;
        for o in &args.overrides {
            if !o.trim_start().starts_with("eval.") {
                return Err(failure::config(format!("eval accepts only eval.* overrides, got {o:?}")));
            }
            apply_override(&mut table, o)?;
        }
        config = from_table(table)?;
    }
    if let Some(s) = seed {
        config.eval.seed = s;
    }
    config.validate()?;
    let report = evaluate(&ckpt.params, &config)?;

    let out_dir = prepare(out_dir)?;
    write_json(
        &out_dir,
        "eval.json",
        &EvalFile {
            config_hash: config.hash(),
            report: &report,
        },
    )?;
    write_text(&out_dir, "eval.tsv", &report.to_tsv())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Serialize)]
struct AblationFile<'a> {
    config_hash: String,
    rows: &'a [AblationRow],
}

pub fn ablate(args: AblateArgs, out_dir: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let config = load_config(&args.config, seed)?;
    plan(&config)?;
    let out_dir = prepare(out_dir)?;
    let rows = run_ablation(&config, |r| eprintln!("{}: 1-mix {:.3} 2-mix {:.3}", r.label, r.wer_1mix, r.wer_2mix))?;
    write_json(
        &out_dir,
        "ablation.json",
        &AblationFile {
            config_hash: config.hash(),
            rows: &rows,
        },
    )?;
    write_text(&out_dir, "ablation.tsv", &ablation_tsv(&rows))
}
