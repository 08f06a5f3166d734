use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use toggl_core::codec::{self, order_speakers, DecodeMode, TimedTranscript, TogglStream};
use toggl_core::manifest::read_jsonl;

use crate::output::{prepare, write_jsonl, write_text, Table};

/// A stream given either as whitespace-separated text or as a token array.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StreamField {
    Text(String),
    Tokens(Vec<String>),
}

impl StreamField {
    pub fn to_stream(&self) -> TogglStream {
        match self {
            StreamField::Text(t) => t.parse().unwrap_or_default(),
            StreamField::Tokens(ts) => ts.iter().map(|t| t.as_str().into()).collect(),
        }
    }
}

#[derive(Args, Debug)]
pub struct SerializeArgs {
    /// Lines of `{id, speakers: [{speaker, tokens: [{text, start}]}]}`.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptSet {
    id: String,
    speakers: Vec<TimedTranscript>,
}

#[derive(Serialize)]
struct Serialized {
    id: String,
    /// Speaker ids in stream order.
    order: Vec<String>,
    toggl_target: TogglStream,
}

pub fn serialize(args: SerializeArgs, out_dir: &Path) -> anyhow::Result<()> {
    let sets: Vec<TranscriptSet> = read_jsonl(&args.input)?;
    let mut records = Vec::with_capacity(sets.len());
    for set in sets {
        let order = order_speakers(&set.speakers).with_context(|| format!("record {}", set.id))?;
        let stream = codec::serialize(&set.speakers, &order).with_context(|| format!("record {}", set.id))?;
        records.push(Serialized {
            order: order.ordering().iter().map(|&i| set.speakers[i].speaker_id().to_string()).collect(),
            id: set.id,
            toggl_target: stream,
        });
    }
    let out_dir = prepare(out_dir)?;
    write_jsonl(&out_dir, "serialized.jsonl", &records)?;
    let mut table = Table::new(&["id", "speakers", "controls", "toggl_target"]);
    for r in &records {
        table.push(vec![
            r.id.clone(),
            r.order.len().to_string(),
            r.toggl_target.control_count().to_string(),
            r.toggl_target.to_string(),
        ]);
    }
    write_text(&out_dir, "serialized.tsv", &table.render())
}

#[derive(Args, Debug)]
pub struct DeserializeArgs {
    /// Lines of `{id, toggl_target}`; `target` is accepted as an alias.
    #[arg(long)]
    pub input: PathBuf,
    /// Reject streams whose speaker index would drop below zero.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Deserialize)]
struct StreamRecord {
    id: String,
    #[serde(alias = "target")]
    toggl_target: StreamField,
}

#[derive(Serialize)]
struct Deserialized {
    id: String,
    speakers: BTreeMap<usize, Vec<String>>,
}

pub fn deserialize(args: DeserializeArgs, out_dir: &Path) -> anyhow::Result<()> {
    let mode = if args.strict { DecodeMode::Strict } else { DecodeMode::Lenient };
    let input: Vec<StreamRecord> = read_jsonl(&args.input)?;
    let records = input
        .into_iter()
        .map(|r| {
            let speakers = codec::deserialize(&r.toggl_target.to_stream(), mode).with_context(|| format!("record {}", r.id))?;
            Ok(Deserialized { id: r.id, speakers })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let out_dir = prepare(out_dir)?;
    write_jsonl(&out_dir, "deserialized.jsonl", &records)?;
    let mut table = Table::new(&["id", "speaker", "tokens"]);
    for r in &records {
        for (k, tokens) in &r.speakers {
            table.push(vec![r.id.clone(), k.to_string(), tokens.join(" ")]);
        }
    }
    write_text(&out_dir, "deserialized.tsv", &table.render())
}
