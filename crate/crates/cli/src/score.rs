use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use toggl_core::codec::{deserialize, DecodeMode};
use toggl_core::manifest::read_jsonl;
use toggl_core::scoring::{
    bucket_report, fixed_order_wer, oracle_k_wer, pit_wer, pool, BucketRow, ScoreReport, SpeakerSetTranscript,
    DEFAULT_BUCKET_EDGES,
};

use crate::codec_cmd::StreamField;
use crate::failure;
use crate::output::{pct, prepare, write_json, write_text, Table};

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Reference manifest.
    #[arg(long)]
    pub refs: PathBuf,
    /// Hypothesis manifest keyed by the same ids.
    #[arg(long)]
    pub hyps: PathBuf,
    /// Score against the best `k` reference speakers only (optimistic).
    #[arg(long, conflicts_with = "fixed_order")]
    pub oracle_k: Option<usize>,
    /// Pool errors by overlap fraction; optional comma-separated edges in [0, 1].
    #[arg(long, num_args = 0..=1, default_missing_value = "default", value_name = "EDGES")]
    pub buckets: Option<String>,
    /// Reject staggered streams whose speaker index drops below zero.
    #[arg(long)]
    pub strict_decode: bool,
    /// Pair the i-th hypothesis stream with the i-th reference speaker.
    #[arg(long)]
    pub fixed_order: bool,
}

/// One utterance: per-speaker streams, or a staggered stream to be decoded.
#[derive(Debug, Deserialize)]
struct Record {
    id: String,
    #[serde(default)]
    speakers: Option<Vec<StreamField>>,
    #[serde(default, alias = "target")]
    toggl_target: Option<StreamField>,
    #[serde(default)]
    overlap_fraction: Option<f64>,
}

impl Record {
    fn speaker_set(&self, mode: DecodeMode) -> anyhow::Result<SpeakerSetTranscript> {
        match (&self.speakers, &self.toggl_target) {
            (Some(streams), _) => Ok(streams
                .iter()
                .enumerate()
                .map(|(k, s)| (k, s.to_stream().items().iter().map(|t| t.as_str().to_string()).collect()))
                .collect()),
            (None, Some(stream)) => {
                deserialize(&stream.to_stream(), mode).with_context(|| format!("decoding stream of {}", self.id))
            }
            (None, None) => Err(failure::data(format!("record {} has neither speakers nor toggl_target", self.id))),
        }
    }
}

#[derive(Serialize)]
struct UtteranceScore {
    id: String,
    #[serde(flatten)]
    report: ScoreReport,
}

#[derive(Serialize)]
struct ScoreFile {
    mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_k: Option<usize>,
    corpus: ScoreReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    buckets: Option<Vec<BucketRow>>,
    utterances: Vec<UtteranceScore>,
}

fn parse_edges(spec: &str) -> anyhow::Result<Vec<f64>> {
    if spec == "default" {
        return Ok(DEFAULT_BUCKET_EDGES.to_vec());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| failure::config(format!("bad bucket edge {s:?}"))))
        .collect()
}

fn keyed(records: Vec<Record>, what: &str) -> anyhow::Result<BTreeMap<String, Record>> {
    let mut out = BTreeMap::new();
    for r in records {
        let id = r.id.clone();
        if out.insert(id.clone(), r).is_some() {
            return Err(failure::data(format!("duplicate id {id} in {what}")));
        }
    }
    Ok(out)
}

fn id_mismatch(refs: &BTreeMap<String, Record>, hyps: &BTreeMap<String, Record>) -> Option<String> {
    let r: BTreeSet<&String> = refs.keys().collect();
    let h: BTreeSet<&String> = hyps.keys().collect();
    let no_hyp: Vec<&str> = r.difference(&h).map(|s| s.as_str()).collect();
    let no_ref: Vec<&str> = h.difference(&r).map(|s| s.as_str()).collect();
    let mut parts = Vec::new();
    if !no_hyp.is_empty() {
        parts.push(format!("missing from hyps: {}", no_hyp.join(", ")));
    }
    if !no_ref.is_empty() {
        parts.push(format!("missing from refs: {}", no_ref.join(", ")));
    }
    (!parts.is_empty()).then(|| format!("id mismatch between manifests; {}", parts.join("; ")))
}

pub fn run(args: ScoreArgs, out_dir: &Path) -> anyhow::Result<()> {
    let edges = args.buckets.as_deref().map(parse_edges).transpose()?;
    if args.oracle_k == Some(0) {
        return Err(failure::config("--oracle-k must be at least 1"));
    }
    let mode = if args.strict_decode { DecodeMode::Strict } else { DecodeMode::Lenient };
    let ref_list: Vec<Record> = read_jsonl(&args.refs)?;
    let order: Vec<String> = ref_list.iter().map(|r| r.id.clone()).collect();
    let refs = keyed(ref_list, "refs")?;
    let hyps = keyed(read_jsonl(&args.hyps)?, "hyps")?;
    if let Some(msg) = id_mismatch(&refs, &hyps) {
        return Err(failure::data(msg));
    }

    let mut utterances = Vec::with_capacity(order.len());
    let mut fractions = Vec::new();
    for id in order {
        let (r, h) = (&refs[&id], &hyps[&id]);
        let ref_set = r.speaker_set(mode)?;
        let hyp_set = h.speaker_set(mode)?;
        let report = match (args.oracle_k, args.fixed_order) {
            (Some(k), _) => oracle_k_wer(&ref_set, &hyp_set, k),
            (None, true) => fixed_order_wer(&ref_set, &hyp_set),
            (None, false) => pit_wer(&ref_set, &hyp_set),
        }
        .with_context(|| format!("scoring {id}"))?;
        if edges.is_some() {
            let f = r
                .overlap_fraction
                .or(h.overlap_fraction)
                .ok_or_else(|| failure::data(format!("record {id} has no overlap_fraction")))?;
            fractions.push(f);
        }
        utterances.push(UtteranceScore { id, report });
    }

    let corpus = pool(utterances.iter().map(|u| &u.report));
    let buckets = match &edges {
        Some(e) => {
            let pairs: Vec<(ScoreReport, f64)> = utterances.iter().map(|u| u.report.clone()).zip(fractions).collect();
            Some(bucket_report(&pairs, e)?)
        }
        None => None,
    };
    let file = ScoreFile {
        mode: match (args.oracle_k, args.fixed_order) {
            (Some(_), _) => "oracle_k",
            (None, true) => "fixed_order",
            (None, false) => "pit",
        },
        oracle_k: args.oracle_k,
        corpus,
        buckets,
        utterances,
    };

    let out_dir = prepare(out_dir)?;
    write_json(&out_dir, "score.json", &file)?;
    let star = if file.corpus.oracle { "*" } else { "" };
    let mut table = Table::new(&["id", "ref_words", "sub", "ins", "del", "wer"]);
    let row = |id: String, r: &ScoreReport| {
        vec![
            id,
            r.ref_word_count.to_string(),
            r.substitutions.to_string(),
            r.insertions.to_string(),
            r.deletions.to_string(),
            pct(r.wer),
        ]
    };
    for u in &file.utterances {
        table.push(row(u.id.clone(), &u.report));
    }
    table.push(row(format!("corpus{star}"), &file.corpus));
    write_text(&out_dir, "score.tsv", &table.render())?;

    if let Some(rows) = &file.buckets {
        let mut header = vec!["overlap (%)".to_string()];
        header.extend(rows.iter().map(BucketRow::label));
        let mut table = Table::new(&header);
        let mut wer = vec![format!("wer{star}")];
        wer.extend(rows.iter().map(|b| if b.ref_word_count == 0 { "-".into() } else { pct(b.wer) }));
        table.push(wer);
        let mut n = vec!["utterances".to_string()];
        n.extend(rows.iter().map(|b| b.utterances.to_string()));
        table.push(n);
        write_text(&out_dir, "buckets.tsv", &table.render())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_parse() {
        assert_eq!(parse_edges("default").unwrap(), DEFAULT_BUCKET_EDGES.to_vec());
        assert_eq!(parse_edges("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_edges("0,x").is_err());
    }
}
