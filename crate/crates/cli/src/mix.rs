use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use toggl_core::manifest::{read_jsonl, UtteranceRecord};
use toggl_core::mixture::{synthesize_dataset, wav_loader, write_dataset, MixManifestRecord};
use toggl_core::scoring::DEFAULT_BUCKET_EDGES;

use crate::failure;
use crate::output::{prepare, write_json, write_text, Table};

#[derive(Args, Debug)]
pub struct MixArgs {
    /// Single-speaker utterance manifest; relative WAV paths resolve against its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Speakers per mixture.
    #[arg(long, default_value_t = 2)]
    pub n_mix: usize,
    /// Number of mixtures.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
}

#[derive(Serialize)]
struct MixSummary {
    n_mix: usize,
    count: usize,
    seed: u64,
    mean_overlap_fraction: f64,
    /// Mixtures per overlap bucket, lower-inclusive.
    overlap_buckets: Vec<BucketCount>,
    clipped_samples: usize,
}

#[derive(Serialize)]
struct BucketCount {
    lower: f64,
    upper: f64,
    mixtures: usize,
}

fn bucket_counts(records: &[MixManifestRecord]) -> Vec<BucketCount> {
    let edges = DEFAULT_BUCKET_EDGES;
    let last = edges.len() - 2;
    let mut counts: Vec<BucketCount> = edges
        .windows(2)
        .map(|w| BucketCount {
            lower: w[0],
            upper: w[1],
            mixtures: 0,
        })
        .collect();
    for r in records {
        let idx = edges[1..=last].iter().take_while(|&&e| r.overlap_fraction >= e).count();
        counts[idx].mixtures += 1;
    }
    counts
}

pub fn run(args: MixArgs, out_dir: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    if !(1..=4).contains(&args.n_mix) {
        return Err(failure::config(format!("n_mix must lie in 1..=4, got {}", args.n_mix)));
    }
    let seed = seed.unwrap_or(0);
    let records: Vec<UtteranceRecord> = read_jsonl(&args.manifest)?;
    let base = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let items = synthesize_dataset(&records, args.n_mix, args.count, seed, wav_loader(base))
        .with_context(|| format!("mixing {}", args.manifest.display()))?;

    let out_dir = prepare(out_dir)?;
    let written = write_dataset(&items, &out_dir)?;
    let summary = MixSummary {
        n_mix: args.n_mix,
        count: written.len(),
        seed,
        mean_overlap_fraction: written.iter().map(|r| r.overlap_fraction).sum::<f64>() / written.len().max(1) as f64,
        overlap_buckets: bucket_counts(&written),
        clipped_samples: written.iter().map(|r| r.clipped_samples).sum(),
    };
    write_json(&out_dir, "mix_summary.json", &summary)?;

    let mut table = Table::new(&["overlap (%)", "mixtures"]);
    for b in &summary.overlap_buckets {
        table.push(vec![format!("{:.0}-{:.0}", 100.0 * b.lower, 100.0 * b.upper), b.mixtures.to_string()]);
    }
    write_text(&out_dir, "mix_summary.tsv", &table.render())
}
