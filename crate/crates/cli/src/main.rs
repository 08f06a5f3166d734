use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod codec_cmd;
mod ctc_check;
mod failure;
mod mix;
mod output;
mod score;
mod toy_cmd;

use failure::{report, Kind};

#[derive(Parser, Debug)]
#[command(name = "toggl", version, about = "Staggered multi-speaker labels: mixing, serialization, scoring and a toy model")]
struct Cli {
    /// Directory every output is written to.
    #[arg(long, global = true, env = "TOGGL_OUT_DIR", default_value = "toggl_out")]
    out_dir: PathBuf,

    /// Seed for every random draw in this invocation; overrides config seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build overlapped mixtures and their staggered targets.
    Mix(mix::MixArgs),
    /// Timed speaker transcripts to staggered streams.
    Serialize(codec_cmd::SerializeArgs),
    /// Staggered streams back to per-speaker token lists.
    Deserialize(codec_cmd::DeserializeArgs),
    /// Multi-speaker WER of hypotheses against references.
    Score(score::ScoreArgs),
    /// Train the toy model.
    Train(toy_cmd::TrainArgs),
    /// Score a toy checkpoint on held-out synthetic mixtures.
    Eval(toy_cmd::EvalArgs),
    /// Run the knob-removal grid.
    Ablate(toy_cmd::AblateArgs),
    /// Dump the CTC forward lattice for one grid and target.
    CtcCheck(ctc_check::CtcCheckArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Mix(a) => mix::run(a, out, cli.seed),
        Command::Serialize(a) => codec_cmd::serialize(a, out),
        Command::Deserialize(a) => codec_cmd::deserialize(a, out),
        Command::Score(a) => score::run(a, out),
        Command::Train(a) => toy_cmd::train(a, out, cli.seed),
        Command::Eval(a) => toy_cmd::eval(a, out, cli.seed),
        Command::Ablate(a) => toy_cmd::ablate(a, out, cli.seed),
        Command::CtcCheck(a) => ctc_check::run(a, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report(Kind::Config, &e.kind().to_string());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(failure::classify(&e), &format!("{e:#}")),
    }
}
