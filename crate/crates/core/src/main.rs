use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use factsum::harness::{commands, RunConfig};
use factsum::Label;

#[derive(Parser)]
#[command(name = "factsum", version, about = "Claim-specific evidence summarization for fact-checking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a claim corpus.
    DatasetGen(Common),
    /// Supervised warm-up of the summarizer.
    Sft(Common),
    /// Staged PPO training.
    RlTrain(Common),
    /// Summaries from the latest checkpoint.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// Only this claim.
        #[arg(long)]
        claim_id: Option<String>,
    },
    /// Claim verification and overlap reports.
    Evaluate(Common),
    /// Plot-ready series from run manifests.
    Report {
        #[command(flatten)]
        common: Common,
        /// Manifest files to merge, in order; defaults to every stage under --out.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
}

fn run(command: Command) -> anyhow::Result<()> {
    let common = match &command {
        Command::DatasetGen(c) | Command::Sft(c) | Command::RlTrain(c) | Command::Evaluate(c) => c,
        Command::Summarize { common, .. } | Command::Report { common, .. } => common,
    };
    let cfg = RunConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let out = &common.out;
    match &command {
        Command::DatasetGen(_) => {
            let m = commands::dataset_gen(&cfg, seed, out)?;
            println!("{} clusters, {} claims, corpus sha256 {}", m.clusters, m.claims, m.corpus_sha256);
        }
        Command::Sft(_) => {
            let state = commands::sft(&cfg, seed, out)?;
            let last = state.history.last().and_then(|r| r.sft_loss);
            println!("sft: {} steps, final loss {}", state.step, last.map_or("n/a".into(), |l| format!("{l:.4}")));
        }
        Command::RlTrain(_) => {
            let s = commands::rl_train(&cfg, seed, out)?;
            println!(
                "rl: {} episodes, r_entail first {} = {:.3}, last {} = {:.3}",
                s.episodes, s.window, s.first_window_r_entail, s.window, s.last_window_r_entail
            );
        }
        Command::Summarize { claim_id, .. } => {
            for s in commands::summarize(&cfg, seed, out, claim_id.as_deref())? {
                println!("{}\t{}", s.claim_id, s.summary);
            }
        }
        Command::Evaluate(_) => {
            let (v, o) = commands::evaluate(&cfg, seed, out)?;
            println!("accuracy {:.4}  F ({:?}) {:.4}", v.accuracy, v.averaging, v.f_score);
            for l in Label::ALL {
                let m = v.label(l);
                println!("{:<13} {:<9} P {:.4} R {:.4} F1 {:.4} n {}", l.as_str(), l.truth_name(), m.precision, m.recall, m.f1, m.support);
            }
            let bert = o.bertscore.map_or("unavailable".into(), |b| format!("{b:.4}"));
            println!("ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4} BLEU {:.4} BERTScore {bert}", o.rouge_1, o.rouge_2, o.rouge_l, o.bleu);
        }
        Command::Report { manifests, .. } => {
            let s = commands::report(&cfg, out, manifests).context("building report")?;
            println!("{} points written to {}", s.points.len(), out.join("report").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<factsum::Error>().is_some_and(|e| e.is_validation()));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
