use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use xvqa_core::diagnostics::Protocol;
use xvqa_core::runner::{ExperimentConfig, Need, Runner};

#[derive(Parser)]
#[command(name = "xvqa", version, about = "Cross-lingual VQA testbed: data, training, diagnostics and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fine-tuning seed; repeat for several. Replaces the config's list.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stage schedule preset (m3p-like, uc2-like, m3p-reference, uc2-reference).
    #[arg(long, global = true)]
    stage_preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and pretraining corpus.
    GenData(Common),
    /// Pretrain the encoder on the caption corpus.
    Pretrain(Common),
    /// Fine-tune every configured arm for every seed.
    Finetune(Common),
    /// Evaluate fine-tuned models on the zero-shot test split.
    Evaluate(Common),
    /// Run the ablation protocols.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Only this protocol (MM-V, MM-T, V-V, T-T, TG-TG).
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Adapt fine-tuned models on target-language shots and evaluate.
    Fewshot(Common),
    /// Assemble reports and comparison tables.
    Report(Common),
    /// Re-derive every reported number from the raw count files.
    Audit(Common),
    /// All stages, computing whatever is missing.
    Run(Common),
}

fn runner(c: &Common) -> Result<Runner> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !c.seeds.is_empty() {
        cfg.seeds = c.seeds.clone();
    }
    if let Some(p) = &c.stage_preset {
        cfg.finetune.stage_preset = p.clone();
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.display().to_string();
    }
    let out = PathBuf::from(&cfg.output_dir);
    Ok(Runner::new(cfg, &out)?)
}

fn execute(cli: Cli) -> Result<String> {
    Ok(match cli.command {
        Command::GenData(c) => {
            let mut r = runner(&c)?;
            r.gen_data()?;
            format!("dataset ready under {}", r.out.display())
        }
        Command::Pretrain(c) => {
            let mut r = runner(&c)?;
            r.pretrain_stage(Need::ComputeOwn)?;
            format!("snapshot ready under {}", r.out.display())
        }
        Command::Finetune(c) => {
            let mut r = runner(&c)?;
            r.finetune_stage(Need::ComputeOwn)?;
            format!("fine-tuned models ready under {}", r.out.display())
        }
        Command::Evaluate(c) => {
            let mut r = runner(&c)?;
            r.evaluate_stage(Need::ComputeOwn)?;
            format!("evaluation counts ready under {}", r.out.display())
        }
        Command::Ablate { common, protocol } => {
            let only = protocol.as_deref().map(Protocol::parse).transpose()?;
            let mut r = runner(&common)?;
            r.ablate_stage(only, Need::ComputeOwn)?;
            format!("ablation counts ready under {}", r.out.display())
        }
        Command::Fewshot(c) => {
            let mut r = runner(&c)?;
            r.fewshot_stage(Need::ComputeOwn)?;
            format!("few-shot counts ready under {}", r.out.display())
        }
        Command::Report(c) => {
            let mut r = runner(&c)?;
            let dir = r.report_stage(Need::Require)?;
            format!("reports written to {}", dir.display())
        }
        Command::Audit(c) => {
            let mut r = runner(&c)?;
            let s = r.audit().context("audit failed")?;
            format!("audit ok: {} cells, files {}", s.cells_checked, s.files_checked.join(", "))
        }
        Command::Run(c) => {
            let mut r = runner(&c)?;
            let dir = r.run_all()?;
            format!("reports written to {}", dir.display())
        }
    })
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string().replace('\n', " ")).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
