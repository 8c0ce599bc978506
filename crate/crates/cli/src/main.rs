use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlenc::harness::commands::{
    run_eval_retrieval, run_eval_vcr, run_finetune_retrieval, run_finetune_vcr, run_gen_synthetic, run_grad_check, run_pretrain, DataSource,
    RunSummary,
};
use vlenc::harness::diagnostics::LossKind;
use vlenc::harness::report::to_json_lines;
use vlenc::harness::TrainConfig;
use vlenc::vcr::DEFAULT_BUDGET;

/// Largest relative gradient error accepted by `grad-check`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vlenc", version, about = "Vision-language encoder: pretraining, fine-tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on image-caption pairs with the masked-token, masked-object and matching losses.
    Pretrain {
        /// Pair-corpus manifest, or `synthetic` for the corpus in the config's [synthetic] table.
        #[arg(long)]
        data: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on this fraction of the pairs (selected by id hash).
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune for caption-image retrieval with the hardest-negative triplet loss.
    FinetuneRetrieval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optimization settings; the architecture always comes from --init.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fine-tune for four-way answer and rationale selection.
    FinetuneVcr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print R@1/5/10 in both directions as JSON lines.
    EvalRetrieval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Score with the pretrained matching head; fine-tuned checkpoints are refused.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Print Q→A, QA→R and Q→AR accuracy as JSON lines.
    EvalVcr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write a synthetic concept-grounded corpus described by a TOML file.
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of one loss on a small 64-bit model.
    GradCheck {
        #[arg(long)]
        loss: LossKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> vlenc::Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn print_summary(s: &RunSummary) {
    let loss = s.final_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}"));
    println!("checkpoint {} id {} updates {} final loss {loss}", s.checkpoint.display(), s.checkpoint_id, s.updates);
}

fn run(cli: Cli) -> vlenc::Result<bool> {
    match cli.command {
        Command::Pretrain { data, config, out, fraction, seed } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            print_summary(&run_pretrain(&DataSource::parse(&data), &cfg, &out, fraction)?);
        }
        Command::FinetuneRetrieval { data, init, out, config } => {
            print_summary(&run_finetune_retrieval(&data, &init, &out, &load_config(config.as_deref())?)?);
        }
        Command::FinetuneVcr { data, init, out, config } => {
            print_summary(&run_finetune_vcr(&data, &init, &out, &load_config(config.as_deref())?)?);
        }
        Command::EvalRetrieval { data, ckpt, zero_shot } => {
            print!("{}", to_json_lines(&run_eval_retrieval(&data, &ckpt, zero_shot)?));
        }
        Command::EvalVcr { data, ckpt } => {
            print!("{}", to_json_lines(&run_eval_vcr(&data, &ckpt, DEFAULT_BUDGET)?));
        }
        Command::GenSynthetic { config, out } => {
            for m in run_gen_synthetic(&config, &out)? {
                println!("{}", m.display());
            }
        }
        Command::GradCheck { loss, seed } => {
            let r = run_grad_check(loss, seed)?;
            let ok = r.max_relative_error <= GRAD_TOLERANCE;
            let (name, index) = r.worst.unwrap_or_default();
            println!(
                "{} max relative error {:.3e} (max absolute {:.3e}, worst {name}[{index}], {} coordinates): {}",
                loss.name(),
                r.max_relative_error,
                r.max_absolute_error,
                r.coordinates,
                if ok { "ok" } else { "FAILED" }
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
