use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multiattn::combination::Strategy;
use multiattn::recurrent::DecoderKind;
use multiattn_cli::{
    cmd_decode, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_inspect_attention, cmd_train, format_gradcheck,
    resolve_config, CliError, DecodeArgs, EvalArgs, GenDataArgs, GradcheckArgs, InspectArgs, Overrides, Task,
    GRADCHECK_TOL,
};

#[derive(Parser)]
#[command(name = "multiattn", version, about = "Multi-source attention combination experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test splits of a synthetic task.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes curves, best checkpoint and a summary.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Do not print learning-curve points while training.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset (JSON record on stdout).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file whose fingerprint must match the checkpoint's.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Score these hypotheses (one per line) instead of greedy decodes.
        #[arg(long)]
        hypotheses: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decode a dataset, one output per line.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the attention trace and heat map of one decoded example.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per heat-map cell.
        #[arg(long, default_value_t = 8)]
        cell: usize,
    },
    /// Compare reverse-mode gradients with finite differences on a tiny model.
    Gradcheck {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, hide = true)]
        corrupt_adjoint: Option<String>,
    },
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// concat, flat or hier
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    share: bool,
    #[arg(long)]
    sentinel: bool,
    /// gru or cgru
    #[arg(long)]
    decoder: Option<DecoderKind>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, task, seed, out } => {
            for path in cmd_gen_data(&GenDataArgs { config, task, seed, out })? {
                println!("{}", path.display());
            }
        }
        Command::Train { config, model, out, quiet } => {
            let overrides = Overrides {
                seed: model.seed,
                strategy: model.strategy,
                share: model.share,
                sentinel: model.sentinel,
                decoder: model.decoder,
                out,
            };
            let config = resolve_config(config.as_deref(), &overrides)?;
            let summary = cmd_train(&config, |p| {
                if !quiet {
                    eprintln!(
                        "step {:>6}  train {:.4}  valid {:.4}  acc {:.4}  bleu {:.4}",
                        p.step, p.train_loss, p.valid_loss, p.valid_accuracy, p.valid_bleu
                    );
                }
            })?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.into()))?);
        }
        Command::Eval { checkpoint, data, vocab, hypotheses, out } => {
            let scores = cmd_eval(&EvalArgs { checkpoint, data, vocab, hypotheses })?;
            let text = serde_json::to_string_pretty(&scores).map_err(|e| CliError::Runtime(e.into()))? + "\n";
            match out {
                Some(p) => std::fs::write(p, text).map_err(|e| CliError::Runtime(e.into()))?,
                None => print!("{text}"),
            }
        }
        Command::Decode { checkpoint, data, out } => {
            cmd_decode(&DecodeArgs { checkpoint, data, out }, std::io::stdout().lock())?;
        }
        Command::InspectAttention { checkpoint, data, example, out, cell } => {
            let trace = cmd_inspect_attention(&InspectArgs { checkpoint, data, example, out: out.clone(), cell })?;
            println!("{} steps, columns {}", trace.rows.len(), trace.columns().join(" "));
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { model, corrupt_adjoint } => {
            let results = cmd_gradcheck(&GradcheckArgs {
                strategy: model.strategy,
                share: model.share,
                sentinel: model.sentinel,
                decoder: model.decoder,
                seed: model.seed.unwrap_or(1),
                corrupt_adjoint,
            })?;
            print!("{}", format_gradcheck(&results));
            if results.iter().any(|r| !r.report.passes(GRADCHECK_TOL)) {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "gradient check failed (tolerance {GRADCHECK_TOL:e})"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    multiattn::exec::init_threads_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
