//! Command-line interface: train, eval, difficulty, synth, dump-features.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ernetcl::checkpoint::Checkpoint;
use ernetcl::config::{load_model_config, load_synth_spec};
use ernetcl::data::{load_dataset, load_label_map, save_dataset, synthesize};
use ernetcl::error::{Error, Result};
use ernetcl::train::{dump_features, evaluate, train, TrainFlags};

#[derive(Parser)]
#[command(name = "ernetcl", version, about = "Conversation-level emotion classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the checkpoint with the best validation
    /// weighted F1.
    Train {
        /// Key/value config file.
        #[arg(long)]
        config: PathBuf,
        /// Training dataset.
        #[arg(long)]
        train: PathBuf,
        /// Validation dataset.
        #[arg(long)]
        val: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Drop the temporal encoder.
        #[arg(long)]
        no_te: bool,
        /// Drop the spatial encoder.
        #[arg(long)]
        no_se: bool,
        /// Use the plain cross-entropy loss instead of curriculum weights.
        #[arg(long)]
        no_cl: bool,
    },
    /// Evaluate a checkpoint on a dataset and print the metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional label map (`<index>\t<name>` lines, optional
        /// `neutral\t<index>` line).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Print one `<conversation_id>\t<difficulty>` line per conversation.
    Difficulty {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic dataset from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Write the final pre-classifier vector of every utterance.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("ERNETCL_SEED") {
        Ok(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("ERNETCL_SEED: {e}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            train: train_path,
            val,
            out,
            no_te,
            no_se,
            no_cl,
        } => {
            let mut cfg = load_model_config(&config)?;
            if let Some(seed) = seed_override()? {
                cfg.seed = seed;
            }
            let train_ds = load_dataset(&train_path)?;
            let val_ds = load_dataset(&val)?;
            let flags = TrainFlags { no_te, no_se, no_cl };
            let (ckpt, history) = train(&cfg, &train_ds, &val_ds, flags)?;
            for e in &history.epochs {
                println!(
                    "epoch {:>3}  train loss {:.6}  val weighted F1 {:.4}  val micro F1 {:.4}  {:.2}s",
                    e.epoch, e.train_loss, e.val_weighted_f1, e.val_micro_f1, e.wall_secs
                );
            }
            ckpt.save(&out)?;
            println!("saved checkpoint to {}", out.display());
            Ok(())
        }
        Command::Eval { ckpt, data, labels } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let mut ds = load_dataset(&data)?;
            if let Some(map) = labels {
                let (names, neutral) = load_label_map(&map)?;
                ds = ds.with_labels(names, neutral)?;
            }
            let report = evaluate(&ckpt, &ds)?;
            println!("{}", report.render_text());
            println!("{}", report.render_kv());
            Ok(())
        }
        Command::Difficulty { data } => {
            use std::io::Write;
            let ds = load_dataset(&data)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (i, conv) in ds.conversations.iter().enumerate() {
                if let Err(e) = writeln!(out, "{}\t{:.6}", conv.id, ds.difficulty(i)) {
                    // A closed pipe (e.g. `| head`) is not an error.
                    if e.kind() == std::io::ErrorKind::BrokenPipe {
                        return Ok(());
                    }
                    return Err(Error::io("stdout", e));
                }
            }
            Ok(())
        }
        Command::Synth { spec, out, seed } => {
            let spec = load_synth_spec(&spec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = synthesize(&spec, &mut rng)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} conversations ({} utterances, dim {}) to {}",
                ds.len(),
                ds.total_utterances(),
                ds.feature_dim(),
                out.display()
            );
            Ok(())
        }
        Command::DumpFeatures { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = load_dataset(&data)?;
            dump_features(&ckpt, &ds, &out)?;
            println!("wrote feature dump to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
