//! Command-line driver for the sequence generation and filtered augmentation
//! pipeline. Every subcommand reads and writes plain artifacts (CGA1 tensor
//! files, CGCK checkpoints, JSON manifests) so stages can be run separately
//! or end to end via `run-experiment`.

use clap::{Parser, Subcommand};
use seqaug_core::error::{Error, Result};
use seqaug_core::io;
use seqaug_core::pipeline::classifier::TrainingParadigm;
use seqaug_core::pipeline::experiment::{self, ExperimentSummary};
use seqaug_core::pipeline::Config;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "seqaug",
    about = "Conditioned latent-diffusion sequence generation with synthetic-data filtering and a downstream classification harness",
    version
)]
struct Cli {
    /// Configuration file (JSON). Defaults to the built-in toy preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base random seed. Defaults to the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for sampling. Values above 1 void bit-exact replay.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset into <out>/dataset.
    MakeDataset,
    /// Train the autoencoder on dataset frames into <out>/vae.ckpt.
    TrainVae {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Pretrain the image-mode denoiser into <out>/ldm_image.ckpt.
    PretrainLdm {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Extend an image model to sequence mode into <out>/ldm_seq_init.ckpt.
    Inflate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Finetune the sequence model's temporal groups into <out>/ldm_seq.ckpt.
    FinetuneSeq {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Sample synthetic groups under banks derived from the training clips
    /// into <out>/synthetic.
    Sample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the three-stage filter into <out>/filtered.
    Filter {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Train a downstream classifier into <out>/classifier.ckpt.
    TrainClassifier {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// baseline | real-finetune | joint-train
        #[arg(long)]
        paradigm: String,
    },
    /// Evaluate a classifier on the dataset's test split into <out>/eval.json.
    Evaluate {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the whole pipeline (dataset through summary) into <out>.
    RunExperiment,
    /// Print an experiment summary, or emit a config preset.
    Report {
        #[arg(long)]
        experiment: Option<PathBuf>,
        /// Print a configuration preset (toy | paper) to stdout.
        #[arg(long)]
        emit_config: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        Some(path) => Config::from_file(path),
        None => Ok(Config::toy()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    config.validate()?;
    let seed = cli.seed.unwrap_or(config.dataset.seed);
    let threads = cli.threads.unwrap_or(config.threads).max(1);
    if threads > 1 {
        eprintln!("note: threads={threads} voids bit-exact replay of sampling outputs");
    }
    let out = &cli.out;

    match cli.command {
        Command::MakeDataset => {
            let dir = out.join("dataset");
            experiment::stage_make_dataset(&config, seed, &dir)?;
            println!("dataset written to {}", dir.display());
        }
        Command::TrainVae { dataset } => {
            let path = out.join("vae.ckpt");
            let log = experiment::stage_train_vae(&config, seed, &dataset, &path)?;
            io::write_json(&out.join("logs/vae.json"), &log)?;
            println!(
                "vae trained ({} steps, final loss {:.5}) -> {}",
                log.len(),
                log.last().map(|e| e.loss).unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::PretrainLdm { dataset, vae } => {
            let path = out.join("ldm_image.ckpt");
            let log = experiment::stage_pretrain_ldm(&config, seed, &dataset, &vae, &path)?;
            io::write_json(&out.join("logs/ldm_image.json"), &log)?;
            println!(
                "image denoiser trained ({} steps, final loss {:.5}) -> {}",
                log.len(),
                log.last().map(|e| e.loss).unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Inflate { model } => {
            let path = out.join("ldm_seq_init.ckpt");
            experiment::stage_inflate(seed, &model, &path)?;
            println!("sequence model initialized -> {}", path.display());
        }
        Command::FinetuneSeq { dataset, vae, model } => {
            let path = out.join("ldm_seq.ckpt");
            let log =
                experiment::stage_finetune(&config, seed, &dataset, &vae, &model, &path)?;
            io::write_json(&out.join("logs/ldm_seq.json"), &log)?;
            println!(
                "sequence model finetuned ({} steps, final loss {:.5}) -> {}",
                log.len(),
                log.last().map(|e| e.loss).unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Sample { dataset, vae, model } => {
            let dir = out.join("synthetic");
            experiment::stage_sample(&config, seed, &dataset, &vae, &model, &dir, threads)?;
            println!("synthetic groups written to {}", dir.display());
        }
        Command::Filter { synthetic, vae, classifier } => {
            let dir = out.join("filtered");
            let report =
                experiment::stage_filter(&config, seed, &synthetic, &vae, &classifier, &dir)?;
            println!("{}", report.render_text());
            println!("filtered set written to {}", dir.display());
        }
        Command::TrainClassifier { dataset, synthetic, paradigm } => {
            let paradigm = TrainingParadigm::from_str(&paradigm)?;
            let path = out.join("classifier.ckpt");
            let log = experiment::stage_train_classifier(
                &config,
                seed,
                &dataset,
                synthetic.as_deref(),
                paradigm,
                &path,
            )?;
            io::write_json(&out.join("logs/classifier.json"), &log)?;
            println!(
                "classifier trained under {paradigm} ({} steps) -> {}",
                log.len(),
                path.display()
            );
        }
        Command::Evaluate { classifier, dataset } => {
            let report = experiment::stage_evaluate(&dataset, &classifier, seed, "standalone")?;
            io::write_json(&out.join("eval.json"), &report)?;
            println!(
                "accuracy {:.2}%  macro AUROC {:.3}  ({} test clips)",
                report.accuracy,
                report.auroc_macro,
                report.confusion.iter().map(|r| r.iter().sum::<usize>()).sum::<usize>()
            );
        }
        Command::RunExperiment => {
            let summary = experiment::run_experiment(&config, seed, out, threads)?;
            println!("{}", summary.render_text());
        }
        Command::Report { experiment: exp_dir, emit_config } => {
            if let Some(preset) = emit_config {
                let config = Config::preset(&preset)?;
                println!("{}", config.to_json());
            } else if let Some(dir) = exp_dir {
                let summary: ExperimentSummary = io::read_json(&dir.join("summary.json"))?;
                println!("{}", summary.render_text());
            } else {
                return Err(Error::config(
                    "report requires --experiment <dir> or --emit-config <preset>",
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
