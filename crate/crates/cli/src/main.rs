use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disac_core::config::RunConfig;
use disac_core::eval::Mode;
use disac_core::pipeline::{self, Corpus};
use disac_core::rvfn::Modality;
use disac_core::training::EpochLog;
use disac_core::Error;

/// Distributed RF-vision sensing with semantic transmission.
#[derive(Debug, Parser)]
#[command(name = "disac", version, about, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration; omitted sections keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; takes precedence over the config file and DISAC_SEED.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the scene and write per-device datasets plus the aggregation index.
    Gen {
        /// Output dataset directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Frames per (device, target) stream.
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
    },
    /// First stage: train one device's extractor, encoder/decoder and local head on its own data.
    TrainLocal {
        /// Device dataset directory (D_k).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Device index k.
        #[arg(long, value_name = "K")]
        device: usize,
        /// Output checkpoint file; the epoch log goes next to it as `<out>.log.csv`.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Input modality of the device model.
        #[arg(long, value_name = "rf|cv|mm", default_value = "mm")]
        modality: Modality,
        /// Freeze the decoder base weights and train only the low-rank adapters (plus extractor, encoder and head).
        #[arg(long)]
        lora_only: bool,
    },
    /// Second stage: train the aggregation network and centre head on received codes.
    TrainAgg {
        /// Dataset root or its aggregation directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated device checkpoints, one per device, all of one modality.
        #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        /// Output checkpoint file; the epoch log goes next to it as `<out>.log.csv`.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Device acting as the aggregation centre.
        #[arg(long, value_name = "K", default_value_t = 0)]
        center: usize,
    },
    /// Evaluate modes over SNRs and centre positions; write a CSV report and optional plots.
    Eval {
        /// Dataset root.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated checkpoint files or directories of `*.ckpt` files.
        #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        /// Comma-separated modes: sm-sd-rf, sm-sd-cv, mm-sd, sm-md-rf, sm-md-cv, full, no-sc-loss [default: eval.modes].
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        /// Comma-separated evaluation SNRs in dB [default: eval.snrs].
        #[arg(long, value_name = "LIST", value_delimiter = ',', allow_negative_numbers = true)]
        snrs: Option<Vec<f64>>,
        /// Comma-separated centre positions [default: eval.centers, else every position with checkpoints].
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        centers: Option<Vec<usize>>,
        /// Worker threads for evaluation cells [default: eval.threads].
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
        /// Output CSV report.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        /// Directory for one SVG plot per metric.
        #[arg(long, value_name = "DIR")]
        plots: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn print_history(history: &[EpochLog]) {
    for r in history {
        println!(
            "epoch {:>3} {:<5} loss {:>10.5} accuracy {:.4}",
            r.epoch,
            r.split.name(),
            r.loss.total,
            r.accuracy
        );
    }
}

fn run(cli: Cli) -> disac_core::Result<()> {
    let mut sets = cli.global.overrides.clone();
    if let Command::Gen { samples: Some(n), .. } = &cli.command {
        sets.push(format!("data.samples={n}"));
    }
    if let Command::Eval { threads: Some(n), .. } = &cli.command {
        sets.push(format!("eval.threads={n}"));
    }
    if let Some(s) = cli.global.seed {
        sets.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(cli.global.config.as_deref(), &sets)?;
    match cli.command {
        Command::Gen { out, .. } => {
            let m = pipeline::generate(&cfg, &out)?;
            let total: usize = m.records_per_device.iter().sum();
            println!(
                "wrote {} device datasets ({total} records, {} rejected) and {} to {}",
                m.devices.len(),
                m.rejected.len(),
                m.agg,
                out.display()
            );
        }
        Command::TrainLocal {
            data,
            device,
            out,
            modality,
            lora_only,
        } => {
            let mut cfg = cfg;
            cfg.train.lora_only |= lora_only;
            let res = pipeline::train_local(&cfg, &data, device, modality, &out, None)?;
            print_history(&res.history);
            println!("saved {}", out.display());
        }
        Command::TrainAgg { data, ckpts, out, center } => {
            let corpus = Corpus::open(&data)?;
            let family = pipeline::load_family(&ckpts, corpus.datasets.len())?;
            let res = pipeline::train_agg(&cfg, &corpus, &family, center, &out)?;
            print_history(&res.history);
            println!("saved {}", out.display());
        }
        Command::Eval {
            data,
            ckpts,
            modes,
            snrs,
            centers,
            report,
            plots,
            ..
        } => {
            let corpus = Corpus::open(&data)?;
            let zoo = pipeline::load_zoo(&pipeline::expand_checkpoints(&ckpts)?)?;
            let modes = modes.unwrap_or_else(|| cfg.eval.modes.clone());
            let snrs = snrs.unwrap_or_else(|| cfg.eval.snrs.clone());
            let centers = centers.unwrap_or_else(|| {
                if cfg.eval.centers.is_empty() {
                    pipeline::default_centers(&zoo, &modes, corpus.datasets.len())
                } else {
                    cfg.eval.centers.clone()
                }
            });
            if centers.is_empty() {
                return Err(Error::MissingArtifact("no centre position has every aggregation checkpoint the modes need".into()));
            }
            let rows = pipeline::evaluate(&cfg, &corpus, &zoo, &modes, &snrs, &centers)?;
            pipeline::write_report(&rows, &report, plots.as_deref())?;
            println!("wrote {} rows to {}", rows.len(), report.display());
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
            ExitCode::from(exit_code(&e))
        }
    }
}
