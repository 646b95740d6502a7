use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsfl::codec::{self, RecordInfo};
use fsfl::harness::{self, ExperimentConfig};
use fsfl::model::{param_add, param_diff};
use fsfl::tensor::ParamSet;

#[derive(Parser)]
#[command(name = "fsfl", version, about = "Compressed federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides `output.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Overrides `output.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// First round at which the server accuracy reaches a target.
    Summarize {
        csv: PathBuf,
        #[arg(long)]
        target: f64,
    },
    /// Quantize and entropy-code the difference of two checkpoints.
    Encode {
        base: PathBuf,
        updated: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Step size for convolution and dense weights.
        #[arg(long, default_value_t = 4.88e-4)]
        step: f64,
        /// Step size for every other tensor.
        #[arg(long, default_value_t = 2.38e-6)]
        step_other: f64,
    },
    /// Apply an encoded update to a base checkpoint.
    Decode {
        base: PathBuf,
        stream: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Per-tensor byte accounting of encoded streams.
    Inspect { files: Vec<PathBuf> },
}

type BoxError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), BoxError> {
    match cli.command {
        Command::Run {
            config,
            csv,
            checkpoint,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            cfg.apply_env()?;
            if csv.is_some() {
                cfg.output.csv = csv;
            }
            if checkpoint.is_some() {
                cfg.output.checkpoint = checkpoint;
            }
            harness::run_with(&cfg, |_, log| {
                println!(
                    "round {:>3}  accuracy {:.4}  cumulative bytes {}",
                    log.round, log.test_accuracy, log.cumulative_bytes
                );
            })?;
        }
        Command::Summarize { csv, target } => {
            let rows = harness::read_rows(&csv)?;
            match harness::summarize(&rows, target)? {
                Some(m) => println!(
                    "round {}  accuracy {:.4}  cumulative bytes {}",
                    m.round, m.test_accuracy, m.cumulative_bytes
                ),
                None => println!("target {target} not reached"),
            }
        }
        Command::Encode {
            base,
            updated,
            out,
            step,
            step_other,
        } => {
            let base = harness::read_checkpoint(&base)?;
            let updated = harness::read_checkpoint(&updated)?;
            let delta = param_diff(&updated, &base)?;
            let tensors = codec::quantize_update(&delta, |name| {
                let t = delta.get(name).expect("name from the update");
                if name.ends_with(".weight") && t.rank() >= 2 {
                    step
                } else {
                    step_other
                }
            })?;
            let bytes = codec::encode(&tensors)?;
            std::fs::write(&out, &bytes).map_err(|e| format!("{}: {e}", out.display()))?;
            print_records(
                &out.display().to_string(),
                &codec::inspect(&bytes)?,
                bytes.len(),
                delta.numel(),
            );
        }
        Command::Decode { base, stream, out } => {
            let base = harness::read_checkpoint(&base)?;
            let bytes = std::fs::read(&stream).map_err(|e| format!("{}: {e}", stream.display()))?;
            let delta = codec::dequantize_update(&codec::decode(&bytes)?);
            let restored: ParamSet = param_add(&base, &delta)?;
            harness::write_checkpoint(&out, &restored)?;
            println!("{} tensors updated, written to {}", delta.len(), out.display());
        }
        Command::Inspect { files } => {
            for file in files {
                let bytes = std::fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
                let records = codec::inspect(&bytes)?;
                let numel = records.iter().map(|r| r.shape.iter().product::<usize>()).sum();
                print_records(&file.display().to_string(), &records, bytes.len(), numel);
            }
        }
    }
    Ok(())
}

fn print_records(label: &str, records: &[RecordInfo], total: usize, numel: usize) {
    println!("{label}");
    println!(
        "  {:<28} {:>16} {:>12} {:>10} {:>10}",
        "tensor", "shape", "step", "payload", "record"
    );
    for r in records {
        let shape = r.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        println!(
            "  {:<28} {:>16} {:>12.4e} {:>10} {:>10}",
            r.name, shape, r.step_size, r.payload_bytes, r.record_bytes
        );
    }
    let raw = 4 * numel;
    println!(
        "  total {total} bytes for {numel} elements ({raw} bytes as raw f32, ratio {:.1}x)",
        raw as f64 / total.max(1) as f64
    );
}
