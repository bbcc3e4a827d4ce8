//! Training/evaluation CLI. Exit code 0 on success; on failure a single
//! machine-readable JSON error line goes to stderr and the exit code is 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csqa_core::harness::{self, config::RunConfig, data};
use csqa_core::Result;

#[derive(Parser)]
#[command(name = "csqa", version = csqa_core::VERSION, about = "Fine-grained classification trainer/evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override run.out_dir from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a directory dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Generate a synthetic dataset into a class-per-subdirectory tree.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-stage channel-mean activation grids for every image.
    DumpHeatmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out_dir } => {
            let mut cfg = RunConfig::parse_file(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let (outcome, mut model) = harness::train(&cfg)?;
            println!("checkpoint {}", outcome.checkpoint_path.display());
            println!("train_accuracy {:.4}", outcome.final_train_accuracy);
            if let Some(test) = &outcome.test_set {
                let report = harness::evaluate(&mut model, test, cfg.batch_size)?;
                println!("test_accuracy {:.4}", report.accuracy);
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, batch_size } => {
            let report = harness::evaluate_checkpoint(&checkpoint, &data, batch_size)?;
            println!("accuracy {:.6}", report.accuracy);
            for (h, acc) in report.per_head_accuracy.iter().enumerate() {
                println!("head{} {:.6}", h + 1, acc);
            }
            println!("samples {}", report.samples);
            Ok(())
        }
        Command::GenData { spec, out } => {
            let cfg = RunConfig::parse_file(&spec)?;
            let d = data::generate_synthetic(&cfg.data, cfg.seed)?;
            data::write_directory(&d.train, &out.join("train"))?;
            data::write_directory(&d.test, &out.join("test"))?;
            println!(
                "wrote {} train and {} test images under {}",
                d.train.samples.len(),
                d.test.samples.len(),
                out.display()
            );
            Ok(())
        }
        Command::DumpHeatmaps { checkpoint, data, out } => {
            let written = harness::dump_heatmaps_checkpoint(&checkpoint, &data, &out)?;
            println!("wrote {written} heatmap files to {}", out.display());
            Ok(())
        }
    }
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{{\"error\":\"{}\",\"kind\":\"{}\"}}", json_escape(&e.to_string()), e.kind());
            ExitCode::FAILURE
        }
    }
}
