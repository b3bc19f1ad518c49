use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use loopmatch::cli;

/// Point-cloud place recognition and relocalization toolkit.
#[derive(Parser)]
#[command(name = "loopmatch", version, about)]
struct Args {
    /// TOML config file; omitted fields fall back to the built-in defaults
    /// (see config/default.toml in the repository).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate one scan with per-point ground probabilities (CSV).
    Ground {
        /// Scan file (packed float32 x,y,z,intensity records).
        #[arg(long)]
        scan: PathBuf,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Register two scans and print the pose record as JSON.
    Register {
        #[arg(long)]
        scan_a: PathBuf,
        #[arg(long)]
        scan_b: PathBuf,
    },
    /// Run the full loop-closure evaluation over a sequence directory
    /// (scans as *.bin plus poses.txt).
    EvalSequence {
        #[arg(long)]
        dir: PathBuf,
        /// Directory receiving metrics.csv, pairs.csv and the PR curves.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Synthetic ablation benchmark over seeded scene pairs.
    SynthBench {
        /// Scene spec TOML file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Directory receiving variants.csv and trials.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            // Help/version requests are not failures.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let config = match cli::load_config(args.config.as_ref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let result = match &args.command {
        Command::Ground { scan, out } => cli::cmd_ground(scan, &config, out.as_deref()).map(|csv| {
            if out.is_none() {
                print!("{csv}");
            }
        }),
        Command::Register { scan_a, scan_b } => match cli::cmd_register(scan_a, scan_b, &config) {
            Ok(json) => {
                println!("{json}");
                Ok(())
            }
            Err(e) => {
                // Structured error record on stdout, message on stderr.
                println!(
                    "{}",
                    serde_json::json!({ "error": e.to_string(), "exit_code": cli::exit_code(&e) })
                );
                Err(e)
            }
        },
        Command::EvalSequence { dir, out_dir } => {
            cli::cmd_eval_sequence(dir, &config, out_dir).map(|report| {
                print!("{}", report.metrics_csv);
            })
        }
        Command::SynthBench {
            spec,
            trials,
            out_dir,
        } => cli::cmd_synth_bench(spec, *trials, &config, out_dir).map(|report| {
            print!("{}", report.summary_csv());
        }),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
