use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Parser, Subcommand};

use probebench::ingest;
use probebench::runner::{self, EvaluationRequest, FsQueue, ServeOptions, Service, SystemClock};
use probebench::synth::{self, SynthSpec};

#[derive(Parser)]
#[command(
    name = "probebench",
    version,
    about = "Linear-probe benchmark for fixed-size embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one submission and refresh the phase leaderboard.
    Evaluate {
        #[arg(long = "annotation_path")]
        annotation_path: PathBuf,
        #[arg(long = "submission_file")]
        submission_file: PathBuf,
        #[arg(long = "output_dir")]
        output_dir: PathBuf,
        #[arg(long = "config")]
        config: PathBuf,
        #[arg(long = "method_name")]
        method_name: String,
        #[arg(long = "phase")]
        phase: String,
        /// Fold-evaluation threads (default: one per core).
        #[arg(long = "workers")]
        workers: Option<usize>,
    },
    /// Poll a directory for submissions and keep the leaderboard current.
    Serve {
        #[arg(long = "watch_dir")]
        watch_dir: PathBuf,
        #[arg(long = "interval_seconds", default_value_t = 60)]
        interval_seconds: u64,
        #[arg(long = "annotation_path")]
        annotation_path: PathBuf,
        #[arg(long = "config")]
        config: PathBuf,
        #[arg(long = "output_dir")]
        output_dir: PathBuf,
        #[arg(long = "phase")]
        phase: String,
        #[arg(long = "workers")]
        workers: Option<usize>,
        /// Stop after this many polls (default: run until killed).
        #[arg(long = "max_polls")]
        max_polls: Option<usize>,
    },
    /// Write synthetic submissions, annotations and a config.
    Synth {
        #[arg(long = "output_dir")]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long = "signal_dims", default_value_t = 8)]
        signal_dims: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "k_folds", default_value_t = 10)]
        k_folds: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Evaluate {
            annotation_path,
            submission_file,
            output_dir,
            config,
            method_name,
            phase,
            workers,
        } => {
            let config = ingest::load_config(&config)?;
            let pool = runner::worker_pool(workers)?;
            let req = EvaluationRequest {
                submission: &submission_file,
                annotations: &annotation_path,
                config: &config,
                method: &method_name,
                phase: &phase,
                output_dir: &output_dir,
            };
            let out = runner::evaluate_submission(&req, &pool, &SystemClock)?;
            println!("{}", out.experiment_dir.display());
            for t in &out.record.tasks {
                println!(
                    "  {:<24} {:<14} Q = {:>8.3}{}",
                    t.name,
                    t.kind.to_string(),
                    t.quality.q,
                    if t.quality.unreliable {
                        "  (unreliable)"
                    } else {
                        ""
                    }
                );
            }
            println!("  mean Q = {:.3}", out.record.mean_q());
            Ok(())
        }
        Command::Serve {
            watch_dir,
            interval_seconds,
            annotation_path,
            config,
            output_dir,
            phase,
            workers,
            max_polls,
        } => {
            if !watch_dir.is_dir() {
                return Err(
                    format!("watch directory {} does not exist", watch_dir.display()).into(),
                );
            }
            let options = ServeOptions {
                interval: Duration::from_secs(interval_seconds),
                annotations: annotation_path,
                config: ingest::load_config(&config)?,
                output_dir,
                phase,
            };
            let mut service = Service::new(
                FsQueue::new(watch_dir),
                options,
                Box::new(SystemClock),
                runner::worker_pool(workers)?,
            )?;
            let stop = AtomicBool::new(false);
            service.run(&stop, max_polls);
            Ok(())
        }
        Command::Synth {
            output_dir,
            samples,
            dim,
            signal_dims,
            noise,
            seed,
            k_folds,
        } => {
            let spec = SynthSpec::linear(samples, dim, signal_dims, noise, seed);
            let bundle = synth::write_fixture_bundle(&output_dir, &spec, k_folds)?;
            println!("submission:        {}", bundle.submission.display());
            println!("random baseline:   {}", bundle.random_submission.display());
            println!("annotations:       {}", bundle.annotations.display());
            println!("config:            {}", bundle.config.display());
            Ok(())
        }
    }
}
