use std::io::Write;
use std::path::PathBuf;
use std::process;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rtdetr::postprocess::{DEFAULT_MAX_DET, DEFAULT_THRESHOLD};
use rtdetr::ModelConfig;
use rtdetr_cli::exit::ShapeDeviation;
use rtdetr_cli::output::{render_json, render_table, OutputFormat};
use rtdetr_cli::{bench, exit_code, selftest, trace_shapes, with_threads, Session, TraceOptions};

#[derive(Parser)]
#[command(
    name = "rtdetr",
    version,
    about = "RT-DETRv2 object detection on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect objects in a PNG or PPM image.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_DET)]
        max_det: usize,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        output: OutputFormat,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the pipeline on random weights and check every stage shape.
    Trace {
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Attach denoising queries built from synthetic ground truth.
        #[arg(long)]
        denoise: bool,
        /// Ground-truth boxes per image when denoising.
        #[arg(long, default_value_t = 5)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the small test configuration instead of the default model.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare the optimized kernels with brute-force references.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = selftest::DEFAULT_CASES)]
        cases: usize,
    },
    /// Measure per-image latency on one and on many threads.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Workers for the concurrent run (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write a checkpoint of seeded random weights.
    InitWeights {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tiny: bool,
    },
}

fn config(tiny: bool) -> ModelConfig {
    if tiny {
        ModelConfig::tiny()
    } else {
        ModelConfig::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Detect {
            image,
            weights,
            threshold,
            max_det,
            output,
            threads,
        } => {
            let bytes =
                std::fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let session = Session::open(&weights)?;
            for name in &session.unused {
                eprintln!("warning: unused checkpoint entry {name}");
            }
            let result = with_threads(threads, || session.detect(&bytes, threshold, max_det))??;
            let name = image.display().to_string();
            let text = match output {
                OutputFormat::Json => render_json(&name, &result, threshold, max_det),
                OutputFormat::Table => render_table(&name, &result),
            };
            stdout.write_all(text.as_bytes())?;
        }
        Command::Trace {
            batch,
            denoise,
            objects,
            seed,
            tiny,
            threads,
        } => {
            anyhow::ensure!(batch > 0, "batch must be positive");
            let opts = TraceOptions {
                config: config(tiny),
                batch,
                denoise_objects: denoise.then_some(objects),
                seed,
            };
            let report = with_threads(threads, || trace_shapes(&opts))??;
            stdout.write_all(report.render().as_bytes())?;
            let stages = report.deviations();
            if !stages.is_empty() {
                return Err(ShapeDeviation { stages }.into());
            }
        }
        Command::Selftest { seed, cases } => {
            let results = selftest::run_all(seed, cases);
            for r in &results {
                writeln!(stdout, "{r}")?;
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
            anyhow::ensure!(failed.is_empty(), "{} kernel suites failed", failed.len());
        }
        Command::Bench {
            weights,
            iters,
            threads,
        } => {
            let session = Session::open(&weights)?;
            let many = threads.unwrap_or_else(rayon::current_num_threads);
            writeln!(
                stdout,
                "{}x{} input, {iters} iterations",
                session.image_size(),
                session.image_size()
            )?;
            for t in [1, many] {
                writeln!(stdout, "{}", bench::run(&session, iters, t)?.summary())?;
            }
        }
        Command::InitWeights { output, seed, tiny } => {
            let store = rtdetr::model::random_checkpoint(&config(tiny), seed)?;
            store.save(&output)?;
            writeln!(
                stdout,
                "wrote {} tensors ({} parameters) to {}",
                store.len(),
                store.parameter_count(),
                output.display()
            )?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        process::exit(exit_code(&err) as i32);
    }
}
