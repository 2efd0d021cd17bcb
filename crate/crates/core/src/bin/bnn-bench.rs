//! Benchmark, verification and weight export for binarized networks.
//!
//! Exit status: 0 on success, 1 when verification fails, 2 on a
//! configuration or spec error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xnor_bnn::bench::{
    emit_report, force_kernel, render_table, run_benchmark, run_verify, BenchConfig, DEFAULT_SEED,
};
use xnor_bnn::network::{Layer, Network, Weights};
use xnor_bnn::KernelChoice;

#[derive(Parser)]
#[command(
    name = "bnn-bench",
    version,
    about = "XNOR-popcount vs float-32 control-group inference benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time inference under each kernel and report the speedup.
    Bench(BenchArgs),
    /// Check binary logits against the float reference graph.
    Verify(CommonArgs),
    /// Export the packed weights of every conv and linear layer.
    Pack(PackArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Network description (TOML); the built-in CIFAR-10 network when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Tensor blob to use instead of synthetic inputs.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Write the JSON summary here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Kernels to time, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "binary,float")]
    kernel: Vec<KernelChoice>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip per-layer timing.
    #[arg(long)]
    no_layer_timing: bool,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output directory, one `layerNN.pbm` blob per conv/linear layer.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> xnor_bnn::Result<ExitCode> {
    match command {
        Command::Bench(a) => {
            let cfg = BenchConfig {
                spec_path: a.spec,
                kernels: a.kernel,
                batch: a.batch,
                iterations: a.iters,
                warmup: a.warmup,
                threads: a.threads,
                seed: a.seed,
                output_path: a.out.clone(),
                input_path: a.input,
                layer_timing: !a.no_layer_timing,
            };
            let report = run_benchmark(&cfg)?;
            let table = match &a.out {
                Some(p) => emit_report(&report, p)?,
                None => render_table(&report),
            };
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify(a) => {
            let cfg = BenchConfig {
                spec_path: a.spec,
                batch: a.batch,
                threads: a.threads,
                seed: a.seed,
                input_path: a.input,
                output_path: a.out.clone(),
                ..BenchConfig::default()
            };
            let summary = run_verify(&cfg)?;
            println!(
                "{}: batch {}, max |deviation| {:e} (tolerance {:e}), padded layers {:?}: {}",
                summary.network,
                summary.batch,
                summary.max_abs_deviation,
                summary.tolerance,
                summary.padded_layers,
                if summary.passed { "PASS" } else { "FAIL" }
            );
            if let Some(p) = &a.out {
                let json = serde_json::to_string_pretty(&summary)
                    .map_err(|e| xnor_bnn::Error::Format(e.to_string()))?;
                std::fs::write(p, json)?;
            }
            Ok(if summary.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Pack(a) => {
            let cfg = BenchConfig {
                spec_path: a.spec,
                seed: a.seed,
                ..BenchConfig::default()
            };
            let spec = force_kernel(&cfg.network_spec()?, KernelChoice::Binary);
            let net = Network::build(&spec)?;
            std::fs::create_dir_all(&a.out)?;
            for (i, layer) in net.layers.iter().enumerate() {
                let w = match layer {
                    Layer::Conv(c) => &c.weights,
                    Layer::Linear(l) => &l.weights,
                    _ => continue,
                };
                if let Weights::Packed(p) = w {
                    let path = a.out.join(format!("layer{i:02}.pbm"));
                    p.save(&path)?;
                    println!(
                        "{} {}x{} -> {} bytes",
                        path.display(),
                        p.rows(),
                        p.cols(),
                        p.byte_len()
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
