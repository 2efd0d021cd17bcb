//! Check the binary network against the float reference graph, including a
//! layer whose reduction length is not a multiple of 32 and a corrupted
//! weight that verification must catch.

use xnor_bnn::bench::{force_kernel, verify_networks, BenchConfig};
use xnor_bnn::{build_default_network, run_verify, KernelChoice, LayerSpec, Network};

fn main() -> xnor_bnn::Result<()> {
    let cfg = BenchConfig {
        batch: 2,
        ..BenchConfig::default()
    };
    let s = run_verify(&cfg)?;
    println!(
        "default network: max deviation {:e}, padded layers {:?}, pass {}",
        s.max_abs_deviation, s.padded_layers, s.passed
    );

    // 37 channels into a 3x3 conv gives a reduction length of 333.
    let mut spec = build_default_network(KernelChoice::Binary, cfg.seed);
    spec.layers.insert(3, LayerSpec::conv(37, 3, 1, 1));
    let x = cfg.input(&spec)?;
    let mut binary = Network::build(&force_kernel(&spec, KernelChoice::Binary))?;
    let reference = Network::build(&force_kernel(&spec, KernelChoice::Float))?;
    let s = verify_networks(&binary, &reference, &x, 1)?;
    println!(
        "with injected layer: max deviation {:e}, padded layers {:?}, pass {}",
        s.max_abs_deviation, s.padded_layers, s.passed
    );

    binary.corrupt_packed_weight(0, 0, 5)?;
    let s = verify_networks(&binary, &reference, &x, 1)?;
    println!(
        "after flipping one weight bit: max deviation {:e}, pass {}",
        s.max_abs_deviation, s.passed
    );
    Ok(())
}
