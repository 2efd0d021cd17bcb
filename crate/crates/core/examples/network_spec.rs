//! Print the default CIFAR-10 network description as TOML, with its shape
//! chain and weight storage. Pass a path to also write the TOML there.
//!
//!     cargo run --example network_spec -- specs/bnn-cifar10.toml

use xnor_bnn::bench::DEFAULT_SEED;
use xnor_bnn::{build_default_network, KernelChoice, Network};

fn main() -> xnor_bnn::Result<()> {
    let spec = build_default_network(KernelChoice::Binary, DEFAULT_SEED);
    let text = spec.to_toml_string()?;
    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, &text)?;
        eprintln!("wrote {path}");
    } else {
        print!("{text}");
    }

    let net = Network::build(&spec)?;
    println!("\n# shape chain");
    for (i, (layer, shape)) in net.layers.iter().zip(&net.shapes).enumerate() {
        println!("{i:>3} {:<12} -> {shape}", layer.kind());
    }
    println!("\n# parameters: {}", net.param_count());
    for m in net.memory() {
        println!(
            "layer {:>2} {:<6} [{} x {}]  float {:>9} B  packed {:>8} B",
            m.index, m.kind, m.out_rows, m.inner, m.float_bytes, m.packed_bytes
        );
    }
    Ok(())
}
