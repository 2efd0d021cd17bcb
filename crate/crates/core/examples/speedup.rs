//! A short binary vs control-group benchmark on the default network.
//!
//!     cargo run --release --example speedup -- 16

use xnor_bnn::bench::{render_table, BenchConfig};
use xnor_bnn::run_benchmark;

fn main() -> xnor_bnn::Result<()> {
    let batch = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(8);
    let cfg = BenchConfig {
        batch,
        iterations: 3,
        warmup: 1,
        ..BenchConfig::default()
    };
    let report = run_benchmark(&cfg)?;
    print!("{}", render_table(&report));
    Ok(())
}
