//! Benchmark and verification harness.
//!
//! [`run_benchmark`] times network inference under each requested kernel on
//! the same deterministic inputs, thread count and batch size. Weight packing
//! happens in [`Network::build`] and is never inside a timed region.
//! [`run_verify`] checks the binary graph against its exact float counterpart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::native_popcount_available;
use crate::network::{
    build_default_network, ForwardOptions, KernelChoice, LayerMemory, LayerSpec, Network,
    NetworkSpec, Shape,
};
use crate::tensor::{fill_random, FloatMatrix, FloatTensor, WORD_BITS};

/// Maximum absolute logit deviation accepted by verification.
pub const VERIFY_TOLERANCE: f32 = 1e-4;

pub const DEFAULT_SEED: u64 = 2018;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Network description; the built-in default network when absent.
    pub spec_path: Option<PathBuf>,
    pub kernels: Vec<KernelChoice>,
    pub batch: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    /// Tensor blob used instead of synthetic inputs.
    pub input_path: Option<PathBuf>,
    pub layer_timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            spec_path: None,
            kernels: vec![KernelChoice::Binary, KernelChoice::Float],
            batch: 64,
            iterations: 20,
            warmup: 3,
            threads: 1,
            seed: DEFAULT_SEED,
            output_path: None,
            input_path: None,
            layer_timing: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Spec("iterations must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Spec("threads must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Spec("batch must be at least 1".into()));
        }
        if self.kernels.is_empty() {
            return Err(Error::Spec("no kernel selected".into()));
        }
        Ok(())
    }

    /// The configured network description.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let spec = match &self.spec_path {
            Some(p) => NetworkSpec::load(p)?,
            None => build_default_network(KernelChoice::Binary, self.seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Synthetic `[batch, C, H, W]` input in `[-1, 1)`, or the input blob.
    pub fn input(&self, spec: &NetworkSpec) -> Result<FloatTensor> {
        let [_, c, h, w] = spec.input;
        match &self.input_path {
            Some(p) => {
                let t = FloatTensor::load(p)?;
                if [t.channels(), t.height(), t.width()] != [c, h, w] {
                    return Err(Error::Spec(format!(
                        "input blob is {:?}, network takes {c}x{h}x{w}",
                        t.dims()
                    )));
                }
                Ok(t)
            }
            None => fill_random([self.batch, c, h, w], self.seed ^ INPUT_STREAM),
        }
    }
}

const INPUT_STREAM: u64 = 0x1A9E_7000_0000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub index: usize,
    pub kind: String,
    /// Mean seconds per timed iteration.
    pub mean_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub kernel: KernelChoice,
    /// Seconds per batch for each timed iteration, in run order.
    pub samples: Vec<f64>,
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub mean_seconds: f64,
    /// Empty when per-layer timing is disabled.
    pub layers: Vec<LayerTiming>,
    /// FNV-1a over the bit patterns of the final logits.
    pub logits_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub layers: Vec<LayerMemory>,
    pub packed_bytes: usize,
    pub float_bytes: usize,
    /// `packed_bytes / float_bytes`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub native_popcount: bool,
    pub timer: String,
    pub timer_resolution_ns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub network: String,
    pub param_count: usize,
    pub config: BenchConfig,
    pub environment: Environment,
    pub kernels: Vec<KernelReport>,
    pub memory: MemorySummary,
    /// Float median over binary median.
    pub speedup_vs_float: Option<f64>,
    /// Naive median over binary median.
    pub speedup_vs_naive: Option<f64>,
}

impl BenchReport {
    pub fn kernel(&self, k: KernelChoice) -> Option<&KernelReport> {
        self.kernels.iter().find(|r| r.kernel == k)
    }
}

/// Median of the samples; the mean of the two middle values for even counts.
pub fn median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub fn logits_hash(m: &FloatMatrix) -> String {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for v in m.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    format!("{h:016x}")
}

/// Smallest nonzero step observed between consecutive monotonic clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..2000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn environment() -> Environment {
    Environment {
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        native_popcount: native_popcount_available(),
        timer: "std::time::Instant (monotonic wall clock)".to_string(),
        timer_resolution_ns: timer_resolution().as_secs_f64() * 1e9,
    }
}

pub fn memory_summary(net: &Network) -> MemorySummary {
    let layers = net.memory();
    let packed_bytes = layers.iter().map(|l| l.packed_bytes).sum();
    let float_bytes: usize = layers.iter().map(|l| l.float_bytes).sum();
    MemorySummary {
        ratio: packed_bytes as f64 / float_bytes.max(1) as f64,
        layers,
        packed_bytes,
        float_bytes,
    }
}

fn with_kernel(spec: &NetworkSpec, kernel: KernelChoice) -> NetworkSpec {
    let mut s = spec.clone();
    s.kernel = kernel;
    s
}

/// Time one network on `x`.
pub fn time_network(
    net: &Network,
    x: &FloatTensor,
    kernel: KernelChoice,
    cfg: &BenchConfig,
) -> Result<KernelReport> {
    let opts = ForwardOptions {
        threads: cfg.threads,
        reference: false,
    };
    for _ in 0..cfg.warmup {
        net.forward_with(x, &opts, None)?;
    }
    let mut samples = Vec::with_capacity(cfg.iterations);
    let mut layer_totals = vec![Duration::ZERO; net.layers.len()];
    let mut per_layer = Vec::with_capacity(net.layers.len());
    let mut logits = None;
    for _ in 0..cfg.iterations {
        let timings = cfg.layer_timing.then_some(&mut per_layer);
        let start = Instant::now();
        let out = net.forward_with(x, &opts, timings)?;
        samples.push(start.elapsed().as_secs_f64());
        if cfg.layer_timing {
            for (acc, d) in layer_totals.iter_mut().zip(&per_layer) {
                *acc += *d;
            }
        }
        logits = Some(out);
    }
    let layers = if cfg.layer_timing {
        net.layers
            .iter()
            .zip(&layer_totals)
            .enumerate()
            .map(|(index, (l, total))| LayerTiming {
                index,
                kind: l.kind().to_string(),
                mean_seconds: total.as_secs_f64() / cfg.iterations as f64,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(KernelReport {
        kernel,
        median_seconds: median(&samples),
        min_seconds: samples.iter().copied().fold(f64::INFINITY, f64::min),
        mean_seconds: samples.iter().sum::<f64>() / samples.len() as f64,
        samples,
        layers,
        logits_hash: logits_hash(&logits.expect("at least one iteration")),
    })
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let x = cfg.input(&spec)?;
    let mut kernels = Vec::new();
    let mut first: Option<Network> = None;
    for &k in &cfg.kernels {
        let net = Network::build(&with_kernel(&spec, k))?;
        kernels.push(time_network(&net, &x, k, cfg)?);
        first.get_or_insert(net);
    }
    let net = first.expect("validated non-empty kernel list");
    let median_of = |k| {
        kernels
            .iter()
            .find(|r: &&KernelReport| r.kernel == k)
            .map(|r| r.median_seconds)
    };
    let binary = median_of(KernelChoice::Binary);
    let ratio = |base: Option<f64>| Some(base? / binary?);
    Ok(BenchReport {
        network: spec.name.clone(),
        param_count: net.param_count(),
        environment: environment(),
        memory: memory_summary(&net),
        speedup_vs_float: ratio(median_of(KernelChoice::Float)),
        speedup_vs_naive: ratio(median_of(KernelChoice::Naive)),
        config: cfg.clone(),
        kernels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub network: String,
    pub batch: usize,
    pub max_abs_deviation: f32,
    pub tolerance: f32,
    pub passed: bool,
    /// Conv/linear layers whose reduction length is not a multiple of 32.
    pub padded_layers: Vec<usize>,
}

/// Spec with every conv/linear layer forced onto `kernel`.
pub fn force_kernel(spec: &NetworkSpec, kernel: KernelChoice) -> NetworkSpec {
    let mut s = with_kernel(spec, kernel);
    for layer in &mut s.layers {
        match layer {
            LayerSpec::Conv { kernel: k, .. } | LayerSpec::Linear { kernel: k, .. } => *k = None,
            _ => {}
        }
    }
    s
}

/// Compare the binary network's logits with the float reference graph.
pub fn verify_networks(
    binary: &Network,
    reference: &Network,
    x: &FloatTensor,
    threads: usize,
) -> Result<VerifySummary> {
    let got = binary.forward_with(
        x,
        &ForwardOptions {
            threads,
            reference: false,
        },
        None,
    )?;
    let want = reference.forward_with(
        x,
        &ForwardOptions {
            threads,
            reference: true,
        },
        None,
    )?;
    if (got.rows(), got.cols()) != (want.rows(), want.cols()) {
        return Err(Error::shape("binary and reference logits differ in shape"));
    }
    let max_abs_deviation = got
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(
            0.0f32,
            |m, d| if d.is_nan() { f32::INFINITY } else { m.max(d) },
        );
    Ok(VerifySummary {
        network: binary.name.clone(),
        batch: x.batch(),
        max_abs_deviation,
        tolerance: VERIFY_TOLERANCE,
        passed: max_abs_deviation <= VERIFY_TOLERANCE,
        padded_layers: binary
            .memory()
            .iter()
            .filter(|m| m.inner % WORD_BITS != 0)
            .map(|m| m.index)
            .collect(),
    })
}

/// Build the configured network with binary and float kernels from the same
/// seeds and check the binary logits against the float reference graph.
pub fn run_verify(cfg: &BenchConfig) -> Result<VerifySummary> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let x = cfg.input(&spec)?;
    let binary = Network::build(&force_kernel(&spec, KernelChoice::Binary))?;
    let reference = Network::build(&force_kernel(&spec, KernelChoice::Float))?;
    verify_networks(&binary, &reference, &x, cfg.threads)
}

/// Human-readable summary in the shape of a kernel-by-time results table.
pub fn render_table(r: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "network {} ({} params), batch {}, threads {}, {} iterations after {} warmup",
        r.network,
        r.param_count,
        r.config.batch,
        r.config.threads,
        r.config.iterations,
        r.config.warmup
    );
    let _ = writeln!(
        s,
        "{:<16} {:>14} {:>14} {:>14}",
        "kernel", "median s/batch", "min", "mean"
    );
    for k in &r.kernels {
        let name = match k.kernel {
            KernelChoice::Binary => "binary (xnor)",
            KernelChoice::Float => "control (float)",
            KernelChoice::Naive => "naive direct",
        };
        let _ = writeln!(
            s,
            "{:<16} {:>14.4} {:>14.4} {:>14.4}",
            name, k.median_seconds, k.min_seconds, k.mean_seconds
        );
    }
    if let Some(x) = r.speedup_vs_float {
        let _ = writeln!(s, "{:<16} {:>13.2}x", "speedup (float)", x);
    }
    if let Some(x) = r.speedup_vs_naive {
        let _ = writeln!(s, "{:<16} {:>13.2}x", "speedup (naive)", x);
    }
    let _ = writeln!(
        s,
        "{:<16} {:>14} {:>14} {:>14}",
        "weight memory", "packed bytes", "float bytes", "ratio"
    );
    let _ = writeln!(
        s,
        "{:<16} {:>14} {:>14} {:>14}",
        "",
        r.memory.packed_bytes,
        r.memory.float_bytes,
        format!("1/{:.1}", 1.0 / r.memory.ratio)
    );
    for k in r.kernels.iter().filter(|k| !k.layers.is_empty()) {
        let _ = writeln!(s, "per-layer mean seconds ({})", k.kernel);
        for l in k
            .layers
            .iter()
            .filter(|l| l.kind == "conv" || l.kind == "linear")
        {
            let _ = writeln!(
                s,
                "  {:>3} {:<12} {:>12.5}",
                l.index, l.kind, l.mean_seconds
            );
        }
    }
    s
}

/// Write the JSON report to `path` and return the rendered table.
pub fn emit_report(r: &BenchReport, path: impl AsRef<Path>) -> Result<String> {
    let json = serde_json::to_string_pretty(r).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(render_table(r))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<BenchReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

/// Per-sample output shape of the configured network.
pub fn output_shape(cfg: &BenchConfig) -> Result<Shape> {
    cfg.network_spec()?.output_shape()
}
