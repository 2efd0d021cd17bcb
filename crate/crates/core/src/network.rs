//! Layer forwards for the float and binary graphs, the network description
//! format and the default benchmark network.
//!
//! A [`NetworkSpec`] is a plain description (TOML on disk). [`Network::build`]
//! validates the shape chain, generates or loads parameters, sign-binarizes
//! every conv/linear weight and, for binary layers, packs the weights once.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::binarize::{pack_sign_cols, pack_sign_rows, sign_matrix, sign_value, unpack};
use crate::error::{Error, Result};
use crate::kernels::{bias_add_in_place, float_gemm_threads, naive_conv, xnor_gemm_threads};
use crate::lowering::{im2col, reshape_output};
use crate::tensor::{
    mix64, random_values, ConvGeometry, FloatMatrix, FloatTensor, PackedBitMatrix, WORD_BITS,
};

/// Which GEMM engine a conv or linear layer runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    /// Sign, bit-pack and XNOR-popcount.
    Binary,
    /// Float-32 im2col + GEMM control group.
    Float,
    /// Direct convolution; linear layers fall back to the float GEMM.
    Naive,
}

impl KernelChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelChoice::Binary => "binary",
            KernelChoice::Float => "float",
            KernelChoice::Naive => "naive",
        }
    }
}

impl fmt::Display for KernelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KernelChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "binary" => Ok(KernelChoice::Binary),
            "float" => Ok(KernelChoice::Float),
            "naive" => Ok(KernelChoice::Naive),
            other => Err(format!("unknown kernel `{other}` (binary, float, naive)")),
        }
    }
}

fn one() -> usize {
    1
}

/// One entry of a network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        /// Checked against the incoming shape when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_channels: Option<usize>,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        /// Overrides the network-wide kernel.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kernel: Option<KernelChoice>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        /// Tensor blob `[D, C, kH, kW]`; relative to the spec file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    Linear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_features: Option<usize>,
        out_features: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kernel: Option<KernelChoice>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        /// Tensor blob `[out, in, 1, 1]`; relative to the spec file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    Maxpool,
    AffineNorm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    SignAct,
    HtanhAct,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Maxpool => "maxpool",
            LayerSpec::AffineNorm { .. } => "affine_norm",
            LayerSpec::SignAct => "sign_act",
            LayerSpec::HtanhAct => "htanh_act",
        }
    }

    pub fn conv(out_channels: usize, kernel_size: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            in_channels: None,
            out_channels,
            kernel_size,
            stride,
            pad,
            kernel: None,
            seed: None,
            weights: None,
        }
    }

    pub fn linear(out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features: None,
            out_features,
            kernel: None,
            seed: None,
            weights: None,
        }
    }

    pub fn affine() -> Self {
        LayerSpec::AffineNorm { seed: None }
    }
}

/// A network description: input shape, kernel choice, seed and layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// `[batch, channels, height, width]`; the batch extent is only a default.
    pub input: [usize; 4],
    pub kernel: KernelChoice,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    /// Directory that relative blob paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Per-sample shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat {
        features: usize,
    },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            Shape::Flat { features } => features,
        }
    }

    /// Channels for spatial shapes, features otherwise.
    fn leading(&self) -> usize {
        match *self {
            Shape::Spatial { channels, .. } => channels,
            Shape::Flat { features } => features,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
            Shape::Flat { features } => write!(f, "{features}"),
        }
    }
}

impl NetworkSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Spec(e.to_string()))
    }

    /// Parse a spec file; relative blob paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::from_toml_str(&text)
            .map_err(|e| Error::Spec(format!("{}: {}", path.display(), e)))?;
        spec.base_dir = path.parent().map(Path::to_path_buf);
        Ok(spec)
    }

    /// Walk the shape chain; returns the output shape of every layer.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        if self.input.contains(&0) {
            return Err(Error::Spec(format!(
                "zero extent in input {:?}",
                self.input
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        let mut shape = Shape::Spatial {
            channels: self.input[1],
            height: self.input[2],
            width: self.input[3],
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            shape = next_shape(layer, shape).map_err(|e| Error::Layer {
                index,
                kind: layer.kind(),
                source: Box::new(e),
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.validate()?.last().expect("non-empty"))
    }

    fn layer_seed(&self, index: usize, explicit: Option<u64>) -> u64 {
        explicit.unwrap_or_else(|| mix64(self.seed ^ mix64(index as u64 + 1)))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn next_shape(layer: &LayerSpec, shape: Shape) -> Result<Shape> {
    match (layer, shape) {
        (
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                pad,
                ..
            },
            Shape::Spatial {
                channels,
                height,
                width,
            },
        ) => {
            if let Some(c) = in_channels {
                if *c != channels {
                    return Err(Error::Spec(format!(
                        "declares {c} input channels but receives {channels}"
                    )));
                }
            }
            let geom = ConvGeometry::square(channels, *out_channels, *kernel_size, *stride, *pad);
            let (h, w) = geom.output_dims(height, width)?;
            Ok(Shape::Spatial {
                channels: *out_channels,
                height: h,
                width: w,
            })
        }
        (LayerSpec::Conv { .. }, Shape::Flat { .. }) => {
            Err(Error::Spec("conv after a flattening layer".into()))
        }
        (
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            },
            s,
        ) => {
            if let Some(f) = in_features {
                if *f != s.numel() {
                    return Err(Error::Spec(format!(
                        "declares {f} input features but receives {}",
                        s.numel()
                    )));
                }
            }
            if *out_features == 0 {
                return Err(Error::Spec("zero output features".into()));
            }
            Ok(Shape::Flat {
                features: *out_features,
            })
        }
        (
            LayerSpec::Maxpool,
            Shape::Spatial {
                channels,
                height,
                width,
            },
        ) => {
            if height < 2 || width < 2 {
                return Err(Error::Spec(format!("cannot pool {height}x{width}")));
            }
            Ok(Shape::Spatial {
                channels,
                height: height / 2,
                width: width / 2,
            })
        }
        (LayerSpec::Maxpool, Shape::Flat { .. }) => {
            Err(Error::Spec("maxpool on flat features".into()))
        }
        (LayerSpec::AffineNorm { .. } | LayerSpec::SignAct | LayerSpec::HtanhAct, s) => Ok(s),
    }
}

/// The benchmark network: the BNN CIFAR-10 stack of six 3x3 convolutions
/// (128, 128, 256, 256, 512, 512 channels, pooling after every second one)
/// and three linear layers (1024, 1024, 10), with affine norm, htanh and
/// sign between layers.
pub fn build_default_network(kernel: KernelChoice, seed: u64) -> NetworkSpec {
    let mut layers = Vec::new();
    let block = |layers: &mut Vec<LayerSpec>| {
        layers.push(LayerSpec::affine());
        layers.push(LayerSpec::HtanhAct);
        layers.push(LayerSpec::SignAct);
    };
    for (i, channels) in [128, 128, 256, 256, 512, 512].into_iter().enumerate() {
        layers.push(LayerSpec::conv(channels, 3, 1, 1));
        if i % 2 == 1 {
            layers.push(LayerSpec::Maxpool);
        }
        block(&mut layers);
    }
    for features in [1024, 1024] {
        layers.push(LayerSpec::linear(features));
        block(&mut layers);
    }
    layers.push(LayerSpec::linear(10));
    layers.push(LayerSpec::affine());
    NetworkSpec {
        name: "bnn-cifar10".into(),
        input: [1, 3, 32, 32],
        kernel,
        seed,
        layers,
        base_dir: None,
    }
}

/// GEMM operand for a conv or linear layer: `[out, inner]` ±1 weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Float(FloatMatrix),
    Packed(PackedBitMatrix),
}

impl Weights {
    pub fn rows(&self) -> usize {
        match self {
            Weights::Float(m) => m.rows(),
            Weights::Packed(p) => p.rows(),
        }
    }

    pub fn inner(&self) -> usize {
        match self {
            Weights::Float(m) => m.cols(),
            Weights::Packed(p) => p.cols(),
        }
    }

    /// ±1 float view; decodes packed weights.
    pub fn to_float(&self) -> FloatMatrix {
        match self {
            Weights::Float(m) => m.clone(),
            Weights::Packed(p) => unpack(p),
        }
    }

    fn for_kernel(signed: FloatMatrix, kernel: KernelChoice) -> Self {
        match kernel {
            KernelChoice::Binary => Weights::Packed(pack_sign_rows(&signed)),
            KernelChoice::Float | KernelChoice::Naive => Weights::Float(signed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub geom: ConvGeometry,
    pub kernel: KernelChoice,
    pub weights: Weights,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub kernel: KernelChoice,
    pub weights: Weights,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(ConvLayer),
    Linear(LinearLayer),
    Maxpool,
    AffineNorm(AffineLayer),
    Sign,
    Htanh,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::Maxpool => "maxpool",
            Layer::AffineNorm(_) => "affine_norm",
            Layer::Sign => "sign_act",
            Layer::Htanh => "htanh_act",
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.rows() * c.weights.inner() + c.bias.len(),
            Layer::Linear(l) => l.weights.rows() * l.weights.inner() + l.bias.len(),
            Layer::AffineNorm(a) => a.scale.len() + a.shift.len(),
            _ => 0,
        }
    }
}

/// Weight storage of one conv or linear layer, float versus packed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub index: usize,
    pub kind: String,
    pub out_rows: usize,
    pub inner: usize,
    /// `out_rows * ceil(inner / 32) * 4`.
    pub packed_bytes: usize,
    /// `out_rows * inner * 4`.
    pub float_bytes: usize,
}

/// Values flowing between layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    Spatial(FloatTensor),
    /// `[features, batch]`.
    Flat(FloatMatrix),
}

impl Activation {
    /// `[C*H*W, batch]`, one column per batch element.
    pub fn into_flat(self) -> FloatMatrix {
        match self {
            Activation::Flat(m) => m,
            Activation::Spatial(t) => flatten(&t),
        }
    }
}

/// `[N, C, H, W]` to `[C*H*W, N]`.
pub fn flatten(t: &FloatTensor) -> FloatMatrix {
    let per = t.sample_len();
    let data = t.data();
    FloatMatrix::from_fn(per, t.batch(), |f, n| data[n * per + f])
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Worker count inside each GEMM.
    pub threads: usize,
    /// Run every conv/linear layer as a float GEMM on the sign-binarized
    /// lowered input, the exact float counterpart of the binary graph.
    pub reference: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            reference: false,
        }
    }
}

/// A built network with materialised parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<Layer>,
    pub shapes: Vec<Shape>,
}

impl Network {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut shape = Shape::Spatial {
            channels: spec.input[1],
            height: spec.input[2],
            width: spec.input[3],
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (index, ls) in spec.layers.iter().enumerate() {
            let layer = build_layer(spec, index, ls, shape).map_err(|e| Error::Layer {
                index,
                kind: ls.kind(),
                source: Box::new(e),
            })?;
            layers.push(layer);
            shape = shapes[index];
        }
        Ok(Self {
            name: spec.name.clone(),
            input: Shape::Spatial {
                channels: spec.input[1],
                height: spec.input[2],
                width: spec.input[3],
            },
            layers,
            shapes,
        })
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("validated network has layers")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Weight byte counts for every conv and linear layer, from shapes alone.
    pub fn memory(&self) -> Vec<LayerMemory> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(index, l)| {
                let w = match l {
                    Layer::Conv(c) => &c.weights,
                    Layer::Linear(l) => &l.weights,
                    _ => return None,
                };
                let (rows, inner) = (w.rows(), w.inner());
                Some(LayerMemory {
                    index,
                    kind: l.kind().to_string(),
                    out_rows: rows,
                    inner,
                    packed_bytes: rows * inner.div_ceil(WORD_BITS) * 4,
                    float_bytes: rows * inner * 4,
                })
            })
            .collect()
    }

    /// Flip one bit of a packed weight line. Test hook for verification.
    pub fn corrupt_packed_weight(&mut self, layer: usize, line: usize, bit: usize) -> Result<()> {
        let weights = match self.layers.get_mut(layer) {
            Some(Layer::Conv(c)) => &mut c.weights,
            Some(Layer::Linear(l)) => &mut l.weights,
            _ => return Err(Error::Spec(format!("layer {layer} has no weights"))),
        };
        match weights {
            Weights::Packed(p) => {
                if line >= p.rows() || bit >= p.cols() {
                    return Err(Error::shape(format!("bit ({line}, {bit}) out of range")));
                }
                let v = p.get(line, bit);
                p.set(line, bit, !v);
                Ok(())
            }
            Weights::Float(_) => Err(Error::Spec(format!("layer {layer} is not packed"))),
        }
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatMatrix> {
        self.forward_with(x, &ForwardOptions::default(), None)
    }

    /// Run every layer in order and return `[outputs, batch]` logits. When
    /// `timings` is given, it receives one wall-clock duration per layer.
    pub fn forward_with(
        &self,
        x: &FloatTensor,
        opts: &ForwardOptions,
        mut timings: Option<&mut Vec<Duration>>,
    ) -> Result<FloatMatrix> {
        let expected = self.input;
        if let Shape::Spatial {
            channels,
            height,
            width,
        } = expected
        {
            if [x.channels(), x.height(), x.width()] != [channels, height, width] {
                return Err(Error::shape(format!(
                    "network expects {expected} inputs, got {:?}",
                    x.dims()
                )));
            }
        }
        if let Some(t) = timings.as_deref_mut() {
            t.clear();
        }
        let mut act = Activation::Spatial(x.clone());
        for (index, layer) in self.layers.iter().enumerate() {
            let start = Instant::now();
            act = apply_layer(layer, act, opts).map_err(|e| Error::Layer {
                index,
                kind: layer.kind(),
                source: Box::new(e),
            })?;
            if let Some(t) = timings.as_deref_mut() {
                t.push(start.elapsed());
            }
        }
        Ok(act.into_flat())
    }
}

/// Free-function form of [`Network::forward`].
pub fn network_forward(net: &Network, x: &FloatTensor) -> Result<FloatMatrix> {
    net.forward(x)
}

fn build_layer(spec: &NetworkSpec, index: usize, ls: &LayerSpec, input: Shape) -> Result<Layer> {
    Ok(match ls {
        LayerSpec::Conv {
            out_channels,
            kernel_size,
            stride,
            pad,
            kernel,
            seed,
            weights,
            ..
        } => {
            let channels = input.leading();
            let geom = ConvGeometry::square(channels, *out_channels, *kernel_size, *stride, *pad);
            let seed = spec.layer_seed(index, *seed);
            let raw = match weights {
                Some(p) => load_weights(
                    &spec.resolve(p),
                    [*out_channels, channels, *kernel_size, *kernel_size],
                )?,
                None => FloatMatrix::from_vec(
                    *out_channels,
                    geom.patch_len(),
                    random_values(*out_channels * geom.patch_len(), seed),
                )?,
            };
            let kernel = kernel.unwrap_or(spec.kernel);
            Layer::Conv(ConvLayer {
                geom,
                kernel,
                weights: Weights::for_kernel(sign_matrix(&raw), kernel),
                bias: random_values(*out_channels, seed ^ BIAS_STREAM),
            })
        }
        LayerSpec::Linear {
            out_features,
            kernel,
            seed,
            weights,
            ..
        } => {
            let in_features = input.numel();
            let seed = spec.layer_seed(index, *seed);
            let raw = match weights {
                Some(p) => load_weights(&spec.resolve(p), [*out_features, in_features, 1, 1])?,
                None => FloatMatrix::from_vec(
                    *out_features,
                    in_features,
                    random_values(*out_features * in_features, seed),
                )?,
            };
            let kernel = kernel.unwrap_or(spec.kernel);
            Layer::Linear(LinearLayer {
                in_features,
                out_features: *out_features,
                kernel,
                weights: Weights::for_kernel(sign_matrix(&raw), kernel),
                bias: random_values(*out_features, seed ^ BIAS_STREAM),
            })
        }
        LayerSpec::Maxpool => Layer::Maxpool,
        LayerSpec::AffineNorm { seed } => {
            let n = input.leading();
            let seed = spec.layer_seed(index, *seed);
            Layer::AffineNorm(AffineLayer {
                scale: random_values(n, seed)
                    .into_iter()
                    .map(|u| 1.0 + 0.5 * u)
                    .collect(),
                shift: random_values(n, seed ^ BIAS_STREAM)
                    .into_iter()
                    .map(|u| 0.5 * u)
                    .collect(),
            })
        }
        LayerSpec::SignAct => Layer::Sign,
        LayerSpec::HtanhAct => Layer::Htanh,
    })
}

const BIAS_STREAM: u64 = 0xB1A5_B1A5_B1A5_B1A5;

fn load_weights(path: &Path, dims: [usize; 4]) -> Result<FloatMatrix> {
    let t = FloatTensor::load(path)?;
    if t.dims() != dims {
        return Err(Error::Spec(format!(
            "{}: weight blob is {:?}, layer needs {dims:?}",
            path.display(),
            t.dims()
        )));
    }
    FloatMatrix::from_vec(dims[0], dims[1] * dims[2] * dims[3], t.into_vec())
}

fn apply_layer(layer: &Layer, act: Activation, opts: &ForwardOptions) -> Result<Activation> {
    Ok(match (layer, act) {
        (Layer::Conv(c), Activation::Spatial(x)) => {
            let t = opts.threads;
            let y = match (&c.weights, opts.reference) {
                (w, true) => conv_forward_reference(&x, &w.to_float(), &c.bias, &c.geom, t)?,
                (Weights::Packed(p), false) => conv_forward_binary(&x, p, &c.bias, &c.geom, t)?,
                (Weights::Float(w), false) if c.kernel == KernelChoice::Naive => {
                    conv_forward_naive(&x, w, &c.bias, &c.geom)?
                }
                (Weights::Float(w), false) => conv_forward_float(&x, w, &c.bias, &c.geom, t)?,
            };
            Activation::Spatial(y)
        }
        (Layer::Conv(_), Activation::Flat(_)) => {
            return Err(Error::shape("conv received flattened input"));
        }
        (Layer::Linear(l), act) => {
            let x = act.into_flat();
            let y = if opts.reference {
                linear_forward_float(
                    &sign_matrix(&x),
                    &l.weights.to_float(),
                    &l.bias,
                    opts.threads,
                )?
            } else {
                linear_forward(&x, &l.weights, &l.bias, opts.threads)?
            };
            Activation::Flat(y)
        }
        (Layer::Maxpool, Activation::Spatial(x)) => Activation::Spatial(maxpool2(&x)?),
        (Layer::Maxpool, Activation::Flat(_)) => {
            return Err(Error::shape("maxpool received flattened input"));
        }
        (Layer::AffineNorm(a), Activation::Spatial(x)) => {
            Activation::Spatial(affine_norm(&x, &a.scale, &a.shift)?)
        }
        (Layer::AffineNorm(a), Activation::Flat(x)) => {
            Activation::Flat(affine_norm_flat(&x, &a.scale, &a.shift)?)
        }
        (Layer::Sign, Activation::Spatial(x)) => Activation::Spatial(x.map(sign_value)),
        (Layer::Sign, Activation::Flat(x)) => Activation::Flat(x.map(sign_value)),
        (Layer::Htanh, Activation::Spatial(x)) => {
            Activation::Spatial(x.map(crate::binarize::htanh_value))
        }
        (Layer::Htanh, Activation::Flat(x)) => {
            Activation::Flat(x.map(crate::binarize::htanh_value))
        }
    })
}

fn check_weights(w_rows: usize, w_inner: usize, bias: &[f32], geom: &ConvGeometry) -> Result<()> {
    if w_rows != geom.out_channels || w_inner != geom.patch_len() {
        return Err(Error::shape(format!(
            "weights are {w_rows}x{w_inner}, geometry needs {}x{}",
            geom.out_channels,
            geom.patch_len()
        )));
    }
    if bias.len() != geom.out_channels {
        return Err(Error::shape(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            geom.out_channels
        )));
    }
    Ok(())
}

/// Run `per_sample` on every batch element and stack the results.
fn per_batch(
    x: &FloatTensor,
    mut per_sample: impl FnMut(FloatTensor) -> Result<FloatTensor>,
) -> Result<FloatTensor> {
    let outs = (0..x.batch())
        .map(|n| per_sample(x.batch_slice(n)?))
        .collect::<Result<Vec<_>>>()?;
    FloatTensor::stack(&outs)
}

/// Control-group convolution: im2col, float GEMM, bias add, reshape.
pub fn conv_forward_float(
    x: &FloatTensor,
    weights: &FloatMatrix,
    bias: &[f32],
    geom: &ConvGeometry,
    threads: usize,
) -> Result<FloatTensor> {
    check_weights(weights.rows(), weights.cols(), bias, geom)?;
    let (out_h, out_w) = geom.output_dims(x.height(), x.width())?;
    per_batch(x, |s| {
        let mut y = float_gemm_threads(weights, &im2col(&s, geom)?, threads)?;
        bias_add_in_place(&mut y, bias)?;
        reshape_output(&y, out_h, out_w)
    })
}

/// Float GEMM on the sign-binarized lowered input. Matches the binary graph
/// exactly, including padding taps that binarize to +1.
pub fn conv_forward_reference(
    x: &FloatTensor,
    weights: &FloatMatrix,
    bias: &[f32],
    geom: &ConvGeometry,
    threads: usize,
) -> Result<FloatTensor> {
    check_weights(weights.rows(), weights.cols(), bias, geom)?;
    let (out_h, out_w) = geom.output_dims(x.height(), x.width())?;
    per_batch(x, |s| {
        let lowered = sign_matrix(&im2col(&s, geom)?);
        let mut y = float_gemm_threads(&sign_matrix(weights), &lowered, threads)?;
        bias_add_in_place(&mut y, bias)?;
        reshape_output(&y, out_h, out_w)
    })
}

/// Binary convolution: im2col, sign and column-pack, XNOR-popcount GEMM
/// against row-packed weights, bias add, reshape.
pub fn conv_forward_binary(
    x: &FloatTensor,
    packed: &PackedBitMatrix,
    bias: &[f32],
    geom: &ConvGeometry,
    threads: usize,
) -> Result<FloatTensor> {
    check_weights(packed.rows(), packed.cols(), bias, geom)?;
    let (out_h, out_w) = geom.output_dims(x.height(), x.width())?;
    let inner = geom.patch_len();
    per_batch(x, |s| {
        let cols = pack_sign_cols(&im2col(&s, geom)?);
        let mut y = xnor_gemm_threads(packed, &cols, inner, threads)?.to_float();
        bias_add_in_place(&mut y, bias)?;
        reshape_output(&y, out_h, out_w)
    })
}

/// Direct convolution plus bias, with weights in lowering row order.
pub fn conv_forward_naive(
    x: &FloatTensor,
    weights: &FloatMatrix,
    bias: &[f32],
    geom: &ConvGeometry,
) -> Result<FloatTensor> {
    check_weights(weights.rows(), weights.cols(), bias, geom)?;
    let w = FloatTensor::from_vec(
        [geom.out_channels, geom.in_channels, geom.k_h, geom.k_w],
        weights.data().to_vec(),
    )?;
    per_batch(x, |s| {
        let mut y = naive_conv(&s, &w, geom)?;
        let plane = y.height() * y.width();
        for (chunk, b) in y.data_mut().chunks_mut(plane).zip(bias) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(y)
    })
}

/// Float path of a linear layer: `W x + b` on `[features, batch]` input.
pub fn linear_forward_float(
    x: &FloatMatrix,
    weights: &FloatMatrix,
    bias: &[f32],
    threads: usize,
) -> Result<FloatMatrix> {
    let mut y = float_gemm_threads(weights, x, threads)?;
    bias_add_in_place(&mut y, bias)?;
    Ok(y)
}

/// Binary path of a linear layer: sign and column-pack the input, then
/// XNOR-popcount against the row-packed weights.
pub fn linear_forward_binary(
    x: &FloatMatrix,
    packed: &PackedBitMatrix,
    bias: &[f32],
    threads: usize,
) -> Result<FloatMatrix> {
    let cols = pack_sign_cols(x);
    let mut y = xnor_gemm_threads(packed, &cols, x.rows(), threads)?.to_float();
    bias_add_in_place(&mut y, bias)?;
    Ok(y)
}

/// Dispatch on the weight storage.
pub fn linear_forward(
    x: &FloatMatrix,
    weights: &Weights,
    bias: &[f32],
    threads: usize,
) -> Result<FloatMatrix> {
    match weights {
        Weights::Float(w) => linear_forward_float(x, w, bias, threads),
        Weights::Packed(p) => linear_forward_binary(x, p, bias, threads),
    }
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
pub fn maxpool2(x: &FloatTensor) -> Result<FloatTensor> {
    let [n, c, h, w] = x.dims();
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("cannot pool {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FloatTensor::zeros([n, c, oh, ow])?;
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            let r0 = &s[2 * i * w..(2 * i + 1) * w];
            let r1 = &s[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                d[i * ow + j] = r0[2 * j]
                    .max(r0[2 * j + 1])
                    .max(r1[2 * j])
                    .max(r1[2 * j + 1]);
            }
        }
    }
    Ok(out)
}

/// Per-channel `scale * x + shift` (inference-time batch norm).
pub fn affine_norm(x: &FloatTensor, scale: &[f32], shift: &[f32]) -> Result<FloatTensor> {
    let c = x.channels();
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "affine params have {}/{} entries for {c} channels",
            scale.len(),
            shift.len()
        )));
    }
    let plane = x.height() * x.width();
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        chunk.iter_mut().for_each(|v| *v = a * *v + b);
    }
    Ok(y)
}

/// Per-feature affine on `[features, batch]` input.
pub fn affine_norm_flat(x: &FloatMatrix, scale: &[f32], shift: &[f32]) -> Result<FloatMatrix> {
    if scale.len() != x.rows() || shift.len() != x.rows() {
        return Err(Error::shape(format!(
            "affine params have {}/{} entries for {} features",
            scale.len(),
            shift.len(),
            x.rows()
        )));
    }
    Ok(FloatMatrix::from_fn(x.rows(), x.cols(), |r, c| {
        scale[r] * x.get(r, c) + shift[r]
    }))
}
