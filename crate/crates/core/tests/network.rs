use std::path::Path;

use xnor_bnn::bench::{force_kernel, DEFAULT_SEED};
use xnor_bnn::binarize::sign;
use xnor_bnn::network::{ForwardOptions, Layer, Shape, Weights};
use xnor_bnn::tensor::{fill_random, random_values};
use xnor_bnn::{
    build_default_network, Error, FloatTensor, KernelChoice, LayerSpec, Network, NetworkSpec,
};

fn small_spec(kernel: KernelChoice, pad: usize) -> NetworkSpec {
    NetworkSpec {
        name: "small".into(),
        input: [2, 3, 12, 12],
        kernel,
        seed: 5,
        layers: vec![
            LayerSpec::conv(16, 3, 1, pad),
            LayerSpec::affine(),
            LayerSpec::HtanhAct,
            LayerSpec::SignAct,
            LayerSpec::conv(11, 3, 1, pad),
            LayerSpec::Maxpool,
            LayerSpec::affine(),
            LayerSpec::SignAct,
            LayerSpec::linear(33),
            LayerSpec::affine(),
            LayerSpec::SignAct,
            LayerSpec::linear(10),
        ],
        base_dir: None,
    }
}

fn max_rel(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f32::max)
}

#[test]
fn default_network_shape_and_determinism() {
    let spec = build_default_network(KernelChoice::Binary, 3);
    let net = Network::build(&spec).unwrap();
    assert_eq!(net.output_shape(), Shape::Flat { features: 10 });
    let x = fill_random([1, 3, 32, 32], 1).unwrap();
    let a = net.forward(&x).unwrap();
    assert_eq!((a.rows(), a.cols()), (10, 1));
    assert_eq!(a, net.forward(&x).unwrap());
}

#[test]
fn same_seed_same_parameters() {
    let a = Network::build(&build_default_network(KernelChoice::Binary, 4)).unwrap();
    let b = Network::build(&build_default_network(KernelChoice::Binary, 4)).unwrap();
    let c = Network::build(&build_default_network(KernelChoice::Binary, 5)).unwrap();
    let weights = |n: &Network| -> Vec<Weights> {
        n.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.weights.clone()),
                Layer::Linear(l) => Some(l.weights.clone()),
                _ => None,
            })
            .collect()
    };
    assert_eq!(weights(&a), weights(&b));
    assert_ne!(weights(&a), weights(&c));
}

#[test]
fn parameter_count_and_uniform_kernel() {
    for kernel in [KernelChoice::Binary, KernelChoice::Float] {
        let net = Network::build(&build_default_network(kernel, 1)).unwrap();
        assert!(net.param_count() > 1_000_000);
        for l in &net.layers {
            match l {
                Layer::Conv(c) => assert_eq!(c.kernel, kernel),
                Layer::Linear(l) => assert_eq!(l.kernel, kernel),
                _ => {}
            }
        }
    }
}

#[test]
fn packed_weights_compress_by_32() {
    let net = Network::build(&build_default_network(KernelChoice::Binary, 1)).unwrap();
    for m in net.memory() {
        assert!(
            m.packed_bytes * 32 <= m.float_bytes + 32 * 4 * m.out_rows,
            "{m:?}"
        );
    }
}

#[test]
fn kernels_interchangeable_on_binarized_inputs() {
    // Without spatial padding every GEMM operand is ±1 in both graphs.
    let x = sign(&fill_random([2, 3, 12, 12], 9).unwrap());
    let float = Network::build(&small_spec(KernelChoice::Float, 0))
        .unwrap()
        .forward(&x)
        .unwrap();
    let binary = Network::build(&small_spec(KernelChoice::Binary, 0))
        .unwrap()
        .forward(&x)
        .unwrap();
    let naive = Network::build(&small_spec(KernelChoice::Naive, 0))
        .unwrap()
        .forward(&x)
        .unwrap();
    assert!(max_rel(binary.data(), float.data()) <= 1e-4);
    assert!(max_rel(naive.data(), float.data()) <= 1e-4);
}

#[test]
fn reference_route_matches_binary_with_padding() {
    let x = fill_random([2, 3, 12, 12], 10).unwrap();
    let binary = Network::build(&small_spec(KernelChoice::Binary, 1)).unwrap();
    let float = Network::build(&small_spec(KernelChoice::Float, 1)).unwrap();
    let reference = float
        .forward_with(
            &x,
            &ForwardOptions {
                threads: 1,
                reference: true,
            },
            None,
        )
        .unwrap();
    assert!(max_rel(binary.forward(&x).unwrap().data(), reference.data()) <= 1e-4);
}

#[test]
fn layer_timings_cover_every_layer() {
    let net = Network::build(&small_spec(KernelChoice::Binary, 1)).unwrap();
    let x = fill_random([1, 3, 12, 12], 1).unwrap();
    let mut t = Vec::new();
    net.forward_with(&x, &ForwardOptions::default(), Some(&mut t))
        .unwrap();
    assert_eq!(t.len(), net.layers.len());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = Network::build(&small_spec(KernelChoice::Float, 1)).unwrap();
    assert!(net
        .forward(&fill_random([1, 3, 10, 12], 1).unwrap())
        .is_err());
}

#[test]
fn chain_errors_surface_at_build() {
    let mut spec = small_spec(KernelChoice::Binary, 1);
    spec.layers.insert(
        4,
        LayerSpec::Linear {
            in_features: Some(7),
            out_features: 4,
            kernel: None,
            seed: None,
            weights: None,
        },
    );
    match Network::build(&spec) {
        Err(Error::Layer { index: 4, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn shipped_spec_is_the_default_network() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("specs/bnn-cifar10.toml");
    let mut spec = NetworkSpec::load(&path).unwrap();
    assert!(spec.base_dir.is_some());
    spec.base_dir = None;
    assert_eq!(
        spec,
        build_default_network(KernelChoice::Binary, DEFAULT_SEED)
    );
}

#[test]
fn weights_from_blob() {
    let dir = tempfile::tempdir().unwrap();
    let w = FloatTensor::from_vec([4, 3, 3, 3], random_values(108, 3)).unwrap();
    w.save(dir.path().join("conv0.blob")).unwrap();
    let text = r#"
name = "blob"
input = [1, 3, 6, 6]
kernel = "binary"
seed = 1

[[layers]]
kind = "conv"
in_channels = 3
out_channels = 4
kernel_size = 3
weights = "conv0.blob"

[[layers]]
kind = "linear"
out_features = 2
"#;
    let spec_path = dir.path().join("net.toml");
    std::fs::write(&spec_path, text).unwrap();
    let spec = NetworkSpec::load(&spec_path).unwrap();
    let net = Network::build(&spec).unwrap();
    match &net.layers[0] {
        Layer::Conv(c) => {
            let expected = xnor_bnn::binarize::pack_sign_rows(
                &xnor_bnn::FloatMatrix::from_vec(4, 27, w.data().to_vec()).unwrap(),
            );
            assert_eq!(c.weights, Weights::Packed(expected));
        }
        other => panic!("unexpected {other:?}"),
    }

    // Same spec with the float kernel agrees with the reference route.
    let x = fill_random([1, 3, 6, 6], 2).unwrap();
    let float = Network::build(&force_kernel(&spec, KernelChoice::Float)).unwrap();
    let r = float
        .forward_with(
            &x,
            &ForwardOptions {
                threads: 1,
                reference: true,
            },
            None,
        )
        .unwrap();
    assert_eq!(net.forward(&x).unwrap(), r);

    std::fs::write(dir.path().join("conv0.blob"), b"short").unwrap();
    assert!(Network::build(&NetworkSpec::load(&spec_path).unwrap()).is_err());
}

#[test]
fn corrupt_hook_requires_packed_layer() {
    let mut net = Network::build(&small_spec(KernelChoice::Float, 1)).unwrap();
    assert!(net.corrupt_packed_weight(0, 0, 0).is_err());
    let mut net2 = Network::build(&small_spec(KernelChoice::Binary, 1)).unwrap();
    assert!(net2.corrupt_packed_weight(1, 0, 0).is_err());
    assert!(net2.corrupt_packed_weight(0, 0, 0).is_ok());
}
