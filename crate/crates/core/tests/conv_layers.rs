use xnor_bnn::binarize::{pack_sign_rows, sign, sign_matrix};
use xnor_bnn::kernels::{float_gemm, naive_conv};
use xnor_bnn::lowering::{im2col, reshape_output};
use xnor_bnn::network::{
    conv_forward_binary, conv_forward_float, conv_forward_naive, conv_forward_reference,
    linear_forward_binary, linear_forward_float,
};
use xnor_bnn::tensor::{fill_random, random_matrix, random_values};
use xnor_bnn::{ConvGeometry, FloatMatrix, FloatTensor};

fn weights_tensor(w: &FloatMatrix, g: &ConvGeometry) -> FloatTensor {
    FloatTensor::from_vec(
        [g.out_channels, g.in_channels, g.k_h, g.k_w],
        w.data().to_vec(),
    )
    .unwrap()
}

fn assert_close(a: &FloatTensor, b: &FloatTensor, rel: f32) {
    assert_eq!(a.dims(), b.dims());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= rel * y.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn lowered_gemm_matches_direct_conv() {
    let g = ConvGeometry::square(3, 4, 3, 1, 1);
    let x = fill_random([1, 3, 8, 8], 1).unwrap();
    let w = random_matrix(4, g.patch_len(), 2);
    let (oh, ow) = g.output_dims(8, 8).unwrap();
    let lowered =
        reshape_output(&float_gemm(&w, &im2col(&x, &g).unwrap()).unwrap(), oh, ow).unwrap();
    let direct = naive_conv(&x, &weights_tensor(&w, &g), &g).unwrap();
    assert_close(&lowered, &direct, 1e-4);
}

#[test]
fn conv_float_matches_naive_plus_bias() {
    let g = ConvGeometry::square(3, 4, 3, 1, 1);
    let x = fill_random([1, 3, 8, 8], 3).unwrap();
    let w = random_matrix(4, g.patch_len(), 4);
    let bias = random_values(4, 5);
    let got = conv_forward_float(&x, &w, &bias, &g, 1).unwrap();
    let mut want = naive_conv(&x, &weights_tensor(&w, &g), &g).unwrap();
    for (d, b) in bias.iter().enumerate() {
        for i in 0..8 {
            for j in 0..8 {
                want.set(0, d, i, j, want.get(0, d, i, j) + b);
            }
        }
    }
    assert_close(&got, &want, 1e-4);
    assert_close(&conv_forward_naive(&x, &w, &bias, &g).unwrap(), &want, 1e-6);
}

#[test]
fn zero_weights_give_bias_planes() {
    let g = ConvGeometry::square(2, 3, 3, 1, 1);
    let x = fill_random([1, 2, 5, 5], 1).unwrap();
    let y = conv_forward_float(&x, &FloatMatrix::zeros(3, 18), &[1.0, -2.0, 0.5], &g, 1).unwrap();
    for d in 0..3 {
        assert!((0..25).all(|p| y.data()[d * 25 + p] == [1.0, -2.0, 0.5][d]));
    }
}

#[test]
fn batch_elements_are_independent() {
    let g = ConvGeometry::square(3, 4, 3, 2, 1);
    let x = fill_random([2, 3, 9, 9], 6).unwrap();
    let w = random_matrix(4, g.patch_len(), 7);
    let bias = random_values(4, 8);
    let both = conv_forward_float(&x, &w, &bias, &g, 1).unwrap();
    let packed = pack_sign_rows(&w);
    let both_bin = conv_forward_binary(&x, &packed, &bias, &g, 1).unwrap();
    for n in 0..2 {
        let s = x.batch_slice(n).unwrap();
        assert_eq!(
            both.batch_slice(n).unwrap(),
            conv_forward_float(&s, &w, &bias, &g, 1).unwrap()
        );
        assert_eq!(
            both_bin.batch_slice(n).unwrap(),
            conv_forward_binary(&s, &packed, &bias, &g, 1).unwrap()
        );
    }
}

#[test]
fn binary_conv_equals_float_on_signed_lowering() {
    for (c, d, k, s, p) in [
        (3, 4, 3, 1, 1),
        (5, 2, 3, 2, 0),
        (1, 3, 5, 1, 1),
        (7, 6, 2, 2, 0),
    ] {
        let g = ConvGeometry::square(c, d, k, s, p);
        let x = fill_random([2, c, 9, 9], (c * d) as u64).unwrap();
        if g.output_dims(9, 9).is_err() {
            continue;
        }
        let w = sign_matrix(&random_matrix(d, g.patch_len(), 11));
        let zero = vec![0.0; d];
        let binary = conv_forward_binary(&x, &pack_sign_rows(&w), &zero, &g, 1).unwrap();
        let reference = conv_forward_reference(&x, &w, &zero, &g, 1).unwrap();
        assert_eq!(binary, reference, "geometry {g:?}");
        // Without padding the reference is just the float control group on sign(x).
        if p == 0 {
            assert_eq!(
                binary,
                conv_forward_float(&sign(&x), &w, &zero, &g, 1).unwrap()
            );
        }
    }
}

#[test]
fn all_plus_one_gives_patch_length() {
    let g = ConvGeometry::square(3, 2, 3, 1, 1);
    let x = FloatTensor::from_vec([1, 3, 6, 6], vec![0.5; 108]).unwrap();
    let w = FloatMatrix::from_vec(2, 27, vec![1.0; 54]).unwrap();
    let y = conv_forward_binary(&x, &pack_sign_rows(&w), &[0.0, 0.0], &g, 1).unwrap();
    // Padding taps lower to 0.0, which binarizes to +1, so every position sees 27.
    assert!(y.data().iter().all(|&v| v == 27.0));
    let control = conv_forward_float(&x.map(|_| 1.0), &w, &[0.0, 0.0], &g, 1).unwrap();
    for i in 1..5 {
        for j in 1..5 {
            assert_eq!(control.get(0, 0, i, j), 27.0);
        }
    }
    assert_eq!(control.get(0, 0, 0, 0), 12.0);
}

#[test]
fn one_by_one_binary_conv_is_sign() {
    let g = ConvGeometry::square(1, 1, 1, 1, 0);
    let x = fill_random([2, 1, 4, 4], 9).unwrap();
    let w = FloatMatrix::from_vec(1, 1, vec![1.0]).unwrap();
    let y = conv_forward_binary(&x, &pack_sign_rows(&w), &[0.0], &g, 1).unwrap();
    assert_eq!(y, sign(&x));
}

#[test]
fn binary_conv_threads_agree() {
    let g = ConvGeometry::square(4, 9, 3, 1, 1);
    let x = fill_random([1, 4, 7, 7], 2).unwrap();
    let packed = pack_sign_rows(&random_matrix(9, g.patch_len(), 3));
    let bias = random_values(9, 4);
    let one = conv_forward_binary(&x, &packed, &bias, &g, 1).unwrap();
    assert_eq!(conv_forward_binary(&x, &packed, &bias, &g, 4).unwrap(), one);
}

#[test]
fn conv_shape_errors() {
    let g = ConvGeometry::square(3, 4, 3, 1, 1);
    let x = fill_random([1, 2, 8, 8], 1).unwrap();
    let w = random_matrix(4, 27, 2);
    assert!(conv_forward_float(&x, &w, &[0.0; 4], &g, 1).is_err());
    let x = fill_random([1, 3, 8, 8], 1).unwrap();
    assert!(conv_forward_float(&x, &w, &[0.0; 3], &g, 1).is_err());
    assert!(conv_forward_float(&x, &random_matrix(4, 26, 2), &[0.0; 4], &g, 1).is_err());
}

#[test]
fn linear_binary_equals_float_on_pm1() {
    for features in [33, 64, 7] {
        let w = sign_matrix(&random_matrix(5, features, features as u64));
        let x = sign_matrix(&random_matrix(features, 3, 99));
        let bias = random_values(5, 1);
        let b = linear_forward_binary(&x, &pack_sign_rows(&w), &bias, 1).unwrap();
        let f = linear_forward_float(&x, &w, &bias, 1).unwrap();
        assert_eq!(b, f, "features={features}");
    }
}
