//! Lower a convolution to a matrix product with im2col and compare it with
//! the direct convolution.

use xnor_bnn::kernels::{float_gemm, naive_conv};
use xnor_bnn::lowering::{col2im, im2col, reshape_output};
use xnor_bnn::tensor::{fill_random, random_matrix};
use xnor_bnn::{ConvGeometry, FloatTensor};

fn main() -> xnor_bnn::Result<()> {
    let x = FloatTensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect())?;
    let g = ConvGeometry::square(1, 1, 2, 1, 0);
    let m = im2col(&x, &g)?;
    println!("im2col of 1..9 with a 2x2 kernel (one patch per column):");
    for j in 0..m.cols() {
        let col: Vec<f32> = (0..m.rows()).map(|r| m.get(r, j)).collect();
        println!("  column {j}: {col:?}");
    }
    let back = col2im(&m, &g, 3, 3)?;
    println!("col2im sums overlapping taps: {:?}", back.data());

    let g = ConvGeometry::square(3, 8, 3, 1, 1);
    let x = fill_random([1, 3, 16, 16], 7)?;
    let w = random_matrix(8, g.patch_len(), 8);
    let (oh, ow) = g.output_dims(16, 16)?;
    let lowered = reshape_output(&float_gemm(&w, &im2col(&x, &g)?)?, oh, ow)?;
    let direct = naive_conv(
        &x,
        &FloatTensor::from_vec([8, 3, 3, 3], w.data().to_vec())?,
        &g,
    )?;
    let worst = lowered
        .data()
        .iter()
        .zip(direct.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("3x3 conv, 3 -> 8 channels on 16x16: max |lowered - direct| = {worst:e}");
    Ok(())
}
