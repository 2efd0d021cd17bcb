//! One convolution layer three ways: float control group, binary
//! XNOR-popcount, and the float reference of the binary graph.

use std::time::Instant;

use xnor_bnn::binarize::{pack_sign_rows, sign_matrix};
use xnor_bnn::network::{conv_forward_binary, conv_forward_float, conv_forward_reference};
use xnor_bnn::tensor::{fill_random, random_matrix, random_values};
use xnor_bnn::ConvGeometry;

fn main() -> xnor_bnn::Result<()> {
    let g = ConvGeometry::square(128, 128, 3, 1, 1);
    let x = fill_random([4, 128, 32, 32], 1)?;
    let w = sign_matrix(&random_matrix(128, g.patch_len(), 2));
    let bias = random_values(128, 3);

    // Packing happens once, outside the timed region.
    let packed = pack_sign_rows(&w);

    let t = Instant::now();
    let float = conv_forward_float(&x, &w, &bias, &g, 1)?;
    let float_time = t.elapsed();
    let t = Instant::now();
    let binary = conv_forward_binary(&x, &packed, &bias, &g, 1)?;
    let binary_time = t.elapsed();
    let reference = conv_forward_reference(&x, &w, &bias, &g, 1)?;

    println!("output {:?}", binary.dims());
    println!("float control  {float_time:?}");
    println!(
        "binary xnor    {binary_time:?}  ({:.1}x)",
        float_time.as_secs_f64() / binary_time.as_secs_f64()
    );
    println!("binary == reference: {}", binary == reference);
    println!("float != binary (real-valued input): {}", float != binary);
    Ok(())
}
