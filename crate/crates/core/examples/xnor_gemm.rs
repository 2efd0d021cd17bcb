//! Pack ±1 matrices into 32-bit words and multiply them with XNOR-popcount,
//! then check against the float GEMM on the same values.

use xnor_bnn::binarize::{pack_cols, pack_rows, sign_matrix};
use xnor_bnn::kernels::{float_gemm, word_dot, xnor_gemm};
use xnor_bnn::tensor::random_matrix;

fn main() -> xnor_bnn::Result<()> {
    // Encoding 1 is +1 and 0 is -1, so xnor is multiplication.
    let value = |bit: u32| if bit == 1 { 1 } else { -1 };
    for (a, b) in [(0u32, 0u32), (0, 1), (1, 0), (1, 1)] {
        let xnor = !(a ^ b) & 1;
        println!(
            "{a} ({:+}) xnor {b} ({:+}) = {xnor} ({:+})",
            value(a),
            value(b),
            value(a) * value(b)
        );
    }
    println!(
        "word_dot(0xF0F0F0F0, 0xFF00FF00) = {}",
        word_dot(0xF0F0_F0F0, 0xFF00_FF00)
    );

    // 40 is not a multiple of 32: each line carries 24 zero pad bits.
    let (d, l, n) = (4, 40, 5);
    let w = sign_matrix(&random_matrix(d, l, 1));
    let x = sign_matrix(&random_matrix(l, n, 2));
    let pw = pack_rows(&w)?;
    let px = pack_cols(&x)?;
    println!(
        "weights: {} lines x {} words, {} pad bits per line",
        pw.lines(),
        pw.words_per_line(),
        pw.pad_bits_per_line()
    );
    println!("row 0 words: {:08x?}", pw.line(0));

    let binary = xnor_gemm(&pw, &px, l)?;
    let float = float_gemm(&w, &x)?;
    for i in 0..d {
        let row: Vec<i32> = (0..n).map(|j| binary.get(i, j)).collect();
        println!("{row:?}");
    }
    assert_eq!(binary.to_float(), float);
    println!("xnor-popcount GEMM equals float GEMM exactly");
    Ok(())
}
