//! Matrix engines: the float-32 GEMM control group, the XNOR-popcount GEMM on
//! packed ±1 operands, and the direct convolution used as a golden oracle.

use std::thread;

use crate::error::{Error, Result};
use crate::tensor::{
    ConvGeometry, FloatMatrix, FloatTensor, Orientation, PackedBitMatrix, WORD_BITS,
};

/// Portable SWAR population count.
#[inline]
pub fn popcount_portable(mut v: u32) -> u32 {
    v = v - ((v >> 1) & 0x5555_5555);
    v = (v & 0x3333_3333) + ((v >> 2) & 0x3333_3333);
    v = (v + (v >> 4)) & 0x0F0F_0F0F;
    v.wrapping_mul(0x0101_0101) >> 24
}

/// Population count; lowers to the hardware instruction when the target has one.
#[inline]
pub fn popcount(v: u32) -> u32 {
    v.count_ones()
}

/// Whether the running CPU has a hardware population count instruction.
pub fn native_popcount_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("popcnt")
    }
    #[cfg(target_arch = "aarch64")]
    {
        true
    }
    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    {
        false
    }
}

/// Signed dot product of two 32-lane ±1 words: `2 * popcount(!(w ^ x)) - 32`.
#[inline]
pub fn word_dot(w: u32, x: u32) -> i32 {
    2 * popcount(!(w ^ x)) as i32 - WORD_BITS as i32
}

/// Dense row-major `i32` matrix produced by the binary GEMM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl IntMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn to_float(&self) -> FloatMatrix {
        FloatMatrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("same extents")
    }
}

/// Run `f(first_row, rows_chunk)` over disjoint row blocks of `out`, on up to
/// `threads` scoped workers.
fn for_row_blocks<T, F>(out: &mut [T], cols: usize, threads: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let rows = out.len().checked_div(cols).unwrap_or(0);
    let threads = threads.max(1).min(rows.max(1));
    if threads == 1 {
        f(0, out);
        return;
    }
    let per = rows.div_ceil(threads);
    thread::scope(|s| {
        for (t, chunk) in out.chunks_mut(per * cols).enumerate() {
            let f = &f;
            s.spawn(move || f(t * per, chunk));
        }
    });
}

/// Float GEMM control group, single-threaded.
pub fn float_gemm(w: &FloatMatrix, x: &FloatMatrix) -> Result<FloatMatrix> {
    float_gemm_threads(w, x, 1)
}

/// `w [D, L] * x [L, N]` with a plain i-k-j triple loop, rows split across
/// `threads` workers. No blocking or packing.
pub fn float_gemm_threads(w: &FloatMatrix, x: &FloatMatrix, threads: usize) -> Result<FloatMatrix> {
    if w.cols() != x.rows() {
        return Err(Error::shape(format!(
            "gemm inner extents differ: [{}, {}] x [{}, {}]",
            w.rows(),
            w.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let n = x.cols();
    let mut out = FloatMatrix::zeros(w.rows(), n);
    for_row_blocks(out.data_mut(), n, threads, |first, block| {
        for (di, out_row) in block.chunks_mut(n).enumerate() {
            for (k, &a) in w.row(first + di).iter().enumerate() {
                for (o, &b) in out_row.iter_mut().zip(x.row(k)) {
                    *o += a * b;
                }
            }
        }
    });
    Ok(out)
}

/// XNOR-popcount GEMM, single-threaded.
pub fn xnor_gemm(w: &PackedBitMatrix, x: &PackedBitMatrix, inner: usize) -> Result<IntMatrix> {
    xnor_gemm_threads(w, x, inner, 1)
}

/// Exact ±1 dot products between the rows of a row-packed `w [D, L]` and the
/// columns of a column-packed `x [L, N]`.
///
/// Every pad position is 0 in both operands and so adds one spurious xnor
/// hit per line pair. With `P` pad bits and `K` words per line the result is
/// `2 * Σ popcount(!(w ^ x)) - 32 * K - P`.
pub fn xnor_gemm_threads(
    w: &PackedBitMatrix,
    x: &PackedBitMatrix,
    inner: usize,
    threads: usize,
) -> Result<IntMatrix> {
    if w.orientation() != Orientation::RowPacked || x.orientation() != Orientation::ColPacked {
        return Err(Error::shape(
            "xnor_gemm needs a row-packed left operand and a column-packed right operand",
        ));
    }
    if w.cols() != inner || x.rows() != inner {
        return Err(Error::shape(format!(
            "inner extent {inner} does not match operands [{}, {}] x [{}, {}]",
            w.rows(),
            w.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let wpl = w.words_per_line();
    if wpl != x.words_per_line() {
        return Err(Error::shape(format!(
            "words per line differ: {wpl} vs {}",
            x.words_per_line()
        )));
    }
    // The u32 popcount accumulator cannot overflow below this bound.
    assert!(
        wpl * WORD_BITS <= 1 << 26,
        "reduction length {inner} too large"
    );

    let n = x.cols();
    let bias = (WORD_BITS * wpl + w.pad_bits_per_line()) as i32;
    let mut data = vec![0i32; w.rows() * n];
    let native = native_popcount_available();
    for_row_blocks(&mut data, n, threads, |first, block| {
        xnor_block(w, x, first, block, bias, native);
    });
    Ok(IntMatrix {
        rows: w.rows(),
        cols: n,
        data,
    })
}

fn xnor_block(
    w: &PackedBitMatrix,
    x: &PackedBitMatrix,
    first: usize,
    block: &mut [i32],
    bias: i32,
    native: bool,
) {
    #[cfg(target_arch = "x86_64")]
    if native {
        // SAFETY: the popcnt feature was detected at runtime.
        unsafe { xnor_block_popcnt(w, x, first, block, bias) };
        return;
    }
    let _ = native;
    xnor_block_generic(w, x, first, block, bias);
}

#[inline(always)]
fn xnor_block_generic(
    w: &PackedBitMatrix,
    x: &PackedBitMatrix,
    first: usize,
    block: &mut [i32],
    bias: i32,
) {
    let n = x.cols();
    if n == 0 {
        return;
    }
    for (di, out_row) in block.chunks_mut(n).enumerate() {
        let wl = w.line(first + di);
        for (j, o) in out_row.iter_mut().enumerate() {
            let xl = x.line(j);
            let mut hits = 0u32;
            for (&a, &b) in wl.iter().zip(xl) {
                hits += (!(a ^ b)).count_ones();
            }
            *o = 2 * hits as i32 - bias;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xnor_block_popcnt(
    w: &PackedBitMatrix,
    x: &PackedBitMatrix,
    first: usize,
    block: &mut [i32],
    bias: i32,
) {
    xnor_block_generic(w, x, first, block, bias)
}

/// `a[d, j] + bias[d]` for every column `j`.
pub fn bias_add(a: &FloatMatrix, bias: &[f32]) -> Result<FloatMatrix> {
    let mut out = a.clone();
    bias_add_in_place(&mut out, bias)?;
    Ok(out)
}

pub fn bias_add_in_place(a: &mut FloatMatrix, bias: &[f32]) -> Result<()> {
    if bias.len() != a.rows() {
        return Err(Error::shape(format!(
            "bias has {} entries, matrix has {} rows",
            bias.len(),
            a.rows()
        )));
    }
    let cols = a.cols();
    if cols == 0 {
        return Ok(());
    }
    for (row, &b) in a.data_mut().chunks_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

/// Direct convolution (cross-correlation) of one batch element with weights
/// shaped `[D, C, kH, kW]`, zero outside the input.
pub fn naive_conv(x: &FloatTensor, w: &FloatTensor, geom: &ConvGeometry) -> Result<FloatTensor> {
    if x.batch() != 1 {
        return Err(Error::shape("naive_conv takes a single batch element"));
    }
    let expected = [geom.out_channels, geom.in_channels, geom.k_h, geom.k_w];
    if w.dims() != expected {
        return Err(Error::shape(format!(
            "weights {:?} do not match geometry {expected:?}",
            w.dims()
        )));
    }
    if x.channels() != geom.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, geometry expects {}",
            x.channels(),
            geom.in_channels
        )));
    }
    let (in_h, in_w) = (x.height() as isize, x.width() as isize);
    let (out_h, out_w) = geom.output_dims(x.height(), x.width())?;
    let mut out = FloatTensor::zeros([1, geom.out_channels, out_h, out_w])?;
    for d in 0..geom.out_channels {
        for i in 0..out_h {
            for j in 0..out_w {
                let mut acc = 0.0f32;
                for h in 0..geom.k_h {
                    let ih = (i * geom.stride_h + h) as isize - geom.pad_h as isize;
                    if ih < 0 || ih >= in_h {
                        continue;
                    }
                    for ww in 0..geom.k_w {
                        let iw = (j * geom.stride_w + ww) as isize - geom.pad_w as isize;
                        if iw < 0 || iw >= in_w {
                            continue;
                        }
                        for c in 0..geom.in_channels {
                            acc += w.get(d, c, h, ww) * x.get(0, c, ih as usize, iw as usize);
                        }
                    }
                }
                out.set(0, d, i, j, acc);
            }
        }
    }
    Ok(out)
}
