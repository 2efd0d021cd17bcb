//! Sign and hard-tanh nonlinearities and the ±1 bit-packing encoders.
//!
//! A set bit encodes +1 and a clear bit −1. Logical index `32 * k + b` along
//! the packed axis is bit `b` (LSB first) of word `k` in its line, and pad
//! bits past the logical extent are left at 0.

use crate::error::{Error, Result};
use crate::tensor::{FloatMatrix, FloatTensor, Orientation, PackedBitMatrix, WORD_BITS};

/// Deterministic binarization; zero maps to +1.
#[inline]
pub fn sign_value(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn htanh_value(x: f32) -> f32 {
    x.clamp(-1.0, 1.0)
}

pub fn sign(x: &FloatTensor) -> FloatTensor {
    x.map(sign_value)
}

pub fn sign_matrix(x: &FloatMatrix) -> FloatMatrix {
    x.map(sign_value)
}

pub fn htanh(x: &FloatTensor) -> FloatTensor {
    x.map(htanh_value)
}

pub fn htanh_matrix(x: &FloatMatrix) -> FloatMatrix {
    x.map(htanh_value)
}

fn check_binary(m: &FloatMatrix) -> Result<()> {
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            if v != 1.0 && v != -1.0 {
                return Err(Error::Encoding {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Pack a ±1 matrix along its rows (one line per row).
pub fn pack_rows(w: &FloatMatrix) -> Result<PackedBitMatrix> {
    check_binary(w)?;
    Ok(pack_sign_rows(w))
}

/// Pack a ±1 matrix along its columns (one line per column).
pub fn pack_cols(x: &FloatMatrix) -> Result<PackedBitMatrix> {
    check_binary(x)?;
    Ok(pack_sign_cols(x))
}

/// `pack_rows(sign(w))` without materialising the signed matrix.
pub fn pack_sign_rows(w: &FloatMatrix) -> PackedBitMatrix {
    let mut p = PackedBitMatrix::zeros(w.rows(), w.cols(), Orientation::RowPacked);
    let wpl = p.words_per_line();
    let words = p.words_mut();
    for r in 0..w.rows() {
        let line = &mut words[r * wpl..(r + 1) * wpl];
        for (word, chunk) in line.iter_mut().zip(w.row(r).chunks(WORD_BITS)) {
            *word = chunk
                .iter()
                .enumerate()
                .fold(0u32, |acc, (b, &v)| acc | (u32::from(v >= 0.0) << b));
        }
    }
    p
}

/// `pack_cols(sign(x))` without materialising the signed matrix.
pub fn pack_sign_cols(x: &FloatMatrix) -> PackedBitMatrix {
    let (rows, cols) = (x.rows(), x.cols());
    let mut p = PackedBitMatrix::zeros(rows, cols, Orientation::ColPacked);
    let wpl = p.words_per_line();
    let words = p.words_mut();
    let mut acc = vec![0u32; cols];
    for k in 0..wpl {
        acc.iter_mut().for_each(|a| *a = 0);
        let end = (k * WORD_BITS + WORD_BITS).min(rows);
        for (b, r) in (k * WORD_BITS..end).enumerate() {
            for (a, &v) in acc.iter_mut().zip(x.row(r)) {
                *a |= u32::from(v >= 0.0) << b;
            }
        }
        for (j, &a) in acc.iter().enumerate() {
            words[j * wpl + k] = a;
        }
    }
    p
}

/// Decode back to a ±1 float matrix over the logical extents.
pub fn unpack(p: &PackedBitMatrix) -> FloatMatrix {
    FloatMatrix::from_fn(
        p.rows(),
        p.cols(),
        |r, c| if p.get(r, c) { 1.0 } else { -1.0 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_matrix;

    fn row(values: impl IntoIterator<Item = f32>) -> FloatMatrix {
        let v: Vec<f32> = values.into_iter().collect();
        FloatMatrix::from_vec(1, v.len(), v).unwrap()
    }

    /// Bit-by-bit reference packer for a single line.
    fn pack_line_oracle(values: &[f32]) -> Vec<u32> {
        let mut words = vec![0u32; values.len().div_ceil(32)];
        for (i, &v) in values.iter().enumerate() {
            if v == 1.0 {
                words[i / 32] |= 1 << (i % 32);
            }
        }
        words
    }

    #[test]
    fn sign_maps_zero_to_plus_one() {
        let m = row([-0.3, 0.7, 0.0]);
        assert_eq!(sign_matrix(&m).data(), &[-1.0, 1.0, 1.0]);
        assert_eq!(sign_value(-0.0), 1.0);
    }

    #[test]
    fn htanh_clamps() {
        assert_eq!(htanh_value(0.5), 0.5);
        assert_eq!(htanh_value(3.2), 1.0);
        assert_eq!(htanh_value(-7.0), -1.0);
    }

    #[test]
    fn all_plus_and_all_minus() {
        assert_eq!(pack_rows(&row([1.0; 32])).unwrap().words(), &[0xFFFF_FFFF]);
        assert_eq!(pack_rows(&row([-1.0; 32])).unwrap().words(), &[0]);
        let col = FloatMatrix::from_vec(32, 1, vec![1.0; 32]).unwrap();
        assert_eq!(pack_cols(&col).unwrap().words(), &[0xFFFF_FFFF]);
    }

    #[test]
    fn alternating_row() {
        let v: Vec<f32> = (0..32)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let expected = pack_line_oracle(&v);
        assert_eq!(expected, vec![0x5555_5555]);
        assert_eq!(pack_rows(&row(v)).unwrap().words(), expected.as_slice());
    }

    #[test]
    fn forty_wide_row_pads_with_zero() {
        let v = vec![1.0; 40];
        let p = pack_rows(&row(v.clone())).unwrap();
        assert_eq!(p.words_per_line(), 2);
        assert_eq!(p.pad_bits_per_line(), 24);
        assert_eq!(p.words(), pack_line_oracle(&v).as_slice());
        assert_eq!(p.words()[1] >> 8, 0);
    }

    #[test]
    fn thirty_three_tall_column() {
        let mut v = vec![1.0; 33];
        v[32] = -1.0;
        let p = pack_cols(&FloatMatrix::from_vec(33, 1, v.clone()).unwrap()).unwrap();
        assert_eq!(p.words(), &[0xFFFF_FFFF, 0]);
        assert_eq!(p.words(), pack_line_oracle(&v).as_slice());
    }

    #[test]
    fn transpose_duality() {
        let m = sign_matrix(&random_matrix(5, 70, 9));
        let r = pack_rows(&m).unwrap();
        let c = pack_cols(&m.transpose()).unwrap();
        assert_eq!(r.words(), c.words());
    }

    #[test]
    fn single_bit_unpack() {
        let p = PackedBitMatrix::from_words(1, 1, Orientation::RowPacked, vec![1]).unwrap();
        assert_eq!(unpack(&p).data(), &[1.0]);
    }

    #[test]
    fn rejects_non_binary_entry() {
        let m = row([1.0, -1.0, 0.5]);
        match pack_rows(&m) {
            Err(Error::Encoding { row, col, value }) => {
                assert_eq!((row, col), (0, 2));
                assert_eq!(value, 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
        match pack_cols(&m.transpose()) {
            Err(Error::Encoding { row, col, .. }) => assert_eq!((row, col), (2, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fused_sign_pack_matches_two_step() {
        let m = random_matrix(37, 13, 4);
        assert_eq!(pack_sign_cols(&m), pack_cols(&sign_matrix(&m)).unwrap());
        assert_eq!(pack_sign_rows(&m), pack_rows(&sign_matrix(&m)).unwrap());
    }
}
