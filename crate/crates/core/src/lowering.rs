//! im2col lowering and its adjoint.
//!
//! Lowered row `r = (c * kH + h) * kW + w` of column `j = oh * outW + ow`
//! holds input element `(c, oh * strideH + h - padH, ow * strideW + w - padW)`,
//! or 0 where that coordinate falls in the padding. Flattened weights use the
//! same row order.

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, FloatMatrix, FloatTensor};

fn check_single(x: &FloatTensor, geom: &ConvGeometry) -> Result<()> {
    if x.batch() != 1 {
        return Err(Error::shape(format!(
            "expected a single batch element, got batch {}",
            x.batch()
        )));
    }
    if x.channels() != geom.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, geometry expects {}",
            x.channels(),
            geom.in_channels
        )));
    }
    Ok(())
}

/// Lower one batch element into a `[kH*kW*C, outH*outW]` matrix.
pub fn im2col(x: &FloatTensor, geom: &ConvGeometry) -> Result<FloatMatrix> {
    check_single(x, geom)?;
    let (in_h, in_w) = (x.height(), x.width());
    let (out_h, out_w) = geom.output_dims(in_h, in_w)?;
    let n = out_h * out_w;
    let mut out = FloatMatrix::zeros(geom.patch_len(), n);
    let src = x.data();
    let dst = out.data_mut();

    for c in 0..geom.in_channels {
        let plane = &src[c * in_h * in_w..(c + 1) * in_h * in_w];
        for kh in 0..geom.k_h {
            for kw in 0..geom.k_w {
                let r = (c * geom.k_h + kh) * geom.k_w + kw;
                let row = &mut dst[r * n..(r + 1) * n];
                for oh in 0..out_h {
                    let ih = (oh * geom.stride_h + kh) as isize - geom.pad_h as isize;
                    if ih < 0 || ih >= in_h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * in_w..(ih as usize + 1) * in_w];
                    let dst_row = &mut row[oh * out_w..(oh + 1) * out_w];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * geom.stride_w + kw) as isize - geom.pad_w as isize;
                        if iw >= 0 && iw < in_w as isize {
                            *d = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatter-add a lowered matrix back onto a `[1, C, in_h, in_w]` tensor.
///
/// This is the adjoint of [`im2col`]: input positions covered by several
/// patches receive the sum of their contributions and padding is dropped.
pub fn col2im(
    m: &FloatMatrix,
    geom: &ConvGeometry,
    in_h: usize,
    in_w: usize,
) -> Result<FloatTensor> {
    let (out_h, out_w) = geom.output_dims(in_h, in_w)?;
    let n = out_h * out_w;
    if m.rows() != geom.patch_len() || m.cols() != n {
        return Err(Error::shape(format!(
            "col2im expects a {}x{} matrix, got {}x{}",
            geom.patch_len(),
            n,
            m.rows(),
            m.cols()
        )));
    }
    let mut x = FloatTensor::zeros([1, geom.in_channels, in_h, in_w])?;
    let dst = x.data_mut();
    let src = m.data();
    for c in 0..geom.in_channels {
        for kh in 0..geom.k_h {
            for kw in 0..geom.k_w {
                let r = (c * geom.k_h + kh) * geom.k_w + kw;
                for oh in 0..out_h {
                    let ih = (oh * geom.stride_h + kh) as isize - geom.pad_h as isize;
                    if ih < 0 || ih >= in_h as isize {
                        continue;
                    }
                    for ow in 0..out_w {
                        let iw = (ow * geom.stride_w + kw) as isize - geom.pad_w as isize;
                        if iw < 0 || iw >= in_w as isize {
                            continue;
                        }
                        dst[(c * in_h + ih as usize) * in_w + iw as usize] +=
                            src[r * n + oh * out_w + ow];
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Unflatten a `[D, outH*outW]` GEMM result into a `[1, D, outH, outW]` tensor.
pub fn reshape_output(m: &FloatMatrix, out_h: usize, out_w: usize) -> Result<FloatTensor> {
    if m.cols() != out_h * out_w {
        return Err(Error::shape(format!(
            "matrix has {} columns, output {out_h}x{out_w} needs {}",
            m.cols(),
            out_h * out_w
        )));
    }
    FloatTensor::from_vec([1, m.rows(), out_h, out_w], m.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fill_random, random_matrix};

    fn grid3() -> FloatTensor {
        FloatTensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn im2col_hand_case() {
        let g = ConvGeometry::square(1, 1, 2, 1, 0);
        let m = im2col(&grid3(), &g).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 4));
        let cols: Vec<Vec<f32>> = (0..4)
            .map(|j| (0..4).map(|r| m.get(r, j)).collect())
            .collect();
        assert_eq!(
            cols,
            vec![
                vec![1.0, 2.0, 4.0, 5.0],
                vec![2.0, 3.0, 5.0, 6.0],
                vec![4.0, 5.0, 7.0, 8.0],
                vec![5.0, 6.0, 8.0, 9.0],
            ]
        );
    }

    #[test]
    fn one_by_one_kernel_is_reshape() {
        let x = fill_random([1, 4, 5, 6], 11).unwrap();
        let g = ConvGeometry::square(4, 1, 1, 1, 0);
        let m = im2col(&x, &g).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 30));
        assert_eq!(m.data(), x.data());
    }

    #[test]
    fn cifar_first_layer_shape() {
        let x = fill_random([1, 3, 32, 32], 1).unwrap();
        let m = im2col(&x, &ConvGeometry::square(3, 128, 3, 1, 1)).unwrap();
        assert_eq!((m.rows(), m.cols()), (27, 1024));
    }

    #[test]
    fn padding_reads_zero() {
        let g = ConvGeometry::square(1, 1, 3, 1, 1);
        let m = im2col(&grid3(), &g).unwrap();
        // Output (0, 0): top-left tap sits in the padding, centre tap is x[0][0].
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(4, 0), 1.0);
        assert_eq!(m.get(8, 0), 5.0);
    }

    #[test]
    fn im2col_rejects_channel_mismatch() {
        let g = ConvGeometry::square(2, 1, 2, 1, 0);
        assert!(im2col(&grid3(), &g).is_err());
        let batch2 = fill_random([2, 1, 3, 3], 0).unwrap();
        assert!(im2col(&batch2, &ConvGeometry::square(1, 1, 2, 1, 0)).is_err());
    }

    #[test]
    fn col2im_non_overlapping_inverts() {
        let x = fill_random([1, 2, 6, 6], 5).unwrap();
        let g = ConvGeometry::square(2, 1, 3, 3, 0);
        let back = col2im(&im2col(&x, &g).unwrap(), &g, 6, 6).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn col2im_counts_patch_membership() {
        let g = ConvGeometry::square(1, 1, 2, 1, 0);
        let ones = FloatTensor::from_vec([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let back = col2im(&im2col(&ones, &g).unwrap(), &g, 3, 3).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);

        let x = grid3();
        let back = col2im(&im2col(&x, &g).unwrap(), &g, 3, 3).unwrap();
        let scaled: Vec<f32> = x
            .data()
            .iter()
            .zip(ones_count())
            .map(|(v, k)| v * k)
            .collect();
        assert_eq!(back.data(), scaled.as_slice());
    }

    fn ones_count() -> [f32; 9] {
        [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]
    }

    #[test]
    fn col2im_zero_is_zero() {
        let g = ConvGeometry::square(3, 1, 3, 1, 1);
        let back = col2im(&FloatMatrix::zeros(27, 16), &g, 4, 4).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn col2im_rejects_wrong_shape() {
        let g = ConvGeometry::square(1, 1, 2, 1, 0);
        assert!(col2im(&FloatMatrix::zeros(4, 5), &g, 3, 3).is_err());
    }

    #[test]
    fn reshape_output_unflattens() {
        let m = FloatMatrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = reshape_output(&m, 2, 2).unwrap();
        assert_eq!(t.dims(), [1, 1, 2, 2]);
        assert_eq!(t.get(0, 0, 1, 0), 3.0);

        let m = random_matrix(2, 1, 3);
        let t = reshape_output(&m, 1, 1).unwrap();
        assert_eq!(t.dims(), [1, 2, 1, 1]);
        assert_eq!(t.data(), m.data());

        assert!(reshape_output(&m, 2, 1).is_err());
    }
}
