//! Dense float containers, the bit-packed ±1 matrix and convolution shape
//! arithmetic shared by the rest of the crate.
//!
//! Every dense container is row-major. A [`FloatTensor`] is laid out as
//! batch, channel, height, width with width fastest, so element `(n, c, h, w)`
//! lives at `((n * C + c) * H + h) * W + w`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Bits per packed word.
pub const WORD_BITS: usize = 32;

/// A dense 4-D `f32` tensor in batch-channel-height-width order.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        check_extents(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        check_extents(&dims)?;
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "tensor {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f32) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Number of values in one batch element.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    /// Copy out batch element `n` as a tensor with batch extent 1.
    pub fn batch_slice(&self, n: usize) -> Result<FloatTensor> {
        if n >= self.batch() {
            return Err(Error::shape(format!(
                "batch index {n} out of range for batch {}",
                self.batch()
            )));
        }
        let len = self.sample_len();
        let [_, c, h, w] = self.dims;
        FloatTensor::from_vec([1, c, h, w], self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Concatenate single-sample tensors of equal shape along the batch axis.
    pub fn stack(slices: &[FloatTensor]) -> Result<FloatTensor> {
        let first = slices
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(first.sample_len() * slices.len());
        let mut batch = 0;
        for s in slices {
            let [b, sc, sh, sw] = s.dims;
            if (sc, sh, sw) != (c, h, w) {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    s.dims, first.dims
                )));
            }
            batch += b;
            data.extend_from_slice(&s.data);
        }
        FloatTensor::from_vec([batch, c, h, w], data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FloatTensor {
        FloatTensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Write the tensor blob format: four little-endian `u64` extents
    /// followed by the values as little-endian `f32` in storage order.
    pub fn write_blob<W: Write>(&self, mut out: W) -> Result<()> {
        for d in self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_blob<R: Read>(mut input: R) -> Result<FloatTensor> {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(read_u64(&mut input)?)
                .map_err(|_| Error::Format("extent does not fit in usize".into()))?;
        }
        check_extents(&dims).map_err(|e| Error::Format(e.to_string()))?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("extents {dims:?} overflow")))?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != len * 4 {
            return Err(Error::Format(format!(
                "tensor {dims:?} needs {} payload bytes, found {}",
                len * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(FloatTensor { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_blob(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FloatTensor> {
        FloatTensor::read_blob(BufReader::new(File::open(path)?))
    }
}

/// A dense row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FloatMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> FloatMatrix {
        FloatMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FloatMatrix {
        FloatMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Which logical axis is packed into words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Each logical row is one line of words (weights).
    RowPacked,
    /// Each logical column is one line of words (lowered inputs).
    ColPacked,
}

impl Orientation {
    pub fn to_byte(self) -> u8 {
        match self {
            Orientation::RowPacked => 0,
            Orientation::ColPacked => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Orientation::RowPacked),
            1 => Some(Orientation::ColPacked),
            _ => None,
        }
    }
}

/// A logical ±1 matrix stored one bit per entry in 32-bit words.
///
/// Bit `b` of word `k` in a line holds logical index `32 * k + b` along the
/// packed axis; a set bit encodes +1 and a clear bit −1. Bits past the
/// packed extent (pad bits) are always zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    orientation: Orientation,
    words_per_line: usize,
    words: Vec<u32>,
}

impl PackedBitMatrix {
    /// An all −1 matrix.
    pub fn zeros(rows: usize, cols: usize, orientation: Orientation) -> Self {
        let mut m = Self {
            rows,
            cols,
            orientation,
            words_per_line: 0,
            words: Vec::new(),
        };
        m.words_per_line = m.packed_extent().div_ceil(WORD_BITS);
        m.words = vec![0; m.words_per_line * m.lines()];
        m
    }

    /// Wrap raw line-major words, rejecting a wrong length or a set pad bit.
    pub fn from_words(
        rows: usize,
        cols: usize,
        orientation: Orientation,
        words: Vec<u32>,
    ) -> Result<Self> {
        let mut m = Self::zeros(rows, cols, orientation);
        if words.len() != m.words.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} {orientation:?} matrix needs {} words, got {}",
                m.words.len(),
                words.len()
            )));
        }
        m.words = words;
        if let Some(line) = m.first_dirty_line() {
            return Err(Error::Format(format!("pad bits set in line {line}")));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Logical extent along the packed axis.
    pub fn packed_extent(&self) -> usize {
        match self.orientation {
            Orientation::RowPacked => self.cols,
            Orientation::ColPacked => self.rows,
        }
    }

    pub fn lines(&self) -> usize {
        match self.orientation {
            Orientation::RowPacked => self.rows,
            Orientation::ColPacked => self.cols,
        }
    }

    pub fn words_per_line(&self) -> usize {
        self.words_per_line
    }

    pub fn pad_bits_per_line(&self) -> usize {
        WORD_BITS * self.words_per_line - self.packed_extent()
    }

    /// Mask of the valid bits in the final word of each line.
    pub fn last_word_mask(&self) -> u32 {
        match self.packed_extent() % WORD_BITS {
            0 => u32::MAX,
            r => (1u32 << r) - 1,
        }
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub(crate) fn words_mut(&mut self) -> &mut [u32] {
        &mut self.words
    }

    #[inline]
    pub fn line(&self, i: usize) -> &[u32] {
        &self.words[i * self.words_per_line..(i + 1) * self.words_per_line]
    }

    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }

    #[inline]
    fn locate(&self, r: usize, c: usize) -> (usize, usize) {
        assert!(r < self.rows && c < self.cols, "({r}, {c}) out of bounds");
        let (line, idx) = match self.orientation {
            Orientation::RowPacked => (r, c),
            Orientation::ColPacked => (c, r),
        };
        (
            line * self.words_per_line + idx / WORD_BITS,
            idx % WORD_BITS,
        )
    }

    /// Logical value at `(r, c)`: true for +1.
    pub fn get(&self, r: usize, c: usize) -> bool {
        let (w, b) = self.locate(r, c);
        (self.words[w] >> b) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, plus_one: bool) {
        let (w, b) = self.locate(r, c);
        if plus_one {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    /// First line whose final word has a set pad bit, if any.
    pub fn first_dirty_line(&self) -> Option<usize> {
        if self.words_per_line == 0 {
            return None;
        }
        let pad = !self.last_word_mask();
        (0..self.lines()).find(|&i| self.line(i)[self.words_per_line - 1] & pad != 0)
    }

    /// Packed blob format: orientation byte, logical rows and cols as
    /// little-endian `u64`, then the words little-endian in line order.
    pub fn write_blob<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&[self.orientation.to_byte()])?;
        out.write_all(&(self.rows as u64).to_le_bytes())?;
        out.write_all(&(self.cols as u64).to_le_bytes())?;
        for w in &self.words {
            out.write_all(&w.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_blob<R: Read>(mut input: R) -> Result<Self> {
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag)?;
        let orientation = Orientation::from_byte(tag[0])
            .ok_or_else(|| Error::Format(format!("unknown orientation byte {}", tag[0])))?;
        let rows = read_u64(&mut input)? as usize;
        let cols = read_u64(&mut input)? as usize;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format(
                "payload is not a whole number of words".into(),
            ));
        }
        let words = bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_words(rows, cols, orientation, words).map_err(|e| match e {
            Error::Shape(msg) => Error::Format(msg),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_blob(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_blob(BufReader::new(File::open(path)?))
    }
}

/// Kernel, stride, padding and channel counts of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    /// Square kernel with equal stride and padding on both axes.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            k_h: kernel,
            k_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            in_channels,
            out_channels,
        }
    }

    /// Rows of the lowered input matrix: `kH * kW * C`.
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_h == 0 || self.k_w == 0 {
            return Err(Error::shape("kernel extents must be positive"));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::shape("strides must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("channel counts must be positive"));
        }
        Ok(())
    }

    /// Output spatial extents for an `in_h x in_w` input.
    pub fn output_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let out_h = axis_extent("height", in_h, self.k_h, self.stride_h, self.pad_h)?;
        let out_w = axis_extent("width", in_w, self.k_w, self.stride_w, self.pad_w)?;
        Ok((out_h, out_w))
    }
}

fn axis_extent(
    axis: &str,
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "{axis}: kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "{axis}: ({input} + 2*{pad} - {kernel}) / {stride} + 1 is not an integer"
        )));
    }
    Ok(span / stride + 1)
}

fn check_extents(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero extent in {dims:?}")));
    }
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `index`-th value of the counter-based stream for `seed`.
///
/// `mix64(seed + (index + 1) * 0x9E3779B97F4A7C15)`, top 24 bits taken as
/// `k`, value `k / 2^23 - 1`. The result lies in `[-1, 1)` and is exact in
/// `f32`, so streams are reproducible bit for bit on every platform.
#[inline]
pub fn random_value(seed: u64, index: u64) -> f32 {
    let z = mix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)));
    (z >> 40) as f32 * (1.0 / (1u32 << 23) as f32) - 1.0
}

pub fn random_values(len: usize, seed: u64) -> Vec<f32> {
    (0..len as u64).map(|i| random_value(seed, i)).collect()
}

/// Deterministic pseudo-random tensor with values in `[-1, 1)`.
pub fn fill_random(dims: [usize; 4], seed: u64) -> Result<FloatTensor> {
    check_extents(&dims)?;
    FloatTensor::from_vec(dims, random_values(dims.iter().product(), seed))
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> FloatMatrix {
    FloatMatrix {
        rows,
        cols,
        data: random_values(rows * cols, seed),
    }
}

/// Free-function form of [`ConvGeometry::output_dims`].
pub fn output_dims(geom: &ConvGeometry, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
    geom.output_dims(in_h, in_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_keeps_extent() {
        let g = ConvGeometry::square(3, 8, 3, 1, 1);
        assert_eq!(g.output_dims(32, 32).unwrap(), (32, 32));
    }

    #[test]
    fn stride_two_halves() {
        let g = ConvGeometry::square(3, 8, 2, 2, 0);
        assert_eq!(output_dims(&g, 32, 32).unwrap(), (16, 16));
    }

    #[test]
    fn non_integral_extent_names_axis() {
        // (32 - 3) / 2 + 1 = 15.5
        let g = ConvGeometry::square(3, 8, 3, 2, 0);
        let err = g.output_dims(32, 32).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");

        let mut g = ConvGeometry::square(3, 8, 3, 1, 0);
        g.stride_w = 2;
        let err = g.output_dims(32, 32).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn kernel_larger_than_input() {
        let g = ConvGeometry::square(1, 1, 5, 1, 0);
        assert!(g.output_dims(3, 3).is_err());
    }

    #[test]
    fn fill_random_is_deterministic_and_in_range() {
        let a = fill_random([1, 3, 32, 32], 7).unwrap();
        let b = fill_random([1, 3, 32, 32], 7).unwrap();
        assert_eq!(a.len(), 3072);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let c = fill_random([1, 3, 32, 32], 8).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn fill_random_stream_is_pinned() {
        // First values of the seed-0 stream, frozen so other implementations
        // can check compatibility.
        let z = mix64(GOLDEN_GAMMA);
        assert_eq!(z, 0xE220_A839_7B1D_CDAF);
        let expected = (z >> 40) as f32 / 8_388_608.0 - 1.0;
        assert_eq!(random_value(0, 0), expected);
    }

    #[test]
    fn fill_random_rejects_zero_extent() {
        assert!(fill_random([1, 0, 4, 4], 1).is_err());
    }

    #[test]
    fn row_major_offsets() {
        let mut t = FloatTensor::zeros([2, 3, 4, 5]).unwrap();
        for (i, &(n, c, h, w)) in [(0, 0, 0, 0), (1, 2, 3, 4), (1, 0, 2, 1), (0, 2, 0, 3)]
            .iter()
            .enumerate()
        {
            t.set(n, c, h, w, i as f32 + 1.0);
            assert_eq!(t.data()[((n * 3 + c) * 4 + h) * 5 + w], i as f32 + 1.0);
            assert_eq!(t.get(n, c, h, w), i as f32 + 1.0);
        }
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(FloatTensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(FloatMatrix::from_vec(2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn packed_capacity() {
        for cols in 1..100 {
            let m = PackedBitMatrix::zeros(3, cols, Orientation::RowPacked);
            assert!(m.words_per_line() * WORD_BITS >= cols);
            assert!(m.pad_bits_per_line() < WORD_BITS);
            assert_eq!(m.words().len(), 3 * m.words_per_line());
        }
    }

    #[test]
    fn from_words_rejects_dirty_pad() {
        let err = PackedBitMatrix::from_words(1, 40, Orientation::RowPacked, vec![0, 1 << 8]);
        assert!(err.is_err());
        let ok = PackedBitMatrix::from_words(1, 40, Orientation::RowPacked, vec![0, 0xFF]);
        assert!(ok.is_ok());
    }

    #[test]
    fn tensor_blob_roundtrip() {
        let t = fill_random([2, 3, 4, 5], 3).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 4 * t.len());
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(FloatTensor::read_blob(&buf[..]).unwrap(), t);
        assert!(FloatTensor::read_blob(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn packed_blob_roundtrip() {
        let mut m = PackedBitMatrix::zeros(3, 40, Orientation::ColPacked);
        m.set(2, 1, true);
        m.set(0, 39, true);
        let mut buf = Vec::new();
        m.write_blob(&mut buf).unwrap();
        assert_eq!(buf[0], 1);
        assert_eq!(buf.len(), 17 + m.byte_len());
        assert_eq!(PackedBitMatrix::read_blob(&buf[..]).unwrap(), m);
    }
}
