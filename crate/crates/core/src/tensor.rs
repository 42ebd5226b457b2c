use crate::error::{Error, Result};

/// Dense rank-4 array in (N, C, H, W) layout, row-major `f32`.
///
/// The carrier for all images and activations crossing module boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "Tensor4 data length {} != {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Borrow one sample as a slice of length C*H*W.
    pub fn sample(&self, n: usize) -> &[f32] {
        let stride = self.c * self.h * self.w;
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Copy a single sample out as a batch-of-one tensor.
    pub fn slice_sample(&self, n: usize) -> Tensor4 {
        Tensor4 { n: 1, c: self.c, h: self.h, w: self.w, data: self.sample(n).to_vec() }
    }

    /// Stack batch-of-one tensors along the batch axis.
    pub fn concat_samples(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of empty list"))?;
        let (c, h, w) = (first.c, first.h, first.w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            if (p.c, p.h, p.w) != (c, h, w) {
                return Err(Error::shape("concat_samples: mismatched sample dims"));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense row-major matrix of `f32`, used for logits and probability tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "Matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}
