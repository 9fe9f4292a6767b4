//! Dense row-major `f64` tensor. Rank 3 (channels, height, width) for
//! feature maps, rank 1 for flat feature vectors; nothing fancier is
//! needed anywhere in the crate.

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Invariant: data length equals the product of extents.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::Dimension(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rank-3 constructor, (channels, height, width).
    pub fn chw(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![c, h, w], data)
    }

    /// Rank-1 constructor.
    pub fn flat(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extents of a rank-3 tensor; errors name the offending axis count.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "expected rank-3 tensor, got rank {} ({:?})",
                self.shape.len(),
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        let (_, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let (_, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w] = v;
    }

    /// Reinterpret as rank 1 without copying.
    pub fn flattened(mut self) -> Tensor {
        self.shape = vec![self.data.len()];
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
