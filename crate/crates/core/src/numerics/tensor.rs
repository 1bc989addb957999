use crate::error::{Error, Result};
use crate::numerics::fp16::{is_on_fp16_grid, quantize_slice};

/// Element domain of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    /// Emulated binary16: stored as `f32`, always on the binary16 grid.
    F16E,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "fp32",
            DType::F16E => "fp16e",
        }
    }
}

/// Dense row-major array.
///
/// Kernels treat every tensor as a matrix of `rows() x cols()`, where `cols` is
/// the last extent and `rows` the product of the others.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            dtype: DType::F32,
            data,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            dtype: DType::F32,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            dtype: DType::F32,
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            dtype: DType::F32,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Reinterprets the tensor in `dtype`, quantizing when narrowing to FP16E.
    pub fn into_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F16E && self.dtype != DType::F16E {
            quantize_slice(&mut self.data);
        }
        self.dtype = dtype;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        let c = self.cols();
        self.data
            .len()
            .checked_div(c)
            .unwrap_or_else(|| self.shape[..self.shape.len().saturating_sub(1)].iter().product())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers rows by index (duplicates allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let c = self.cols();
        let rows = self.rows();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(Error::Bounds { index: i, len: rows });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self {
            shape: vec![indices.len(), c],
            dtype: self.dtype,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks the FP16E grid invariant (always true for FP32 tensors).
    pub fn respects_dtype(&self) -> bool {
        match self.dtype {
            DType::F32 => true,
            DType::F16E => self.data.iter().all(|&v| is_on_fp16_grid(v)),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn narrowing_quantizes() {
        let t = Tensor::new(vec![2], vec![0.1, 1.0e5]).unwrap().into_dtype(DType::F16E);
        assert!(t.respects_dtype());
        assert_eq!(t.data()[1], f32::INFINITY);
        assert_ne!(t.data()[0], 0.1);
    }

    #[test]
    fn select_rows_duplicates() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.select_rows(&[1, 1, 0]).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        assert!(matches!(t.select_rows(&[2]), Err(Error::Bounds { .. })));
    }
}
