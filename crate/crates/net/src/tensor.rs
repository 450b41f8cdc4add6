use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRecord")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRecord> for Tensor {
    type Error = NetError;

    fn try_from(r: TensorRecord) -> Result<Tensor> {
        Tensor::new(r.shape, r.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        if n != Some(data.len()) {
            return Err(NetError::Shape(format!("shape {shape:?} does not match {} values", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[N, C, D, H, W]` view of a rank-5 tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| NetError::Shape(format!("expected rank-5 tensor, got {:?}", self.shape)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slices `[lo, hi)` along axis `axis` of a rank-5 tensor.
    pub fn slice_axis(&self, axis: usize, lo: usize, hi: usize) -> Result<Tensor> {
        let dims = self.dims5()?;
        if lo >= hi || hi > dims[axis] {
            return Err(NetError::Shape(format!("slice {lo}..{hi} out of axis {axis} of {dims:?}")));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (hi - lo) * inner);
        for o in 0..outer {
            let base = o * dims[axis] * inner;
            data.extend_from_slice(&self.data[base + lo * inner..base + hi * inner]);
        }
        let mut shape = dims.to_vec();
        shape[axis] = hi - lo;
        Tensor::new(shape, data)
    }

    /// Concatenates rank-5 tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| NetError::Shape("empty batch".into()))?.dims5()?;
        let mut data = Vec::with_capacity(first.iter().product::<usize>() * parts.len());
        for p in parts {
            let d = p.dims5()?;
            if d[1..] != first[1..] {
                return Err(NetError::Shape(format!("batch members {first:?} vs {d:?}")));
            }
            data.extend_from_slice(&p.data);
        }
        let n: usize = parts.iter().map(|p| p.shape[0]).sum();
        Tensor::new(vec![n, first[1], first[2], first[3], first[4]], data)
    }
}
