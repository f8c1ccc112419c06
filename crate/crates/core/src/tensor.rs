use candle_core::{DType, Tensor};

use crate::{Error, Result};

/// Which space a 4-D tensor lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Pixel,
    Latent,
}

/// A `(batch, channels, height, width)` tensor tagged with its space.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    data: Tensor,
    space: Space,
}

impl LatentTensor {
    pub fn new(data: Tensor, space: Space) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "expected a 4-d tensor, got shape {dims:?}"
            )));
        }
        if dims[2] == 0 || dims[3] == 0 {
            return Err(Error::InvalidInput(format!("empty spatial dims {dims:?}")));
        }
        Ok(Self { data, space })
    }

    pub fn latent(data: Tensor) -> Result<Self> {
        Self::new(data, Space::Latent)
    }

    pub fn pixel(data: Tensor) -> Result<Self> {
        Self::new(data, Space::Pixel)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Same space, new data. The new tensor must keep the rank-4 contract.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.space)
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor, op: &'static str) -> Result<()> {
        ensure_same_shape(&self.data, &other.data, op)
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        ensure_finite(&self.data, what)
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        flat_f64(&self.data)
    }
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    Ok(())
}

pub fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    if flat_f64(t)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Flatten any tensor into `f64` values in row-major order.
pub fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
