//! Dense row-major tensors with a runtime dtype tag.
//!
//! Kernels are written once against [`Element`] and dispatched on the tensor's
//! [`DType`] at the op boundary, so training can run in `f32` while gradient
//! checks run the identical code path in `f64`.

use std::fmt;

use num_traits::{Float, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("dtype mismatch in {op}: {left} vs {right}")]
    DType {
        op: &'static str,
        left: DType,
        right: DType,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Wire code used by the frame codec.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element: Float + Default + Send + Sync + fmt::Debug + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn wrap(data: Vec<Self>) -> Storage;
    fn view(storage: &Storage) -> Option<&[Self]>;
    fn view_mut(storage: &mut Storage) -> Option<&mut [Self]>;
    fn put_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `size_of::<Self>()` bytes.
    fn get_le(bytes: &[u8]) -> Self;

    fn of(v: f64) -> Self {
        Self::from(v).expect("finite f64 converts to every float type")
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn wrap(data: Vec<Self>) -> Storage {
        Storage::F32(data)
    }
    fn view(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }
    fn view_mut(storage: &mut Storage) -> Option<&mut [Self]> {
        match storage {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn wrap(data: Vec<Self>) -> Storage {
        Storage::F64(data)
    }
    fn view(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F64(v) => Some(v),
            _ => None,
        }
    }
    fn view_mut(storage: &mut Storage) -> Option<&mut [Self]> {
        match storage {
            Storage::F64(v) => Some(v),
            _ => None,
        }
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Runs `$body` with `$T` bound to the concrete scalar type of `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::DType::F32 => {
                type $T = f32;
                $body
            }
            $crate::tensor::DType::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}
pub(crate) use with_dtype;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Storage,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values = self.to_f64_vec();
        let shown: Vec<f64> = values.iter().take(8).copied().collect();
        write!(f, "Tensor<{}>{:?} {:?}", self.dtype(), self.dims, shown)?;
        if values.len() > shown.len() {
            write!(f, " ... ({} values)", values.len())?;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() {
        return Err(TensorError::Validation("tensor dims must be non-empty".into()));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(TensorError::Validation(format!(
            "extent {pos} of {dims:?} is zero"
        )));
    }
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        TensorError::Validation(format!("element count of {dims:?} overflows"))
    })
}

impl Tensor {
    pub fn new<T: Element>(dims: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(TensorError::Validation(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims,
            data: T::wrap(data),
        })
    }

    pub fn from_f32(dims: &[usize], data: &[f32]) -> Result<Self, TensorError> {
        Self::new(dims.to_vec(), data.to_vec())
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(dims.to_vec(), data.to_vec())
    }

    /// Builds a tensor of `dtype` from f64 values, rounding when narrowing.
    pub fn from_values(dims: &[usize], values: &[f64], dtype: DType) -> Result<Self, TensorError> {
        with_dtype!(dtype, T => Self::new(dims.to_vec(), values.iter().map(|&v| T::of(v)).collect()))
    }

    pub fn full(dims: &[usize], value: f64, dtype: DType) -> Result<Self, TensorError> {
        let n = check_dims(dims)?;
        Self::from_values(dims, &vec![value; n], dtype)
    }

    pub fn zeros(dims: &[usize], dtype: DType) -> Result<Self, TensorError> {
        Self::full(dims, 0.0, dtype)
    }

    pub fn zeros_like(&self) -> Tensor {
        with_dtype!(self.dtype(), T => Tensor {
            dims: self.dims.clone(),
            data: T::wrap(vec![T::zero(); self.len()]),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    /// Size of the raw scalar buffer in bytes.
    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size_of()
    }

    pub fn as_slice<T: Element>(&self) -> Option<&[T]> {
        T::view(&self.data)
    }

    pub fn as_mut_slice<T: Element>(&mut self) -> Option<&mut [T]> {
        T::view_mut(&mut self.data)
    }

    pub(crate) fn typed<T: Element>(&self) -> &[T] {
        T::view(&self.data).expect("dtype checked by caller")
    }

    pub(crate) fn typed_mut<T: Element>(&mut self) -> &mut [T] {
        T::view_mut(&mut self.data).expect("dtype checked by caller")
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        Self::from_values(&self.dims, &self.to_f64_vec(), dtype).expect("dims already valid")
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor, TensorError> {
        let n = check_dims(dims)?;
        if n != self.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.dims, dims),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Rows `start..start+count` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor, TensorError> {
        let rows = self.dims[0];
        if count == 0 || start + count > rows {
            return Err(TensorError::shape(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + count),
            ));
        }
        let row = self.len() / rows;
        let mut dims = self.dims.clone();
        dims[0] = count;
        with_dtype!(self.dtype(), T => Tensor::new(dims, self.typed::<T>()[start * row..(start + count) * row].to_vec()))
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let rows = self.dims[0];
        if indices.is_empty() {
            return Err(TensorError::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::shape(
                "gather_rows",
                format!("row {bad} out of {rows}"),
            ));
        }
        let row = self.len() / rows;
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        with_dtype!(self.dtype(), T => {
            let src = self.typed::<T>();
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                out.extend_from_slice(&src[i * row..(i + 1) * row]);
            }
            Tensor::new(dims, out)
        })
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Largest elementwise `|a-b| / max(|a|, |b|)`; exact matches (including
    /// both zero) contribute zero. Infinite if dims differ.
    pub fn max_rel_diff(&self, other: &Tensor) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.to_f64_vec()
            .iter()
            .zip(other.to_f64_vec())
            .map(|(&a, b)| {
                if a == b {
                    0.0
                } else {
                    (a - b).abs() / a.abs().max(b.abs())
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.to_f64_vec().iter().sum()
    }

    /// Appends the raw scalars, little-endian, in row-major order.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.reserve(self.byte_len());
        with_dtype!(self.dtype(), T => {
            for &v in self.typed::<T>() {
                v.put_le(out);
            }
        })
    }

    /// Inverse of [`Tensor::write_le`]; `bytes` must hold exactly the payload.
    pub fn read_le(dims: &[usize], dtype: DType, bytes: &[u8]) -> Result<Tensor, TensorError> {
        let n = check_dims(dims)?;
        let width = dtype.size_of();
        if n.checked_mul(width) != Some(bytes.len()) {
            return Err(TensorError::Validation(format!(
                "{} payload bytes cannot hold {dims:?}<{dtype}>",
                bytes.len()
            )));
        }
        with_dtype!(dtype, T => Tensor::new(dims.to_vec(), bytes.chunks_exact(width).map(T::get_le).collect()))
    }
}

pub(crate) fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<DType, TensorError> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DType {
            op,
            left: a.dtype(),
            right: b.dtype(),
        });
    }
    Ok(a.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_dims() {
        assert!(Tensor::new(vec![2, 3], vec![0f32; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0f32; 5]).is_err());
        assert!(Tensor::new::<f32>(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], Vec::<f32>::new()).is_err());
    }

    #[test]
    fn cast_round_trips_representable_values() {
        let t = Tensor::from_f32(&[3], &[1.5, -2.0, 0.25]).unwrap();
        let back = t.cast(DType::F64).cast(DType::F32);
        assert!(t.bit_eq(&back));
        assert_eq!(t.byte_len(), 12);
        assert_eq!(t.cast(DType::F64).byte_len(), 24);
    }

    #[test]
    fn gather_and_slice_rows() {
        let t = Tensor::from_f32(&[3, 2], &[0., 1., 2., 3., 4., 5.]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.as_slice::<f32>().unwrap(), &[4., 5., 0., 1.]);
        let s = t.slice_rows(1, 2).unwrap();
        assert_eq!(s.dims(), &[2, 2]);
        assert_eq!(s.as_slice::<f32>().unwrap(), &[2., 3., 4., 5.]);
        assert!(t.gather_rows(&[3]).is_err());
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let a = Tensor::from_f32(&[1], &[0.0]).unwrap();
        let b = Tensor::from_f32(&[1], &[-0.0]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
        assert_eq!(a.max_rel_diff(&b), 0.0);
    }
}
