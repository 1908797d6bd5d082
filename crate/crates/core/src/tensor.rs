//! Dense row-major tensors over a configurable scalar type.
//!
//! All arithmetic checks shape compatibility and fails loudly on mismatch.
//! The only permitted broadcast is scalar-with-tensor (`scale`, `add_scalar`);
//! row-wise combinations are separate, explicitly named operations.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar dtype tag used by the container file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        match code {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

/// Scalar type of a tensor: `f64` for verification runs, `f32` for speed runs.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const DTYPE: Dtype;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_val(self, other: Self) -> Self;
    fn min_val(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $dtype;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn max_val(self, other: Self) -> Self {
                self.max(other)
            }
            fn min_val(self, other: Self) -> Self {
                self.min(other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element byte width"))
            }
        }
    };
}

impl_element!(f32, Dtype::F32);
impl_element!(f64, Dtype::F64);

/// Dense multidimensional array, row-major, immutable from the caller's view
/// once built (all ops return fresh tensors).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("shape holds {} elements but buffer has {}", numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zeros: bad shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Rank-1, single-element tensor holding one scalar.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<(usize, T)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, v)| (i, *v))
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.map(|v| v + c)
    }

    pub fn tanh(&self) -> Self {
        self.map(|v| v.tanh())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max_val(T::zero()))
    }

    pub fn sqrt(&self) -> Self {
        self.map(|v| v.sqrt())
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            acc += a * b;
        }
        Ok(acc)
    }

    /// Squared Euclidean norm of all elements.
    pub fn sq_norm(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    /// Matrix product of two rank-2 tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose on rank-{} tensor",
                self.rank()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// Row-wise sums of a rank-2 tensor: `[r,c] -> [r]`.
    pub fn sum_rows(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "sum_rows on rank-{} tensor",
                self.rank()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); r];
        for i in 0..r {
            let mut acc = T::zero();
            for j in 0..c {
                acc += self.data[i * c + j];
            }
            data[i] = acc;
        }
        Ok(Tensor {
            shape: vec![r],
            data,
        })
    }

    /// Column-wise sums of a rank-2 tensor: `[r,c] -> [c]`.
    pub fn sum_cols(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "sum_cols on rank-{} tensor",
                self.rank()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c],
            data,
        })
    }

    /// `[r,c] + [c]`, the bias vector added to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        self.rowwise(row, "add_row", |a, b| a + b)
    }

    /// `[r,c] * [c]`, every row scaled elementwise.
    pub fn mul_row(&self, row: &Self) -> Result<Self> {
        self.rowwise(row, "mul_row", |a, b| a * b)
    }

    fn rowwise(&self, row: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rank() != 2 || row.rank() != 1 || self.shape[1] != row.shape[0] {
            return Err(Error::shape(op, &self.shape, &row.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(f(self.data[i * c + j], row.data[j]));
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.numel() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {:?} ({} elements)", self.shape, self.numel()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape.iter()).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        flat
    }

    /// Slice of a rank-3 `[H,W,K]` tensor along axis 0 (`-> [W,K]`) or axis 1
    /// (`-> [H,K]`).
    pub fn grid_slice(&self, axis: usize, index: usize) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::InvalidArgument(format!(
                "grid_slice on rank-{} tensor",
                self.rank()
            )));
        }
        let (h, w, k) = (self.shape[0], self.shape[1], self.shape[2]);
        match axis {
            0 => {
                if index >= h {
                    return Err(Error::InvalidArgument(format!(
                        "grid_slice axis 0 index {index} out of bounds ({h})"
                    )));
                }
                let data = self.data[index * w * k..(index + 1) * w * k].to_vec();
                Ok(Tensor {
                    shape: vec![w, k],
                    data,
                })
            }
            1 => {
                if index >= w {
                    return Err(Error::InvalidArgument(format!(
                        "grid_slice axis 1 index {index} out of bounds ({w})"
                    )));
                }
                let mut data = Vec::with_capacity(h * k);
                for y in 0..h {
                    let base = (y * w + index) * k;
                    data.extend_from_slice(&self.data[base..base + k]);
                }
                Ok(Tensor {
                    shape: vec![h, k],
                    data,
                })
            }
            _ => Err(Error::InvalidArgument(format!(
                "grid_slice axis must be 0 or 1, got {axis}"
            ))),
        }
    }

    /// Row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Result<Self> {
        if self.rank() != 2 || i >= self.shape[0] {
            return Err(Error::InvalidArgument(format!(
                "row {i} of tensor with shape {:?}",
                self.shape
            )));
        }
        let c = self.shape[1];
        Ok(Tensor {
            shape: vec![c],
            data: self.data[i * c..(i + 1) * c].to_vec(),
        })
    }

    /// Convert elements to a different precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Max absolute elementwise difference; shapes must match.
pub fn max_abs_diff<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("max_abs_diff", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max))
}
