//! Dense row-major tensors and the handful of kernels the transformer needs.
//!
//! Every kernel iterates in a fixed order, so results are bit-reproducible for
//! a given input. Reductions run left to right over the reduced axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. `shape.iter().product() == data.len()` and every
/// dimension is at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "invalid shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor by evaluating `f` on each flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        assert!(len > 0, "invalid shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as `[..., last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &s)| {
            assert!(i < s, "index {index:?} out of bounds for {:?}", self.shape);
            acc * s + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let k = self.flat_index(index);
        self.data[k] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "elementwise",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Self {
        assert_eq!(self.shape.len(), 2, "transpose expects a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        Self::from_fn(&[c, r], |k| self.data[(k % r) * c + k / r])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::cast_from(x)).collect(),
        }
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str, other: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: other.shape().to_vec(),
        }),
    }
}

/// Matrix product `a[m×k] · b[k×n]`, each output accumulated left to right over `k`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul", b)?;
    let (k2, n) = matrix_dims(b, "matmul", a)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds a length-`n` bias to every row of an `m×n` matrix in place.
pub fn add_row_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    if bias.len() != x.last_dim() {
        return Err(Error::Dimension {
            op: "add_row_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(())
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Euclidean norm over the last dimension; output drops that dimension.
pub fn l2_norm_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let norms: Vec<T> = (0..x.rows())
        .map(|r| x.row(r).iter().fold(T::zero(), |s, &v| s + v * v).sqrt())
        .collect();
    let shape = if x.shape().len() > 1 {
        x.shape()[..x.shape().len() - 1].to_vec()
    } else {
        vec![1]
    };
    Tensor::new(shape, norms).expect("row count matches shape")
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let d = T::from_usize(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / d;
    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / d;
    (mean, T::one() / (var + eps).sqrt())
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    Ok(())
}

/// Row-wise layer normalization with biased (two-pass) variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_affine(x, gain, bias)?;
    if eps <= T::zero() {
        return Err(Error::Parameter("layer_norm eps must be positive".into()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let (mean, inv_std) = row_stats(x.row(r), eps);
        for ((v, &g), &b) in out.row_mut(r).iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

/// Gradient of `layer_norm` with respect to its input, given the upstream gradient `dy`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::Dimension {
            op: "layer_norm_backward",
            left: x.shape().to_vec(),
            right: dy.shape().to_vec(),
        });
    }
    let d = x.last_dim();
    let dn = T::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, inv_std) = row_stats(row, eps);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for k in 0..d {
            let g = dy.row(r)[k] * gain.data()[k];
            let xhat = (row[k] - mean) * inv_std;
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * xhat;
        }
        let out = dx.row_mut(r);
        for k in 0..d {
            let g = dy.row(r)[k] * gain.data()[k];
            let xhat = (row[k] - mean) * inv_std;
            out[k] = inv_std / dn * (dn * g - sum_g - xhat * sum_gx);
        }
    }
    Ok(dx)
}

fn gelu_inner<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    c * (x + T::lit(0.044715) * x * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_inner(x).tanh())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(x).tanh();
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Bilinear upsampling of an `H×W` map by an integer factor using the
/// half-pixel (align-corners = false) sampling convention.
pub fn bilinear_upsample<T: Scalar>(m: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::Parameter("upsample factor must be >= 1".into()));
    }
    let (h, w) = match m.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("bilinear_upsample expects H×W, got {s:?}"))),
    };
    if factor == 1 {
        return Ok(m.clone());
    }
    let scale = T::one() / T::from_usize(factor).unwrap();
    let half = T::lit(0.5);
    let source = |dst: usize, len: usize| -> (usize, usize, T) {
        let s = ((T::from_usize(dst).unwrap() + half) * scale - half).max(T::zero());
        let i0 = s.floor().to_usize().unwrap().min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let frac = if i0 == i1 { T::zero() } else { s - T::from_usize(i0).unwrap() };
        (i0, i1, frac)
    };
    let (oh, ow) = (h * factor, w * factor);
    let cols: Vec<_> = (0..ow).map(|x| source(x, w)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = source(y, h);
        for &(x0, x1, fx) in &cols {
            let top = m.data[y0 * w + x0] * (T::one() - fx) + m.data[y0 * w + x1] * fx;
            let bottom = m.data[y1 * w + x0] * (T::one() - fx) + m.data[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![oh, ow], out)
}
