use super::kernels;
use super::Real;
use crate::{Error, Result};

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `data` (laid out by `shape`) with its axes reordered so that
/// output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data<F: Copy>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn check_axes(op: &'static str, rank: usize, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::shape(op, format!("{} axes for rank {rank}", axes.len())));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::shape(op, format!("invalid axis list {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: F) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut o = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            debug_assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            o = o * n + i;
        }
        o
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_axes("permute", self.rank(), axes)?;
        Ok(Tensor {
            shape: axes.iter().map(|&a| self.shape[a]).collect(),
            data: permute_data(&self.data, &self.shape, axes),
        })
    }

    /// Rows `indices` of the leading axis, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("select_rows", "rank 0"))?;
        let row = self.len() / n.max(1);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return Err(Error::shape("select_rows", format!("row {i} of {n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference, or `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<F> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(F::zero(), F::max),
        )
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Standard product of two matrices.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::count_dense(m, k, n);
        kernels::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape)));
        }
        self.permute(&[1, 0])
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.along_axis("softmax", axis, |t| {
            let w = *t.shape.last().unwrap_or(&1);
            let mut out = vec![F::zero(); t.len()];
            if w > 0 {
                kernels::softmax_rows(&t.data, w, &mut out);
            }
            Ok(out)
        })
    }

    /// Layer normalization along `axis` with per-position `gain` and `bias`
    /// (each of length `shape[axis]`); epsilon 1e-5 inside the square root.
    pub fn layer_norm(&self, axis: usize, gain: &[F], bias: &[F]) -> Result<Self> {
        self.along_axis("layer_norm", axis, |t| {
            let w = *t.shape.last().unwrap_or(&1);
            if gain.len() != w || bias.len() != w {
                return Err(Error::shape(
                    "layer_norm",
                    format!("axis extent {w}, gain {}, bias {}", gain.len(), bias.len()),
                ));
            }
            let rows = t.len() / w.max(1);
            let mut out = vec![F::zero(); t.len()];
            let mut xhat = vec![F::zero(); t.len()];
            let mut inv = vec![F::zero(); rows];
            kernels::layer_norm_rows(&t.data, w, gain, bias, &mut out, &mut xhat, &mut inv);
            Ok(out)
        })
    }

    /// Runs a last-axis row kernel on `axis` by moving it to the back.
    fn along_axis(
        &self,
        op: &'static str,
        axis: usize,
        kernel: impl FnOnce(&Tensor<F>) -> Result<Vec<F>>,
    ) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::shape(op, format!("axis {axis} for rank {rank}")));
        }
        if axis + 1 == rank {
            return Ok(Tensor {
                shape: self.shape.clone(),
                data: kernel(self)?,
            });
        }
        let mut axes: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        axes.push(axis);
        let moved = self.permute(&axes)?;
        let out = Tensor {
            shape: moved.shape.clone(),
            data: kernel(&moved)?,
        };
        out.permute(&inverse_axes(&axes))
    }
}
