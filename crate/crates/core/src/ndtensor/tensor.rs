use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Largest absolute value. Not differentiable; only available off-tape.
    MaxAbs,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::structural(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::structural(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Column vector of shape `[n, 1]`.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len(), 1], data }
    }

    /// Row vector of shape `[1, n]`.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::structural("ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Rows of a 2-D tensor as owned vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let (r, c) = self.dims2().expect("to_rows on a non-matrix");
        (0..r).map(|i| self.data[i * c..(i + 1) * c].to_vec()).collect()
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::structural(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::structural(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Valid (unpadded) 2-D convolution. `self` is `[cin, h, w]`, `kernels` is
    /// `[cout, cin, k, k]`, `bias` is `[cout]`.
    pub fn conv2d(&self, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        let geo = ConvGeometry::new(self.shape(), kernels.shape(), bias.shape(), stride)?;
        let mut out = vec![0.0; geo.cout * geo.oh * geo.ow];
        for co in 0..geo.cout {
            let b = bias.data[co];
            out[co * geo.oh * geo.ow..(co + 1) * geo.oh * geo.ow].fill(b);
            for ci in 0..geo.cin {
                for ki in 0..geo.k {
                    for kj in 0..geo.k {
                        let w = kernels.data[geo.kernel_index(co, ci, ki, kj)];
                        if w == 0.0 {
                            continue;
                        }
                        for oi in 0..geo.oh {
                            let in_row = geo.input_index(ci, oi * stride + ki, kj);
                            let out_row = (co * geo.oh + oi) * geo.ow;
                            for oj in 0..geo.ow {
                                out[out_row + oj] += w * self.data[in_row + oj * stride];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![geo.cout, geo.oh, geo.ow], data: out })
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::domain("softmax of non-finite input"));
        }
        let lanes = Lanes::new(&self.shape, axis)?;
        let mut out = self.data.clone();
        lanes.for_each(|idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - max).exp();
                total += out[i];
            }
            for i in idx {
                out[i] /= total;
            }
        });
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    /// Reduce along `axis`, or over every element when `axis` is `None`.
    /// The reduced axis is dropped; a full reduction yields shape `[1]`.
    pub fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Tensor> {
        let fold = |vals: &mut dyn Iterator<Item = f64>, n: usize| -> f64 {
            match kind {
                ReduceKind::Sum => vals.sum(),
                ReduceKind::Mean => vals.sum::<f64>() / n as f64,
                ReduceKind::MaxAbs => vals.fold(0.0, |m, v| m.max(v.abs())),
            }
        };
        match axis {
            None => {
                if self.data.is_empty() {
                    return Err(Error::structural("reduction over an empty tensor"));
                }
                Ok(Tensor::scalar(fold(&mut self.data.iter().copied(), self.data.len())))
            }
            Some(axis) => {
                let lanes = Lanes::new(&self.shape, axis)?;
                let mut shape = self.shape.clone();
                let n = shape.remove(axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                let mut out = Vec::with_capacity(lanes.count());
                lanes.for_each(|idx| out.push(fold(&mut idx.map(|i| self.data[i]), n)));
                Ok(Tensor { shape, data: out })
            }
        }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::structural("concat of nothing"))?;
        if axis >= first.ndim() {
            return Err(Error::structural(format!("concat axis {axis} out of range")));
        }
        for p in parts {
            let same_rank = p.ndim() == first.ndim();
            let agree =
                same_rank && p.shape.iter().zip(&first.shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(Error::structural(format!(
                    "concat shapes {:?} and {:?} disagree off axis {axis}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::structural(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// Index helper for operations that act on every 1-D lane along one axis.
pub(crate) struct Lanes {
    outer: usize,
    extent: usize,
    inner: usize,
}

impl Lanes {
    pub(crate) fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::structural(format!("axis {axis} out of range for {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Error::structural("empty reduction axis"));
        }
        Ok(Lanes {
            outer: shape[..axis].iter().product(),
            extent: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    pub(crate) fn count(&self) -> usize {
        self.outer * self.inner
    }

    pub(crate) fn for_each(&self, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let start = o * self.extent * self.inner + i;
                let end = start + self.extent * self.inner;
                f((start..end).step_by(self.inner));
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], kernels: &[usize], bias: &[usize], stride: usize) -> Result<Self> {
        let [cin, h, w] = *input else {
            return Err(Error::structural(format!("conv2d input must be [cin,h,w], got {input:?}")));
        };
        let [cout, kcin, k, k2] = *kernels else {
            return Err(Error::structural(format!("conv2d kernels must be [cout,cin,k,k], got {kernels:?}")));
        };
        if kcin != cin || k != k2 {
            return Err(Error::structural(format!("kernel shape {kernels:?} incompatible with input {input:?}")));
        }
        if bias != [cout] {
            return Err(Error::structural(format!("bias shape {bias:?}, expected [{cout}]")));
        }
        if stride == 0 {
            return Err(Error::structural("conv2d stride must be at least 1"));
        }
        if k > h || k > w {
            return Err(Error::structural(format!("kernel {k}x{k} larger than input {h}x{w}")));
        }
        Ok(ConvGeometry { cin, h, w, cout, k, oh: (h - k) / stride + 1, ow: (w - k) / stride + 1 })
    }

    #[inline]
    pub(crate) fn kernel_index(&self, co: usize, ci: usize, ki: usize, kj: usize) -> usize {
        ((co * self.cin + ci) * self.k + ki) * self.k + kj
    }

    #[inline]
    pub(crate) fn input_index(&self, ci: usize, i: usize, j: usize) -> usize {
        (ci * self.h + i) * self.w + j
    }
}
