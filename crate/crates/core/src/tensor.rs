//! Dense row-major tensors and the contraction primitives the rest of the
//! crate is built on.
//!
//! Contraction goes through permute, reshape and a plain matrix product. The
//! literal nested-loop reference lives in [`crate::oracle`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` in row-major order.
///
/// A tensor with an empty shape is a scalar and holds exactly one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A pair of axes to be summed over: `axis_a` of the first operand against
/// `axis_b` of the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisPair {
    pub axis_a: usize,
    pub axis_b: usize,
}

impl AxisPair {
    pub fn new(axis_a: usize, axis_b: usize) -> Self {
        AxisPair { axis_a, axis_b }
    }
}

impl From<(usize, usize)> for AxisPair {
    fn from((axis_a, axis_b): (usize, usize)) -> Self {
        AxisPair { axis_a, axis_b }
    }
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&n| n == 0) {
            return Err(Error::Dimension(format!(
                "axis {axis} has extent 0; extents must be positive"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseTensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        DenseTensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Row-major `rows x cols` matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        DenseTensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(dim: usize) -> Self {
        let mut t = DenseTensor::zeros(&[dim, dim]);
        for i in 0..dim {
            t.data[i * dim + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by evaluating `f` on every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = DenseTensor::zeros(shape);
        let mut index = vec![0; shape.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&index);
            increment(&mut index, shape);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut offset = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            debug_assert!(i < n);
            offset = offset * n + i;
        }
        offset
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let offset = self.offset(index);
        self.data[offset] = value;
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        DenseTensor::new(shape.to_vec(), self.data.clone())
    }

    /// Reorders axes so that axis `i` of the result is axis `perm[i]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!(
                "{perm:?} is not a permutation of {n} axes"
            )));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let src_strides = self.strides();
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0; n];
        for _ in 0..self.data.len() {
            let offset: usize = index.iter().zip(&walk).map(|(i, s)| i * s).sum();
            data.push(self.data[offset]);
            increment(&mut index, &shape);
        }
        Ok(DenseTensor { shape, data })
    }

    /// `self + alpha * other`, elementwise.
    pub fn scaled_add(&self, alpha: f64, other: &DenseTensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot add shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Row-major odometer step. Returns false after wrapping past the last index.
pub(crate) fn increment(index: &mut [usize], shape: &[usize]) -> bool {
    for axis in (0..index.len()).rev() {
        index[axis] += 1;
        if index[axis] < shape[axis] {
            return true;
        }
        index[axis] = 0;
    }
    false
}

/// `out = a (m x k) * b (k x n)`, all row-major slices.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Contracts `a` and `b` over the given axis pairs.
///
/// The result carries the free axes of `a` in order, followed by the free axes
/// of `b`. An empty pair list gives the outer product.
pub fn contract(a: &DenseTensor, b: &DenseTensor, pairs: &[AxisPair]) -> Result<DenseTensor> {
    let mut used_a = vec![false; a.ndim()];
    let mut used_b = vec![false; b.ndim()];
    for pair in pairs {
        let (ia, ib) = (pair.axis_a, pair.axis_b);
        if ia >= a.ndim() || ib >= b.ndim() {
            return Err(Error::Dimension(format!(
                "axis pair ({ia}, {ib}) out of range for ranks {} and {}",
                a.ndim(),
                b.ndim()
            )));
        }
        if used_a[ia] || used_b[ib] {
            return Err(Error::Dimension(format!(
                "axis pair ({ia}, {ib}) reuses an axis"
            )));
        }
        if a.shape[ia] != b.shape[ib] {
            return Err(Error::Dimension(format!(
                "axis pair ({ia}, {ib}) has extents {} and {}",
                a.shape[ia], b.shape[ib]
            )));
        }
        used_a[ia] = true;
        used_b[ib] = true;
    }

    let free_a: Vec<usize> = (0..a.ndim()).filter(|&i| !used_a[i]).collect();
    let free_b: Vec<usize> = (0..b.ndim()).filter(|&i| !used_b[i]).collect();
    let perm_a: Vec<usize> = free_a.iter().copied().chain(pairs.iter().map(|p| p.axis_a)).collect();
    let perm_b: Vec<usize> = pairs.iter().map(|p| p.axis_b).chain(free_b.iter().copied()).collect();

    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = pairs.iter().map(|p| a.shape[p.axis_a]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();

    let a_mat = a.permute(&perm_a)?;
    let b_mat = b.permute(&perm_b)?;
    let mut data = vec![0.0; m * n];
    matmul_into(&a_mat.data, &b_mat.data, &mut data, m, k, n);

    let shape = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&i| b.shape[i]))
        .collect();
    DenseTensor::new(shape, data)
}

/// Product of a chain of matrices, closed by a trace or capped by boundary
/// vectors.
///
/// With `closed` every element must be a `D x D` matrix (tensor ring). Without
/// it the first element is a row vector, the last a column vector, and the
/// ones in between matrices (tensor train).
pub fn trace_product(matrices: &[DenseTensor], closed: bool) -> Result<f64> {
    if matrices.is_empty() {
        return Err(Error::Dimension("empty matrix chain".into()));
    }
    if closed {
        let mut acc: Option<DenseTensor> = None;
        for (i, m) in matrices.iter().enumerate() {
            if m.ndim() != 2 {
                return Err(Error::Dimension(format!("element {i} is not a matrix")));
            }
            acc = Some(match acc {
                None => m.clone(),
                Some(prev) => contract(&prev, m, &[AxisPair::new(1, 0)]).map_err(|_| {
                    Error::Dimension(format!(
                        "inner dimension mismatch at element {i}: {:?} then {:?}",
                        prev.shape, m.shape
                    ))
                })?,
            });
        }
        let acc = acc.expect("non-empty chain");
        if acc.shape[0] != acc.shape[1] {
            return Err(Error::Dimension(format!(
                "closed chain product has shape {:?}",
                acc.shape
            )));
        }
        let d = acc.shape[0];
        Ok((0..d).map(|i| acc.data[i * d + i]).sum())
    } else {
        let first = &matrices[0];
        if first.ndim() != 1 {
            return Err(Error::Dimension("open chain must start with a vector".into()));
        }
        if matrices.len() == 1 {
            return Err(Error::Dimension("open chain needs two boundary vectors".into()));
        }
        let last = &matrices[matrices.len() - 1];
        if last.ndim() != 1 {
            return Err(Error::Dimension("open chain must end with a vector".into()));
        }
        let mut acc = first.clone();
        for (i, m) in matrices.iter().enumerate().skip(1) {
            if i + 1 < matrices.len() && m.ndim() != 2 {
                return Err(Error::Dimension(format!("element {i} is not a matrix")));
            }
            acc = contract(&acc, m, &[AxisPair::new(0, 0)]).map_err(|_| {
                Error::Dimension(format!(
                    "inner dimension mismatch at element {i}: {:?} then {:?}",
                    acc.shape, m.shape
                ))
            })?;
        }
        Ok(acc.item())
    }
}

/// The copy tensor: one when all `order` indices agree, zero otherwise.
pub fn copy_tensor(order: usize, dim: usize) -> Result<DenseTensor> {
    if order == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "copy tensor needs order >= 1 and dim >= 1, got order {order}, dim {dim}"
        )));
    }
    let shape = vec![dim; order];
    let mut t = DenseTensor::zeros(&shape);
    let diagonal_stride: usize = strides(&shape).iter().sum();
    for v in 0..dim {
        t.data[v * diagonal_stride] = 1.0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_vector() {
        let a = DenseTensor::identity(2);
        let b = DenseTensor::vector(&[3.0, 5.0]);
        let c = contract(&a, &b, &[AxisPair::new(1, 0)]).unwrap();
        assert_eq!(c.shape(), &[2]);
        assert_eq!(c.data(), &[3.0, 5.0]);
    }

    #[test]
    fn empty_pairs_is_outer_product() {
        let a = DenseTensor::vector(&[1.0, 2.0]);
        let b = DenseTensor::vector(&[3.0, 4.0]);
        let c = contract(&a, &b, &[]).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn mismatched_extents_name_the_pair() {
        let a = DenseTensor::zeros(&[2, 3]);
        let b = DenseTensor::zeros(&[2, 3]);
        let err = contract(&a, &b, &[AxisPair::new(1, 0)]).unwrap_err();
        assert!(err.to_string().contains("(1, 0)"), "{err}");
        assert!(contract(&a, &b, &[(0, 0).into(), (0, 1).into()]).is_err());
        assert!(contract(&a, &b, &[(2, 0).into()]).is_err());
    }

    #[test]
    fn scalar_tensor_has_one_value() {
        let s = DenseTensor::scalar(2.5);
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(&[]), 2.5);
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let t = DenseTensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(t.permute(&[0, 0]).is_err());
    }

    #[test]
    fn trace_of_identities() {
        let chain = vec![DenseTensor::identity(2); 3];
        assert_eq!(trace_product(&chain, true).unwrap(), 2.0);
    }

    #[test]
    fn open_chain_with_orthogonal_boundaries() {
        let chain = vec![
            DenseTensor::vector(&[1.0, 0.0]),
            DenseTensor::identity(2),
            DenseTensor::vector(&[0.0, 1.0]),
        ];
        assert_eq!(trace_product(&chain, false).unwrap(), 0.0);
    }

    #[test]
    fn trace_product_rejects_bad_chains() {
        let chain = vec![DenseTensor::identity(2), DenseTensor::identity(3)];
        assert!(matches!(trace_product(&chain, true), Err(Error::Dimension(_))));
        let open = vec![DenseTensor::vector(&[1.0, 0.0]), DenseTensor::vector(&[1.0, 0.0, 0.0])];
        assert!(trace_product(&open, false).is_err());
    }

    #[test]
    fn copy_tensor_entries() {
        let d = copy_tensor(3, 2).unwrap();
        assert_eq!(d.data().iter().filter(|&&v| v != 0.0).count(), 2);
        assert_eq!(d.get(&[0, 0, 0]), 1.0);
        assert_eq!(d.get(&[1, 1, 1]), 1.0);
        assert_eq!(copy_tensor(1, 4).unwrap().data(), &[1.0; 4]);
        assert_eq!(copy_tensor(2, 3).unwrap(), DenseTensor::identity(3));
        assert!(copy_tensor(0, 2).is_err());
    }

    #[test]
    fn copy_tensor_with_one_hot_gives_projector() {
        let delta = copy_tensor(3, 2).unwrap();
        for k in 0..2 {
            let mut e = DenseTensor::zeros(&[2]);
            e.set(&[k], 1.0);
            let m = contract(&delta, &e, &[AxisPair::new(2, 0)]).unwrap();
            let expected = contract(&e, &e, &[]).unwrap();
            assert_eq!(m, expected);
        }
    }
}
