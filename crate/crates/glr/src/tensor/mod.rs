//! Minimal deterministic differentiable tensor engine: exactly the operators
//! the renderer needs (conv2d, resblock, relu, 2x upsampling), plus Adam,
//! gradient clipping, and finite-difference verification.
//!
//! All operators are single-threaded with a fixed accumulation order, so
//! results are bit-identical across runs. Training runs in `f32`; the `f64`
//! instantiation exists for gradient verification.

mod conv;
mod gradcheck;
mod ops;
mod optim;

pub use conv::{conv2d, conv2d_backward, conv2d_reference};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::{
    relu, relu_backward, resblock, resblock_backward, resblock_forward_cached, upsample2x,
    upsample2x_backward, ResblockCache, ResblockWeights, UpsampleMode,
};
pub use optim::{adam_step, clip_global_norm, AdamHyper, AdamState};

use crate::{GlrError, Result};
use std::collections::HashMap;

/// Floating-point element type with a matching GEMM kernel.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C <- alpha * A(m x k) * B(k x n) + beta * C(m x n), arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents; matrices must not alias C.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor (last dim fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(GlrError::Shape(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(GlrError::Shape(format!(
                "dims {:?} imply {} elements, data has {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret the same row-major data under new dims (element count must match).
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(GlrError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.dims,
                self.data.len(),
                dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += other (shapes must match).
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.add_scaled_assign(other, S::one())
    }

    /// self += scale * other (shapes must match).
    pub fn add_scaled_assign(&mut self, other: &Self, scale: S) -> Result<()> {
        if self.dims != other.dims {
            return Err(GlrError::Shape(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: S) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    /// Checked multi-index accessor; convenience for tests and small code paths.
    pub fn at(&self, idx: &[usize]) -> S {
        assert_eq!(idx.len(), self.dims.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.dims).enumerate() {
            assert!(ix < d, "index {ix} out of range {d} at axis {i}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }
}

/// Ordered collection of named tensors. Iteration follows insertion order,
/// which fixes the accumulation/update/serialization order everywhere.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedTensors<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

/// Learnable parameters.
pub type ParamSet<S> = NamedTensors<S>;
/// Per-parameter gradients, same names and shapes as the `ParamSet`.
pub type GradStore<S> = NamedTensors<S>;

impl<S: Scalar> NamedTensors<S> {
    pub fn new() -> Self {
        NamedTensors {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(GlrError::Config(format!("duplicate tensor name {name:?}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| GlrError::Config(format!("no tensor named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(GlrError::Config(format!("no tensor named {name:?}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }

    /// Total number of scalar elements across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = NamedTensors::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.dims()))
                .expect("names unique");
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> NamedTensors<T> {
        let mut out = NamedTensors::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast()).expect("names unique");
        }
        out
    }

    /// Elementwise self += other over identical name sets and shapes.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(GlrError::Shape("named tensor sets differ".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: S) {
        for t in &mut self.tensors {
            t.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(r.dims(), &[3, 2]);
        assert!(t.clone().reshape(&[4, 2]).is_err());
    }

    #[test]
    fn from_vec_validates() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[1, 0, 2]), 8.0);
        assert_eq!(t.at(&[0, 1, 1]), 4.0);
    }

    #[test]
    fn named_tensors_keep_insertion_order() {
        let mut p = NamedTensors::<f32>::new();
        p.insert("b", Tensor::zeros(&[2])).unwrap();
        p.insert("a", Tensor::zeros(&[3])).unwrap();
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.scalar_count(), 5);
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn add_assign_checks_shapes() {
        let mut a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::full(&[2, 2], 1.5);
        a.add_assign(&b).unwrap();
        assert_eq!(a.data(), &[1.5; 4]);
        let c = Tensor::<f32>::zeros(&[4]);
        assert!(a.add_assign(&c).is_err());
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::from_vec(&[3], vec![0.25f32, -1.5, 3.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(back, t);
    }
}
