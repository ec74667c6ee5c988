//! Dense multidimensional arrays and the batched linear-algebra kernels the
//! layers are built from.
//!
//! Tensors are row-major with the axis convention (batch, frames, joints,
//! features). Kernels are exact-shape: nothing broadcasts, and every mismatch
//! is a hard error naming both shapes. All operations are pure; the only
//! sanctioned mutation is an explicit in-place parameter update by the
//! optimizer.

use crate::error::{Error, Result};

/// Scalar element type. `f32` is the training/inference default; `f64` is
/// used for finite-difference verification where 32-bit rounding would mask
/// gradient bugs.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `c ← alpha · op(a) · op(b) + beta · c` on row-major buffers, where
    /// `op` optionally transposes. Dimensions are those of the logical
    /// product: `op(a)` is m×k, `op(b)` is k×n, `c` is m×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
                assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
                assert_eq!(c.len(), m * n, "gemm: out buffer length");
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor of rank 1..=4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", dims.join(","))
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidArgument(format!(
            "tensor rank must be 1..=4, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "tensor extents must be >= 1, got {}",
            shape_str(shape)
        )));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_shape(shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "tensor construction",
                format!("{} elements for shape {}", expect, shape_str(shape)),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// All-zero tensor. Panics on an invalid shape (internal construction
    /// only builds validated shapes).
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Builds from an index function; indices are passed in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> S) -> Self {
        check_shape(shape).expect("valid shape");
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    /// Identity matrix as a rank-2 tensor.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |ix| if ix[0] == ix[1] { S::one() } else { S::zero() })
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Row-major offset of a full multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (ax, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[ax]);
            off = off * self.shape[ax] + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: S) {
        let off = self.offset(index);
        self.data[off] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(&self, other: &Self, what: &str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(what, shape_str(&self.shape), shape_str(&other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// In-place `self += other`; used for gradient accumulation.
    pub(crate) fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulate: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Converts element type (through f64, exact for f32→f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| T::of_f64(v.as_f64())).collect() }
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", shape_str(shape), shape_str(&self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Copies the sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "narrow axis {} out of range for rank {}",
                axis,
                self.rank()
            )));
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow range {}..{} out of bounds for extent {}",
                start,
                start + len,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * self.shape[axis] + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Self { shape, data })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        if first.rank() >= 4 {
            return Err(Error::InvalidArgument("stack would exceed rank 4".into()));
        }
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", shape_str(&first.shape), shape_str(&p.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

/// Concatenates two tensors along `axis`; every other extent must agree.
pub(crate) fn concat_axis<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if x.rank() != y.rank() || axis >= x.rank() {
        return Err(Error::shape(
            format!("concat along axis {axis}"),
            shape_str(&x.shape),
            shape_str(&y.shape),
        ));
    }
    for ax in 0..x.rank() {
        if ax != axis && x.shape[ax] != y.shape[ax] {
            return Err(Error::shape(
                format!("concat along axis {axis}"),
                shape_str(&x.shape),
                shape_str(&y.shape),
            ));
        }
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let (ex, ey) = (x.shape[axis], y.shape[axis]);
    let mut shape = x.shape.clone();
    shape[axis] = ex + ey;
    let mut data = Vec::with_capacity(x.len() + y.len());
    for o in 0..outer {
        data.extend_from_slice(&x.data[o * ex * inner..(o + 1) * ex * inner]);
        data.extend_from_slice(&y.data[o * ey * inner..(o + 1) * ey * inner]);
    }
    Ok(Tensor { shape, data })
}

/// `out_slice = a · x_slice` for every leading index, with `a` square and
/// matching the second-to-last axis of `x`.
pub fn matmul_left<S: Scalar>(a: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    matmul_left_impl(a, x, false)
}

/// Same contraction with `a` transposed; the backward pass needs it.
pub(crate) fn matmul_left_t<S: Scalar>(a: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    matmul_left_impl(a, x, true)
}

fn matmul_left_impl<S: Scalar>(a: &Tensor<S>, x: &Tensor<S>, trans_a: bool) -> Result<Tensor<S>> {
    if a.rank() != 2 || a.shape[0] != a.shape[1] {
        return Err(Error::shape("matmul_left lhs", "square matrix", shape_str(&a.shape)));
    }
    let n = a.shape[0];
    if x.rank() < 2 || x.shape[x.rank() - 2] != n {
        return Err(Error::shape(
            "matmul_left",
            format!("node axis of extent {n} to match lhs {}", shape_str(&a.shape)),
            shape_str(&x.shape),
        ));
    }
    // Fold (lead, N, F) into node-major (N, lead·F) so the whole batch is a
    // single product, then unfold.
    let folded = fold_node_major(x);
    let lead_f = folded.shape[1];
    let mut out2 = Tensor::zeros(&[n, lead_f]);
    S::gemm(n, n, lead_f, S::one(), &a.data, trans_a, &folded.data, false, S::zero(), &mut out2.data);
    Ok(unfold_node_major(&out2, &x.shape))
}

/// `out_slice = x_slice · w` for every leading index; `w` is F_in×F_out.
pub fn matmul_right<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    matmul_right_impl(x, w, false)
}

/// Same contraction with `w` transposed (x · wᵀ, w stored F_out-major).
pub(crate) fn matmul_right_t<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    matmul_right_impl(x, w, true)
}

fn matmul_right_impl<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, trans_w: bool) -> Result<Tensor<S>> {
    if w.rank() != 2 {
        return Err(Error::shape("matmul_right rhs", "rank-2 matrix", shape_str(&w.shape)));
    }
    let (f_in, f_out) = if trans_w { (w.shape[1], w.shape[0]) } else { (w.shape[0], w.shape[1]) };
    if *x.shape.last().unwrap() != f_in {
        return Err(Error::shape(
            "matmul_right",
            format!("feature axis of extent {f_in} to match rhs {}", shape_str(&w.shape)),
            shape_str(&x.shape),
        ));
    }
    let rows = x.len() / f_in;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = f_out;
    let mut out = Tensor::zeros(&shape);
    S::gemm(rows, f_in, f_out, S::one(), &x.data, false, &w.data, trans_w, S::zero(), &mut out.data);
    Ok(out)
}

/// Permutes (lead, N, F) storage into a rank-2 (N, lead·F) view copy, where N
/// is the second-to-last axis. Inverse of [`unfold_node_major`].
pub(crate) fn fold_node_major<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let rank = x.rank();
    let n = x.shape[rank - 2];
    let f = x.shape[rank - 1];
    let lead: usize = x.shape[..rank - 2].iter().product();
    let mut data = vec![S::zero(); x.len()];
    for g in 0..lead {
        for j in 0..n {
            let src = (g * n + j) * f;
            let dst = (j * lead + g) * f;
            data[dst..dst + f].copy_from_slice(&x.data[src..src + f]);
        }
    }
    Tensor { shape: vec![n, lead * f], data }
}

pub(crate) fn unfold_node_major<S: Scalar>(x2: &Tensor<S>, orig_shape: &[usize]) -> Tensor<S> {
    let rank = orig_shape.len();
    let n = x2.shape[0];
    let f = *orig_shape.last().unwrap();
    let lead: usize = orig_shape[..rank - 2].iter().product();
    debug_assert_eq!(x2.shape[1], lead * f);
    let mut shape = orig_shape.to_vec();
    shape[rank - 2] = n;
    let mut data = vec![S::zero(); x2.len()];
    for j in 0..n {
        for g in 0..lead {
            let src = (j * lead + g) * f;
            let dst = (g * n + j) * f;
            data[dst..dst + f].copy_from_slice(&x2.data[src..src + f]);
        }
    }
    Tensor { shape, data }
}

/// Swaps the frame and joint axes of a rank-4 (B,L,M,F) tensor. Involution.
pub fn transpose_frames_joints<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(Error::InvalidArgument(format!(
            "transpose_frames_joints needs a rank-4 tensor, got rank {}",
            x.rank()
        )));
    }
    let (b, l, m, f) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = Tensor::zeros(&[b, m, l, f]);
    for bi in 0..b {
        for li in 0..l {
            for mi in 0..m {
                let src = ((bi * l + li) * m + mi) * f;
                let dst = ((bi * m + mi) * l + li) * f;
                out.data[dst..dst + f].copy_from_slice(&x.data[src..src + f]);
            }
        }
    }
    Ok(out)
}

/// Appends `y` after `x` along the frame axis of rank-4 tensors.
pub fn concat_frames<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 || y.rank() != 4 {
        return Err(Error::InvalidArgument("concat_frames needs rank-4 tensors".into()));
    }
    concat_axis(x, y, 1)
}
