//! Dense row-major tensors and the handful of kernels everything else is
//! built from.
//!
//! A [`Tensor`] is an owned `f64` buffer plus its shape. Rank-0 tensors
//! (shape `[]`) hold a single scalar. Contractions are executed by permuting
//! both operands into matrix form and running a plain matrix product, which
//! is plenty for the small bond dimensions this crate works with.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};

/// Threshold on |δ| below which the 2×2 exponential switches to its series form.
pub const EXPM_DELTA_THRESHOLD: f64 = 1e-8;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!("shape {shape:?} needs {numel} elements, got {}", data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::new(&[values.len()], values.to_vec()).expect("non-empty vector")
    }

    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err!("ragged matrix rows"));
        }
        Self::new(&[r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut t.data {
                *v = normal.sample(rng);
            }
        }
        t
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(lo..hi);
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * e + i;
        }
        off
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        Ok(permute_unchecked(self, perm))
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn t(&self) -> Self {
        assert_eq!(self.rank(), 2, "t() needs a matrix");
        permute_unchecked(self, &[1, 0])
    }

    /// Sub-tensor `start..start+len` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(shape_err!(
                "slice {start}..{} of axis {axis} in {:?}",
                start + len,
                self.shape
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped tensors along a new axis at position `axis`.
    pub fn stack(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("stack of nothing"))?;
        if parts.iter().any(|p| p.shape != first.shape) {
            return Err(shape_err!("stack needs equal shapes"));
        }
        if axis > first.rank() {
            return Err(shape_err!("stack axis {axis} for rank {}", first.rank()));
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * parts.len() * inner);
        for o in 0..outer {
            for p in parts {
                data.extend_from_slice(&p.data[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape.insert(axis, parts.len());
        Ok(Self { shape, data })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(shape_err!("matmul needs matrices"));
        }
        contract(self, other, &[(1, 0)])
    }
}

fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(shape_err!("permutation {perm:?} for rank {rank}"));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(shape_err!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn permute_unchecked(t: &Tensor, perm: &[usize]) -> Tensor {
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return t.clone();
    }
    let rank = t.rank();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    let (inner_extent, inner_stride) = (out_shape[last], strides[last]);
    loop {
        for i in 0..inner_extent {
            data.push(t.data[off + i * inner_stride]);
        }
        // advance the odometer over all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor { shape: out_shape, data };
            }
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Inverse of a permutation.
pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// How a (possibly batched) pairwise contraction maps onto matrix products.
///
/// Operands are permuted to `[batch?, free_a.., paired..]` and
/// `[batch?, paired.., free_b..]` and multiplied batch by batch.
#[derive(Clone, Debug)]
pub(crate) struct ContractPlan {
    pub perm_a: Vec<usize>,
    pub perm_b: Vec<usize>,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

impl ContractPlan {
    pub fn new(a: &[usize], b: &[usize], pairs: &[(usize, usize)], batched: bool) -> Result<Self> {
        let skip = usize::from(batched);
        if batched && (a.is_empty() || b.is_empty() || a[0] != b[0]) {
            return Err(shape_err!(
                "batched contraction needs equal leading axes, {a:?} vs {b:?}"
            ));
        }
        let mut used_a = vec![false; a.len()];
        let mut used_b = vec![false; b.len()];
        for &(i, j) in pairs {
            if i < skip || j < skip || i >= a.len() || j >= b.len() {
                return Err(shape_err!("axis pair ({i}, {j}) out of range for {a:?} x {b:?}"));
            }
            if used_a[i] || used_b[j] {
                return Err(shape_err!("axis paired twice in {pairs:?}"));
            }
            if a[i] != b[j] {
                return Err(shape_err!("paired axes ({i}, {j}) have extents {} and {}", a[i], b[j]));
            }
            used_a[i] = true;
            used_b[j] = true;
        }
        let free_a: Vec<usize> = (skip..a.len()).filter(|&i| !used_a[i]).collect();
        let free_b: Vec<usize> = (skip..b.len()).filter(|&j| !used_b[j]).collect();
        let mut perm_a: Vec<usize> = (0..skip).collect();
        perm_a.extend(&free_a);
        perm_a.extend(pairs.iter().map(|p| p.0));
        let mut perm_b: Vec<usize> = (0..skip).collect();
        perm_b.extend(pairs.iter().map(|p| p.1));
        perm_b.extend(&free_b);
        let batch = if batched { a[0] } else { 1 };
        let m = free_a.iter().map(|&i| a[i]).product();
        let n = free_b.iter().map(|&j| b[j]).product();
        let k = pairs.iter().map(|p| a[p.0]).product();
        let mut out_shape: Vec<usize> = (0..skip).map(|_| batch).collect();
        out_shape.extend(free_a.iter().map(|&i| a[i]));
        out_shape.extend(free_b.iter().map(|&j| b[j]));
        Ok(Self {
            perm_a,
            perm_b,
            batch,
            m,
            k,
            n,
            out_shape,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let ap = permute_unchecked(a, &self.perm_a);
        let bp = permute_unchecked(b, &self.perm_b);
        let mut out = vec![0.0; self.batch * self.m * self.n];
        let (m, k, n) = (self.m, self.k, self.n);
        for bt in 0..self.batch {
            gemm_nn(
                &ap.data[bt * m * k..(bt + 1) * m * k],
                &bp.data[bt * k * n..(bt + 1) * k * n],
                &mut out[bt * m * n..(bt + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor {
            shape: self.out_shape.clone(),
            data: out,
        }
    }

    /// Adjoints of both operands given the adjoint of the output.
    pub fn backward(&self, a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
        let ap = permute_unchecked(a, &self.perm_a);
        let bp = permute_unchecked(b, &self.perm_b);
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = vec![0.0; self.batch * m * k];
        let mut gb = vec![0.0; self.batch * k * n];
        for bt in 0..self.batch {
            let g = &grad.data[bt * m * n..(bt + 1) * m * n];
            gemm_nt(
                g,
                &bp.data[bt * k * n..(bt + 1) * k * n],
                &mut ga[bt * m * k..(bt + 1) * m * k],
                m,
                n,
                k,
            );
            gemm_tn(
                &ap.data[bt * m * k..(bt + 1) * m * k],
                g,
                &mut gb[bt * k * n..(bt + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let ga = Tensor {
            shape: ap.shape,
            data: ga,
        };
        let gb = Tensor {
            shape: bp.shape,
            data: gb,
        };
        (
            permute_unchecked(&ga, &invert_perm(&self.perm_a)),
            permute_unchecked(&gb, &invert_perm(&self.perm_b)),
        )
    }
}

/// out (m×n) += a (m×k) · b (k×n)
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
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

/// out (m×k) += g (m×n) · bᵀ where b is (k×n)
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out (k×n) += aᵀ · g where a is (m×k), g is (m×n)
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Sums products over the paired axes `(axis of a, axis of b)`.
///
/// The result carries the unpaired axes of `a` followed by those of `b`, each
/// in their original order.
pub fn contract(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let plan = ContractPlan::new(a.shape(), b.shape(), pairs, false)?;
    Ok(plan.forward(a, b))
}

/// Like [`contract`] but axis 0 of both operands is a shared batch axis that
/// is carried through to axis 0 of the result.
pub fn batch_contract(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let plan = ContractPlan::new(a.shape(), b.shape(), pairs, true)?;
    Ok(plan.forward(a, b))
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `cosh(√Δ)` and `sinh(√Δ)/√Δ`, continued analytically to Δ < 0.
fn expm_cs(delta_sq: f64) -> (f64, f64) {
    if delta_sq.abs() < EXPM_DELTA_THRESHOLD * EXPM_DELTA_THRESHOLD {
        (1.0 + 0.5 * delta_sq, 1.0 + delta_sq / 6.0)
    } else if delta_sq > 0.0 {
        let d = delta_sq.sqrt();
        (d.cosh(), d.sinh() / d)
    } else {
        let d = (-delta_sq).sqrt();
        (d.cos(), d.sin() / d)
    }
}

/// d/dΔ of `sinh(√Δ)/√Δ`.
fn expm_ds(delta_sq: f64, c: f64, s: f64) -> f64 {
    if delta_sq.abs() < 1e-3 {
        // Σ n Δ^{n-1} / (2n+1)!
        1.0 / 6.0 + delta_sq / 60.0 + delta_sq * delta_sq / 1680.0 + delta_sq.powi(3) / 90720.0
    } else {
        (c - s) / (2.0 * delta_sq)
    }
}

/// Closed-form exponential of a row-major 2×2 matrix `[a, b, c, d]`.
pub(crate) fn expm2_raw(h: &[f64]) -> [f64; 4] {
    let (a, b, c, d) = (h[0], h[1], h[2], h[3]);
    let tau = 0.5 * (a + d);
    let half = 0.5 * (a - d);
    let delta_sq = half * half + b * c;
    let (ch, sh) = expm_cs(delta_sq);
    let et = tau.exp();
    [et * (ch + sh * half), et * sh * b, et * sh * c, et * (ch - sh * half)]
}

/// Adjoint of [`expm2_raw`]: given upstream adjoint `g`, returns ∂L/∂h.
pub(crate) fn expm2_adjoint(h: &[f64], g: &[f64]) -> [f64; 4] {
    let (a, b, c, d) = (h[0], h[1], h[2], h[3]);
    let tau = 0.5 * (a + d);
    let half = 0.5 * (a - d);
    let delta_sq = half * half + b * c;
    let (ch, sh) = expm_cs(delta_sq);
    let dsh = expm_ds(delta_sq, ch, sh);
    let et = tau.exp();
    let e = expm2_raw(h);
    // K = h - τI
    let k = [half, b, c, -half];
    let g_dot_e: f64 = g.iter().zip(&e).map(|(x, y)| x * y).sum();
    let g_dot_k: f64 = g.iter().zip(&k).map(|(x, y)| x * y).sum();
    let tr_g = g[0] + g[3];
    let diag = 0.5 * (g_dot_e - et * sh * tr_g);
    let coef_k = et * (0.5 * sh * tr_g + dsh * g_dot_k);
    // Kᵀ
    let kt = [k[0], k[2], k[1], k[3]];
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = et * sh * g[i] + coef_k * kt[i];
    }
    out[0] += diag;
    out[3] += diag;
    out
}

/// Matrix exponential of a 2×2 matrix via
/// `exp(h) = e^τ (cosh δ · I + sinh δ / δ · (h − τI))`, τ = tr h / 2,
/// δ² = τ² − det h.
pub fn matrix_exp_2x2(h: &Tensor) -> Result<Tensor> {
    if h.shape() != [2, 2] {
        return Err(shape_err!("matrix_exp_2x2 needs a 2x2 matrix, got {:?}", h.shape()));
    }
    Tensor::new(&[2, 2], expm2_raw(h.data()).to_vec())
}
