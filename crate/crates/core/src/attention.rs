//! Linear dot-attention written as an MPO layer: a permutation MPO
//! sandwiched between query and key projections.
//!
//! Bond index 0 is the idle state; a pending swap of physical values
//! `(t, s)` (0-based) is carried on bond index `d·t + s + 1`.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::mpo::{Activation, MpoBoundary, MpoConfig, MpoLayer};
use crate::tensor::Tensor;

/// Query/key projections together with the permutation MPO.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMpo {
    pub wq: Tensor,
    pub wk: Tensor,
    pub mtilde: Tensor,
    pub gtilde: Tensor,
}

impl AttentionMpo {
    pub fn new(wq: Tensor, wk: Tensor) -> Result<Self> {
        let d = square_dim(&wq, "W^Q")?;
        if square_dim(&wk, "W^K")? != d {
            return Err(Error::Shape("W^Q and W^K differ in size".into()));
        }
        let (mtilde, gtilde) = build_permutation_mpo(d)?;
        Ok(Self { wq, wk, mtilde, gtilde })
    }

    pub fn layer(&self) -> Result<MpoLayer> {
        assemble_attention_layer(&self.wq, &self.wk, &self.mtilde, &self.gtilde)
    }
}

fn square_dim(m: &Tensor, what: &str) -> Result<usize> {
    match m.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::Shape(format!("{what} must be square, got {s:?}"))),
    }
}

/// Permutation MPO core `[D, D, d, d]` with `D = d² + 1` and its boundary,
/// entry for entry as published: open a swap from the idle state, carry it
/// unchanged through diagonal physical values, close it with the transposed
/// physical pair. The only boundary entry is the idle-idle one.
pub fn build_permutation_mpo(d: usize) -> Result<(Tensor, Tensor)> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "local dimension must be at least 2, got {d}"
        )));
    }
    let bd = d * d + 1;
    let mut m = Tensor::zeros(&[bd, bd, d, d]);
    for t in 0..d {
        for s in 0..d {
            let carry = d * t + s + 1;
            m.set(&[0, carry, t, s], 1.0);
            m.set(&[carry, 0, s, t], 1.0);
        }
    }
    for a in 1..bd {
        for s in 0..d {
            m.set(&[a, a, s, s], 1.0);
        }
    }
    let mut g = Tensor::zeros(&[bd, bd]);
    g.set(&[0, 0], 1.0);
    Ok((m, g))
}

/// A `D = d² + 2` variant whose trace is exactly `Σ_{i<j} P_ij` for every
/// chain length: separate "before" (0) and "after" (`d² + 1`) idle states
/// with identity transitions, so that untouched sites are allowed and the
/// boundary admits only paths that opened and closed exactly one swap.
pub fn build_corrected_permutation_mpo(d: usize) -> Result<(Tensor, Tensor)> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "local dimension must be at least 2, got {d}"
        )));
    }
    let after = d * d + 1;
    let bd = d * d + 2;
    let mut m = Tensor::zeros(&[bd, bd, d, d]);
    for t in 0..d {
        for s in 0..d {
            let carry = d * t + s + 1;
            m.set(&[0, carry, t, s], 1.0);
            m.set(&[carry, after, s, t], 1.0);
        }
    }
    for a in 0..bd {
        for s in 0..d {
            m.set(&[a, a, s, s], 1.0);
        }
    }
    // Tr(X G) = Σ X[a, b] G[b, a]: select paths from "before" to "after".
    let mut g = Tensor::zeros(&[bd, bd]);
    g.set(&[after, 0], 1.0);
    Ok((m, g))
}

fn digits(mut idx: usize, d: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for k in (0..n).rev() {
        out[k] = idx % d;
        idx /= d;
    }
    out
}

/// Dense `[d^N, d^N]` operator `O[t, s] = Tr(M̃^{t₁s₁} ··· M̃^{t_N s_N} G̃)`
/// with big-endian multi-indices.
pub fn permutation_operator(mtilde: &Tensor, gtilde: &Tensor, n: usize) -> Result<Tensor> {
    let &[bd, bd2, d, d2] = mtilde.shape() else {
        return Err(Error::Shape(format!("core must be rank 4, got {:?}", mtilde.shape())));
    };
    if bd != bd2 || d != d2 || gtilde.shape() != [bd, bd] || n == 0 {
        return Err(Error::Shape("inconsistent permutation MPO".into()));
    }
    let dim = d.pow(n as u32);
    let boundary: Vec<(usize, usize, f64)> = (0..bd)
        .flat_map(|b| (0..bd).map(move |a| (a, b)))
        .filter_map(|(a, b)| {
            let v = gtilde.get(&[b, a]);
            (v != 0.0).then_some((a, b, v))
        })
        .collect();
    let mut out = Tensor::zeros(&[dim, dim]);
    for ti in 0..dim {
        let t = digits(ti, d, n);
        for si in 0..dim {
            let s = digits(si, d, n);
            let mut total = 0.0;
            for &(a, b, gv) in &boundary {
                let mut v = vec![0.0; bd];
                v[a] = 1.0;
                for k in 0..n {
                    let mut next = vec![0.0; bd];
                    for (x, &vx) in v.iter().enumerate().filter(|(_, vx)| **vx != 0.0) {
                        for (y, nx) in next.iter_mut().enumerate() {
                            *nx += vx * mtilde.get(&[x, y, t[k], s[k]]);
                        }
                    }
                    v = next;
                }
                total += gv * v[b];
            }
            out.set(&[ti, si], total);
        }
    }
    Ok(out)
}

/// `Σ_{i<j} P_ij` on `(C^d)^{⊗N}` by direct enumeration of transpositions.
pub fn transposition_sum(d: usize, n: usize) -> Tensor {
    let dim = d.pow(n as u32);
    let mut out = Tensor::zeros(&[dim, dim]);
    for si in 0..dim {
        let s = digits(si, d, n);
        for i in 0..n {
            for j in i + 1..n {
                let mut t = s.clone();
                t.swap(i, j);
                let ti = t.iter().fold(0, |acc, &x| acc * d + x);
                out.set(&[ti, si], out.get(&[ti, si]) + 1.0);
            }
        }
    }
    out
}

/// `M^{t,s} = Σ W^Q_{t't} M̃^{t's'} W^K_{s's}` as a uniform linear layer
/// without context normalization, residual or output normalization.
pub fn assemble_attention_layer(wq: &Tensor, wk: &Tensor, mtilde: &Tensor, gtilde: &Tensor) -> Result<MpoLayer> {
    let d = square_dim(wq, "W^Q")?;
    let &[bd, _, md, _] = mtilde.shape() else {
        return Err(Error::Shape(format!("core must be rank 4, got {:?}", mtilde.shape())));
    };
    if square_dim(wk, "W^K")? != d || md != d {
        return Err(Error::Shape(format!(
            "projections of size {d} do not match physical dimension {md}"
        )));
    }
    let mut core = Tensor::zeros(&[bd, bd, d, d]);
    for a in 0..bd {
        for b in 0..bd {
            for t in 0..d {
                for s in 0..d {
                    let mut v = 0.0;
                    for tp in 0..d {
                        for sp in 0..d {
                            v += wq.get(&[tp, t]) * mtilde.get(&[a, b, tp, sp]) * wk.get(&[sp, s]);
                        }
                    }
                    core.set(&[a, b, t, s], v);
                }
            }
        }
    }
    let config = MpoConfig {
        local_dim: d,
        normalize_contexts: false,
        ..MpoConfig::uniform(bd, Activation::Linear)
    };
    MpoLayer::new(config, vec![core], MpoBoundary::Dense(gtilde.clone()))
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| m.get(&[i, j]) * v[j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_normalized(emb: &EmbeddingSequence) -> Result<()> {
    for j in 0..emb.len() {
        let n = dot(emb.site(j), emb.site(j)).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "embedding at site {j} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

fn queries_keys(emb: &EmbeddingSequence, wq: &Tensor, wk: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = emb.dim();
    if square_dim(wq, "W^Q")? != d || square_dim(wk, "W^K")? != d {
        return Err(Error::Shape(format!("projections must be {d}x{d}")));
    }
    let q = (0..emb.len()).map(|j| mat_vec(wq, emb.site(j))).collect();
    let k = (0..emb.len()).map(|j| mat_vec(wk, emb.site(j))).collect();
    Ok((q, k))
}

/// `ψ_j = Σ_l (q_j · k_l) q_l` for L2-normalized embeddings.
pub fn linear_attention_reference(emb: &EmbeddingSequence, wq: &Tensor, wk: &Tensor) -> Result<EmbeddingSequence> {
    check_normalized(emb)?;
    let (q, k) = queries_keys(emb, wq, wk)?;
    let d = emb.dim();
    let out: Vec<Vec<f64>> = (0..emb.len())
        .map(|j| {
            let mut psi = vec![0.0; d];
            for l in 0..emb.len() {
                let w = dot(&q[j], &k[l]);
                for (p, x) in psi.iter_mut().zip(&q[l]) {
                    *p += w * x;
                }
            }
            psi
        })
        .collect();
    EmbeddingSequence::from_vectors(&out)
}

/// Deviations (largest per-site Euclidean norm) of the two identities
/// relating the MPO layer output `m_j` to attention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `m_j = c·q_j + Σ_{i≠j} q_i (k_i·q_j)`.
    pub layer_identity: f64,
    /// `m_j + q_j (k_j·q_j) − c·q_j = ψ_j`.
    pub attention_identity: f64,
}

impl EquivalenceReport {
    pub fn max(&self) -> f64 {
        self.layer_identity.max(self.attention_identity)
    }
}

/// Checks the published attention identities against the layer built from
/// [`build_permutation_mpo`].
pub fn verify_equivalence(emb: &EmbeddingSequence, wq: &Tensor, wk: &Tensor) -> Result<EquivalenceReport> {
    let (m, g) = build_permutation_mpo(emb.dim())?;
    verify_equivalence_with(emb, wq, wk, &m, &g)
}

/// As [`verify_equivalence`] with an explicit permutation MPO.
pub fn verify_equivalence_with(
    emb: &EmbeddingSequence,
    wq: &Tensor,
    wk: &Tensor,
    mtilde: &Tensor,
    gtilde: &Tensor,
) -> Result<EquivalenceReport> {
    let reference = linear_attention_reference(emb, wq, wk)?;
    let (q, k) = queries_keys(emb, wq, wk)?;
    let layer = assemble_attention_layer(wq, wk, mtilde, gtilde)?;
    let out = layer.forward(emb)?;
    let n = emb.len();
    let mut report = EquivalenceReport {
        layer_identity: 0.0,
        attention_identity: 0.0,
    };
    for j in 0..n {
        let mut c = 0.0;
        for i in (0..n).filter(|&i| i != j) {
            for l in (0..n).filter(|&l| l != j) {
                c += dot(&q[i], &k[l]) * dot(&k[i], &q[l]);
            }
        }
        let mut expected: Vec<f64> = q[j].iter().map(|x| c * x).collect();
        for i in (0..n).filter(|&i| i != j) {
            let w = dot(&k[i], &q[j]);
            for (e, x) in expected.iter_mut().zip(&q[i]) {
                *e += w * x;
            }
        }
        let m_j = out.site(j);
        let dev_layer = m_j
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let kq = dot(&k[j], &q[j]);
        let dev_attn = m_j
            .iter()
            .zip(&q[j])
            .zip(reference.site(j))
            .map(|((m, qj), r)| (m + qj * kq - c * qj - r).powi(2))
            .sum::<f64>()
            .sqrt();
        report.layer_identity = report.layer_identity.max(dev_layer);
        report.attention_identity = report.attention_identity.max(dev_attn);
    }
    Ok(report)
}

/// Inverse of a small square matrix by Gauss-Jordan elimination with
/// partial pivoting.
fn invert(m: &Tensor) -> Result<Tensor> {
    let n = square_dim(m, "matrix")?;
    let mut a = m.clone();
    let mut inv = Tensor::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a.get(&[x, col]).abs().total_cmp(&a.get(&[y, col]).abs()))
            .expect("non-empty range");
        let p = a.get(&[pivot, col]);
        if p.abs() < 1e-12 {
            return Err(Error::InvalidArgument("W^Q is singular".into()));
        }
        for c in 0..n {
            let (x, y) = (a.get(&[col, c]), a.get(&[pivot, c]));
            a.set(&[pivot, c], x);
            a.set(&[col, c], y / p);
            let (x, y) = (inv.get(&[col, c]), inv.get(&[pivot, c]));
            inv.set(&[pivot, c], x);
            inv.set(&[col, c], y / p);
        }
        for r in (0..n).filter(|&r| r != col) {
            let f = a.get(&[r, col]);
            for c in 0..n {
                a.set(&[r, c], a.get(&[r, c]) - f * a.get(&[col, c]));
                inv.set(&[r, c], inv.get(&[r, c]) - f * inv.get(&[col, c]));
            }
        }
    }
    Ok(inv)
}

/// Turns attention over `v_j = φ(j)`-valued queries into general values:
/// applies `W^V (W^Q)^{-1}` to every site.
pub fn apply_value_transform(psi: &EmbeddingSequence, wv: &Tensor, wq: &Tensor) -> Result<EmbeddingSequence> {
    let d = psi.dim();
    if square_dim(wv, "W^V")? != d || square_dim(wq, "W^Q")? != d {
        return Err(Error::Shape(format!("projections must be {d}x{d}")));
    }
    let t = wv.matmul(&invert(wq)?)?;
    let out: Vec<Vec<f64>> = (0..psi.len()).map(|j| mat_vec(&t, psi.site(j))).collect();
    EmbeddingSequence::from_vectors(&out)
}
