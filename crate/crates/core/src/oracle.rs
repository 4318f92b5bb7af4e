//! Brute-force reference evaluations.
//!
//! These enumerate every physical index configuration of the full network
//! instead of using context recursions, so they are exponential in `N` and
//! meant only for cross-checking the fast paths on small inputs.

use crate::embedding::EmbeddingSequence;
use crate::mpo::{Activation, MpoBoundary, MpoLayer};
use crate::mps::MpsHead;
use crate::tape::sigmoid;
use crate::tensor::Tensor;

/// Calls `f` with every multi-index in `[0, base)^len`.
fn for_each_index(len: usize, base: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; len];
    loop {
        f(&idx);
        let mut k = len;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < base {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// `Tr(X_1 ··· X_n G)` by explicit row-major products.
fn trace_of_chain(mats: &[Vec<f64>], dim: usize, g: &Tensor) -> f64 {
    let mut acc = g.data().to_vec();
    for m in mats.iter().rev() {
        acc = mat_mul(m, &acc, dim);
    }
    (0..dim).map(|i| acc[i * dim + i]).sum()
}

/// `M^{s,t}` slice of a `[D, D, d, d]` core as a row-major `D×D` matrix.
fn mpo_slice(core: &Tensor, s: usize, t: usize) -> Vec<f64> {
    let dd = core.shape()[0];
    let mut out = vec![0.0; dd * dd];
    for a in 0..dd {
        for b in 0..dd {
            out[a * dd + b] = core.get(&[a, b, s, t]);
        }
    }
    out
}

/// Local weight `H(j)` of the unnormalized layer: the full MPO
/// `Tr(M^{s_1 t_1} ··· M^{s_N t_N} G)` with every leg except site `j`'s
/// contracted against `φ`.
pub fn dense_local_weight(cores: &[Tensor], g: &Tensor, emb: &EmbeddingSequence, j: usize) -> Tensor {
    let n = cores.len();
    let d = emb.dim();
    let dd = g.shape()[0];
    let mut h = Tensor::zeros(&[d, d]);
    for_each_index(2 * n, d, |st| {
        let mut weight = 1.0;
        for i in 0..n {
            if i != j {
                weight *= emb.site(i)[st[2 * i]] * emb.site(i)[st[2 * i + 1]];
            }
        }
        if weight == 0.0 {
            return;
        }
        let mats: Vec<Vec<f64>> = (0..n).map(|i| mpo_slice(&cores[i], st[2 * i], st[2 * i + 1])).collect();
        let v = trace_of_chain(&mats, dd, g);
        let (s, t) = (st[2 * j], st[2 * j + 1]);
        h.set(&[s, t], h.get(&[s, t]) + weight * v);
    });
    h
}

/// Row-major product of explicit matrices.
fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

fn theta_explicit(core: &Tensor, phi: &[f64]) -> Vec<f64> {
    let dd = core.shape()[0];
    let d = phi.len();
    let mut out = vec![0.0; dd * dd];
    for s in 0..d {
        for t in 0..d {
            let m = mpo_slice(core, s, t);
            for (o, v) in out.iter_mut().zip(m) {
                *o += phi[s] * v * phi[t];
            }
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Matrix exponential by scaling and squaring of a 30-term Taylor series.
pub fn taylor_expm(h: &[f64], n: usize) -> Vec<f64> {
    let nrm = norm(h);
    let squarings = if nrm > 0.5 { (nrm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled: Vec<f64> = h.iter().map(|x| x / 2f64.powi(squarings as i32)).collect();
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let mut sum = eye.clone();
    let mut term = eye;
    for k in 1..30 {
        term = mat_mul(&term, &scaled, n).into_iter().map(|x| x / k as f64).collect();
        for (s, t) in sum.iter_mut().zip(&term) {
            *s += t;
        }
    }
    for _ in 0..squarings {
        sum = mat_mul(&sum, &sum, n);
    }
    sum
}

/// Layer output computed site by site from [`dense_local_weight`]. Context
/// normalization divides `H(j)` by the norms of the explicit products
/// `Θ(1)···Θ(j−1)` and `Θ(j+1)···Θ(N) G`. Dense boundaries only.
pub fn dense_layer_forward(layer: &MpoLayer, emb: &EmbeddingSequence) -> EmbeddingSequence {
    let n = emb.len();
    let d = emb.dim();
    let dd = layer.bond_dim();
    let g = match layer.boundary() {
        MpoBoundary::Dense(g) => g.clone(),
        MpoBoundary::Factored { .. } => panic!("dense oracle needs a dense boundary"),
    };
    let cores: Vec<Tensor> = (0..n).map(|j| layer.core(j).clone()).collect();
    let thetas: Vec<Vec<f64>> = (0..n).map(|j| theta_explicit(&cores[j], emb.site(j))).collect();
    let config = layer.config();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut h = dense_local_weight(&cores, &g, emb, j);
        if config.normalize_contexts {
            let mut left = Tensor::eye(dd).into_data();
            for t in &thetas[..j] {
                left = mat_mul(&left, t, dd);
            }
            let mut right = g.data().to_vec();
            for t in thetas[j + 1..].iter().rev() {
                right = mat_mul(t, &right, dd);
            }
            h = h.scale(1.0 / (norm(&left) * norm(&right)));
        }
        let phi = emb.site(j);
        let apply = |m: &[f64]| -> Vec<f64> { (0..d).map(|s| (0..d).map(|t| m[s * d + t] * phi[t]).sum()).collect() };
        let mut psi = match config.activation {
            Activation::Linear => apply(h.data()),
            Activation::Sigmoid => apply(h.data()).into_iter().map(sigmoid).collect(),
            Activation::MatrixExp => apply(&taylor_expm(h.data(), d)),
        };
        if config.residual {
            for (p, f) in psi.iter_mut().zip(phi) {
                *p += f;
            }
        }
        if config.normalize_output {
            let nr = norm(&psi);
            psi.iter_mut().for_each(|p| *p /= nr);
        }
        out.push(psi);
    }
    EmbeddingSequence::from_vectors(&out).expect("consistent output")
}

/// Logits as the explicit sum over all `d^N` basis configurations of the
/// feature-space tensor contracted with `Π φ(j)`.
pub fn dense_mps_logits(head: &MpsHead, emb: &EmbeddingSequence) -> Vec<f64> {
    let n = emb.len();
    let d = emb.dim();
    let dd = head.bond_dim();
    let k = n / 2;
    let b = head.boundary().matrix();
    let slice = |t: &Tensor, s: usize| -> Vec<f64> { (0..dd * dd).map(|i| t.get(&[s, i / dd, i % dd])).collect() };
    let mut logits = vec![0.0; head.num_classes()];
    for_each_index(n, d, |s| {
        let weight: f64 = (0..n).map(|i| emb.site(i)[s[i]]).product();
        if weight == 0.0 {
            return;
        }
        for (c, l) in logits.iter_mut().enumerate() {
            let mut mats: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
            for i in 0..k {
                mats.push(slice(head.core(i), s[i]));
            }
            mats.push(slice(head.class_tensor(), c));
            for i in k..n {
                mats.push(slice(head.core(i), s[i]));
            }
            *l += weight * trace_of_chain(&mats, dd, &b);
        }
    });
    logits
}

/// Elementary CA update by string lookup: the rule's 8-bit binary expansion
/// lists outputs for neighbourhoods `111, 110, ..., 000` in that order.
pub fn ca_step_by_pattern(state: &[u8], rule: u8) -> Vec<u8> {
    let table = format!("{rule:08b}");
    let patterns = ["111", "110", "101", "100", "011", "010", "001", "000"];
    let n = state.len();
    let ch = |b: u8| if b == 1 { '1' } else { '0' };
    (0..n)
        .map(|i| {
            let hood: String = [state[(i + n - 1) % n], state[i], state[(i + 1) % n]]
                .map(ch)
                .iter()
                .collect();
            let pos = patterns.iter().position(|p| *p == hood).expect("binary neighbourhood");
            u8::from(table.as_bytes()[pos] == b'1')
        })
        .collect()
}
