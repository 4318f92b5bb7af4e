//! MPS classification head.
//!
//! `logit_c = Tr(B̃ T(1)···T(k) C^c T(k+1)···T(N))` with `T(j) = Σ_s φ_s A^s(j)`
//! and `k = ⌊N/2⌋`. Evaluation runs a left block over the first `k` sites and
//! a right block over the rest, rescaling each to unit norm and carrying the
//! accumulated log-scale, so long chains neither overflow nor underflow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{sites_of, EmbeddingSequence};
use crate::error::{shape_err, Error, Result};
use crate::mpo::broadcast;
use crate::tape::{softmax_in_place, ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpsHeadConfig {
    pub bond_dim: usize,
    pub local_dim: usize,
    pub num_classes: usize,
    /// Site count for position-dependent cores; `None` means one shared core.
    pub sites: Option<usize>,
    /// Rank of a factored boundary `B̃ = U Vᵀ`; `None` stores B̃ densely.
    /// Rank 1 turns the trace into an open chain of cost `O(N d D²)`.
    pub boundary_rank: Option<usize>,
}

impl MpsHeadConfig {
    pub fn new(bond_dim: usize, num_classes: usize, sites: Option<usize>) -> Self {
        Self {
            bond_dim,
            local_dim: 2,
            num_classes,
            sites,
            boundary_rank: None,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.sites.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadBoundary {
    Dense(Tensor),
    /// `B̃ = u vᵀ` with `u`, `v` of shape `[D, r]`.
    Factored {
        u: Tensor,
        v: Tensor,
    },
}

impl HeadBoundary {
    pub fn matrix(&self) -> Tensor {
        match self {
            Self::Dense(b) => b.clone(),
            Self::Factored { u, v } => u.matmul(&v.t()).expect("factor shapes"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpsHead {
    config: MpsHeadConfig,
    cores: Vec<Tensor>,
    class_tensor: Tensor,
    boundary: HeadBoundary,
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    cores: Vec<Var>,
    class_tensor: Var,
    left_seed: Var,
    right_seed: Var,
}

impl MpsHead {
    pub fn new(
        config: MpsHeadConfig,
        cores: Vec<Tensor>,
        class_tensor: Tensor,
        boundary: HeadBoundary,
    ) -> Result<Self> {
        let (bd, d, k) = (config.bond_dim, config.local_dim, config.num_classes);
        if bd == 0 || d == 0 {
            return Err(Error::InvalidArgument(
                "bond and local dimension must be positive".into(),
            ));
        }
        if k < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least two classes".into()));
        }
        let expected = config.sites.unwrap_or(1);
        if expected == 0 || cores.len() != expected {
            return Err(shape_err!("expected {expected} cores, got {}", cores.len()));
        }
        if cores.iter().any(|c| c.shape() != [d, bd, bd]) {
            return Err(shape_err!("cores must be [{d}, {bd}, {bd}]"));
        }
        if class_tensor.shape() != [k, bd, bd] {
            return Err(shape_err!("class tensor must be [{k}, {bd}, {bd}]"));
        }
        match (&boundary, config.boundary_rank) {
            (HeadBoundary::Dense(b), None) if b.shape() == [bd, bd] => {}
            (HeadBoundary::Factored { u, v }, Some(r))
                if r >= 1 && r <= bd && u.shape() == [bd, r] && v.shape() == [bd, r] => {}
            _ => return Err(shape_err!("boundary does not match bond dimension {bd} / config")),
        }
        Ok(Self {
            config,
            cores,
            class_tensor,
            boundary,
        })
    }

    /// Rebuilds a head from tensors in [`MpsHead::parameters`] order.
    pub fn from_tensors(config: MpsHeadConfig, mut tensors: Vec<Tensor>) -> Result<Self> {
        let n_cores = config.sites.unwrap_or(1);
        let n_boundary = if config.boundary_rank.is_some() { 2 } else { 1 };
        if tensors.len() != n_cores + 1 + n_boundary {
            return Err(shape_err!(
                "expected {} tensors, got {}",
                n_cores + 1 + n_boundary,
                tensors.len()
            ));
        }
        let mut rest = tensors.split_off(n_cores);
        let class_tensor = rest.remove(0);
        let boundary = match <[Tensor; 2]>::try_from(rest) {
            Ok([u, v]) => HeadBoundary::Factored { u, v },
            Err(mut one) => HeadBoundary::Dense(one.pop().expect("one boundary tensor")),
        };
        Self::new(config, tensors, class_tensor, boundary)
    }

    /// Near-identity initialization: every `A^s`, `C^c` and B̃ is `I + N(0, ε²)`.
    /// A factored boundary starts from the first `r` unit vectors plus noise.
    pub fn init<R: Rng + ?Sized>(config: MpsHeadConfig, noise_std: f64, rng: &mut R) -> Result<Self> {
        let (bd, d, k) = (config.bond_dim, config.local_dim, config.num_classes);
        let near_identity = |lead: usize, rng: &mut R| {
            let mut t = Tensor::random_normal(&[lead, bd, bd], noise_std, rng);
            for l in 0..lead {
                for a in 0..bd {
                    let v = t.get(&[l, a, a]);
                    t.set(&[l, a, a], v + 1.0);
                }
            }
            t
        };
        let cores = (0..config.sites.unwrap_or(1)).map(|_| near_identity(d, rng)).collect();
        let class_tensor = near_identity(k, rng);
        let boundary = match config.boundary_rank {
            None => HeadBoundary::Dense(near_identity(1, rng).reshape(&[bd, bd])?),
            Some(r) => {
                let mut factor = || {
                    let mut u = Tensor::random_normal(&[bd, r], noise_std, rng);
                    for i in 0..r.min(bd) {
                        let v = u.get(&[i, i]);
                        u.set(&[i, i], v + 1.0);
                    }
                    u
                };
                let u = factor();
                let v = factor();
                HeadBoundary::Factored { u, v }
            }
        };
        Self::new(config, cores, class_tensor, boundary)
    }

    pub fn config(&self) -> &MpsHeadConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn bond_dim(&self) -> usize {
        self.config.bond_dim
    }

    pub fn local_dim(&self) -> usize {
        self.config.local_dim
    }

    pub fn cores(&self) -> &[Tensor] {
        &self.cores
    }

    pub fn core(&self, j: usize) -> &Tensor {
        if self.config.is_uniform() {
            &self.cores[0]
        } else {
            &self.cores[j]
        }
    }

    pub fn class_tensor(&self) -> &Tensor {
        &self.class_tensor
    }

    pub fn boundary(&self) -> &HeadBoundary {
        &self.boundary
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .cores
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("core{i}"), c))
            .collect();
        out.push(("class".into(), &self.class_tensor));
        match &self.boundary {
            HeadBoundary::Dense(b) => out.push(("boundary".into(), b)),
            HeadBoundary::Factored { u, v } => {
                out.push(("boundary_u".into(), u));
                out.push(("boundary_v".into(), v));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.cores.iter_mut().collect();
        out.push(&mut self.class_tensor);
        match &mut self.boundary {
            HeadBoundary::Dense(b) => out.push(b),
            HeadBoundary::Factored { u, v } => {
                out.push(u);
                out.push(v);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, first_id: usize) -> Result<(BoundHead, usize)> {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .enumerate()
            .map(|(i, (_, t))| tape.param(ParamId(first_id + i), t.clone()))
            .collect();
        let next = first_id + vars.len();
        Ok((self.bind_vars(tape, &vars)?, next))
    }

    /// Wires already registered parameter variables, in [`MpsHead::parameters`] order.
    pub fn bind_vars(&self, tape: &mut Tape, vars: &[Var]) -> Result<BoundHead> {
        let n = self.cores.len();
        if vars.len() < n + 1 {
            return Err(shape_err!("wrong number of parameter variables"));
        }
        let (left_seed, right_seed) = match (&self.boundary, &vars[n + 1..]) {
            (HeadBoundary::Dense(_), &[b]) => (tape.constant(Tensor::eye(self.config.bond_dim)), b),
            (HeadBoundary::Factored { .. }, &[u, v]) => (tape.permute(v, &[1, 0])?, u),
            _ => return Err(shape_err!("wrong number of parameter variables")),
        };
        Ok(BoundHead {
            cores: vars[..n].to_vec(),
            class_tensor: vars[n],
            left_seed,
            right_seed,
        })
    }

    /// Batched logits `[B, K]` for per-site `[B, d]` inputs.
    pub fn apply(&self, tape: &mut Tape, bound: &BoundHead, sites: &[Var]) -> Result<Var> {
        self.apply_inner(tape, bound, sites, true)
    }

    fn apply_inner(&self, tape: &mut Tape, bound: &BoundHead, sites: &[Var], rescale: bool) -> Result<Var> {
        let n = sites.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty input".into()));
        }
        if let Some(s) = self.config.sites {
            if s != n {
                return Err(shape_err!("head has {s} sites, input has {n}"));
            }
        }
        let d = self.config.local_dim;
        let b = {
            let s0 = tape.value(sites[0]).shape();
            if s0.len() != 2 || s0[1] != d {
                return Err(shape_err!("site inputs must be [B, {d}], got {s0:?}"));
            }
            s0[0]
        };
        let core = |j: usize| {
            if self.config.is_uniform() {
                bound.cores[0]
            } else {
                bound.cores[j]
            }
        };
        let k = n / 2;
        let mut log_scale: Option<Var> = None;
        let mut rescale_step = |tape: &mut Tape, x: Var| -> Result<Var> {
            if !rescale {
                return Ok(x);
            }
            let norm = tape.row_norm(x)?;
            if tape.value(norm).data().iter().any(|&v| v == 0.0 || !v.is_finite()) {
                return Err(Error::ZeroNorm("MPS head partial contraction".into()));
            }
            let ln = tape.ln(norm)?;
            log_scale = Some(match log_scale {
                None => ln,
                Some(acc) => tape.add(acc, ln)?,
            });
            tape.row_div(x, norm)
        };

        let mut left = broadcast(tape, bound.left_seed, b)?;
        left = rescale_step(tape, left)?;
        for j in 0..k {
            let t = transfer(tape, sites[j], core(j))?;
            left = tape.batch_contract(left, t, &[(2, 1)])?;
            left = rescale_step(tape, left)?;
        }
        let mut right = broadcast(tape, bound.right_seed, b)?;
        right = rescale_step(tape, right)?;
        for j in (k..n).rev() {
            let t = transfer(tape, sites[j], core(j))?;
            right = tape.batch_contract(t, right, &[(2, 1)])?;
            right = rescale_step(tape, right)?;
        }
        // [B, b, a] against C[c, a, b]
        let rl = tape.batch_contract(right, left, &[(2, 1)])?;
        let raw = tape.contract(rl, bound.class_tensor, &[(1, 2), (2, 1)])?;
        match log_scale {
            None => Ok(raw),
            Some(ls) => {
                let factor = tape.exp(ls)?;
                tape.row_mul(raw, factor)
            }
        }
    }

    fn check_dim(&self, emb: &EmbeddingSequence) -> Result<()> {
        if emb.dim() != self.config.local_dim {
            return Err(shape_err!(
                "embedding dimension {} does not match head dimension {}",
                emb.dim(),
                self.config.local_dim
            ));
        }
        Ok(())
    }

    pub fn logits(&self, emb: &EmbeddingSequence) -> Result<Vec<f64>> {
        self.check_dim(emb)?;
        let sites = sites_of(emb);
        Ok(self.logits_batch(&sites)?.into_data())
    }

    /// Logits without the per-step rescaling; overflows on long chains.
    pub fn logits_naive(&self, emb: &EmbeddingSequence) -> Result<Vec<f64>> {
        self.check_dim(emb)?;
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape, 0)?;
        let vars: Vec<Var> = sites_of(emb).into_iter().map(|t| tape.constant(t)).collect();
        let out = self.apply_inner(&mut tape, &bound, &vars, false)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Batched logits `[B, K]` for per-site `[B, d]` inputs.
    pub fn logits_batch(&self, sites: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape, 0)?;
        let vars: Vec<Var> = sites.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.apply(&mut tape, &bound, &vars)?;
        Ok(tape.value(out).clone())
    }
}

/// `T(j) = Σ_s φ_s A^s`: `[B, d] × [d, D, D] -> [B, D, D]`.
fn transfer(tape: &mut Tape, phi: Var, core: Var) -> Result<Var> {
    tape.contract(phi, core, &[(1, 0)])
}

/// Softmax with max-subtraction.
pub fn class_probabilities(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("no logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

/// Arithmetic mean of member logits.
pub fn ensemble_logits(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(shape_err!("ensemble members have different lengths"));
    }
    let n = members.len() as f64;
    Ok((0..first.len())
        .map(|c| members.iter().map(|m| m[c]).sum::<f64>() / n)
        .collect())
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::embed;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_head(bd: usize, n: usize, k: usize, seed: u64) -> MpsHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MpsHead::init(MpsHeadConfig::new(bd, k, Some(n)), 0.5, &mut rng).unwrap()
    }

    fn features(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn scalar_head_gives_unit_logits() {
        let head = MpsHead::new(
            MpsHeadConfig::new(1, 3, None),
            vec![Tensor::full(&[2, 1, 1], 1.0)],
            Tensor::full(&[3, 1, 1], 1.0),
            HeadBoundary::Dense(Tensor::full(&[1, 1], 1.0)),
        )
        .unwrap();
        let l = head.logits(&embed(&[0.2, 0.9, 0.4]).unwrap()).unwrap();
        for v in &l {
            assert!((v - 1.0).abs() < 1e-15);
        }
        for p in class_probabilities(&l).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_head_gives_bond_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = MpsHead::init(MpsHeadConfig::new(4, 10, None), 0.0, &mut rng).unwrap();
        for seed in 0..3 {
            let l = head.logits(&embed(&features(7, seed)).unwrap()).unwrap();
            for v in l {
                assert!((v - 4.0).abs() < 1e-12);
            }
        }
        // rank-1 open boundary: logits are one
        let head = MpsHead::init(
            MpsHeadConfig {
                boundary_rank: Some(1),
                ..MpsHeadConfig::new(4, 10, None)
            },
            0.0,
            &mut rng,
        )
        .unwrap();
        for v in head.logits(&embed(&features(9, 1)).unwrap()).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_oracle() {
        for seed in 0..10 {
            let n = 2 + seed as usize % 7;
            let bd = 1 + seed as usize % 4;
            let head = random_head(bd, n, 3, seed);
            let emb = embed(&features(n, 50 + seed)).unwrap();
            let got = head.logits(&emb).unwrap();
            let want = oracle::dense_mps_logits(&head, &emb);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9 * (1.0 + w.abs()), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn factored_boundary_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = MpsHeadConfig {
            boundary_rank: Some(2),
            ..MpsHeadConfig::new(3, 4, Some(6))
        };
        let head = MpsHead::init(config, 0.5, &mut rng).unwrap();
        let emb = embed(&features(6, 12)).unwrap();
        let got = head.logits(&emb).unwrap();
        let want = oracle::dense_mps_logits(&head, &emb);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn rescaling_matches_naive_evaluation() {
        let head = random_head(3, 20, 4, 3);
        let emb = embed(&features(20, 4)).unwrap();
        let a = head.logits(&emb).unwrap();
        let b = head.logits_naive(&emb).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn long_chain_with_overflowing_blocks() {
        // left half multiplies by 2, right half by 1/2: the left block
        // overflows on its own but the full product is the identity
        let k = 1100;
        let diag = |a: f64, b: f64| {
            let mut t = Tensor::zeros(&[2, 2, 2]);
            for s in 0..2 {
                t.set(&[s, 0, 0], a);
                t.set(&[s, 1, 1], b);
            }
            t
        };
        let mut cores = vec![diag(2.0, 2.0); k];
        cores.extend(vec![diag(0.5, 0.5); k]);
        let head = MpsHead::new(
            MpsHeadConfig::new(2, 2, Some(2 * k)),
            cores,
            Tensor::stack(&[&Tensor::eye(2), &Tensor::eye(2).scale(3.0)], 0).unwrap(),
            HeadBoundary::Dense(Tensor::eye(2)),
        )
        .unwrap();
        let emb = embed(&features(2 * k, 6)).unwrap();
        let l = head.logits(&emb).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-9 && (l[1] - 6.0).abs() < 1e-9, "{l:?}");
        let naive = head.logits_naive(&emb).unwrap();
        assert!(
            naive.iter().all(|v| !v.is_finite() || (v - 2.0).abs() > 1.0),
            "{naive:?}"
        );
    }

    #[test]
    fn uniform_head_accepts_any_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = MpsHead::init(MpsHeadConfig::new(3, 2, None), 0.1, &mut rng).unwrap();
        for n in 1..30 {
            assert_eq!(head.logits(&embed(&features(n, n as u64)).unwrap()).unwrap().len(), 2);
        }
        let fixed = random_head(2, 5, 2, 1);
        assert!(fixed.logits(&embed(&features(4, 0)).unwrap()).is_err());
    }

    #[test]
    fn batched_matches_single() {
        let head = random_head(3, 5, 3, 9);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| features(5, 100 + i)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let batch = head
            .logits_batch(&crate::embedding::embed_batch(&refs).unwrap())
            .unwrap();
        for (b, row) in rows.iter().enumerate() {
            let single = head.logits(&embed(row).unwrap()).unwrap();
            for c in 0..3 {
                assert!((batch.get(&[b, c]) - single[c]).abs() < 1e-13 * (1.0 + single[c].abs()));
            }
        }
    }

    #[test]
    fn probabilities() {
        let p = class_probabilities(&[0.0, 800.0]).unwrap();
        assert!(p[0] < 1e-300 && (p[1] - 1.0).abs() < 1e-15);
        let p = class_probabilities(&[1.0, 2.0, 3.0]).unwrap();
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1f64, 2.0, 3.0].iter().enumerate() {
            assert!((p[i] - x.exp() / z).abs() < 1e-15);
        }
        assert!(class_probabilities(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn ensembles() {
        let v = vec![0.5, -1.0, 2.0];
        assert_eq!(ensemble_logits(std::slice::from_ref(&v)).unwrap(), v);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(ensemble_logits(&[v.clone(), neg]).unwrap(), vec![0.0; 3]);
        let w = vec![0.1, 0.0, 0.9];
        assert_eq!(argmax(&ensemble_logits(&[v, w]).unwrap()), 2);
        assert!(ensemble_logits(&[]).is_err());
        assert!(ensemble_logits(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let config = MpsHeadConfig::new(2, 1, None);
        assert!(MpsHead::new(
            config,
            vec![Tensor::zeros(&[2, 2, 2])],
            Tensor::zeros(&[1, 2, 2]),
            HeadBoundary::Dense(Tensor::eye(2))
        )
        .is_err());
        let config = MpsHeadConfig::new(2, 2, None);
        assert!(MpsHead::new(
            config,
            vec![Tensor::zeros(&[2, 3, 3])],
            Tensor::zeros(&[2, 2, 2]),
            HeadBoundary::Dense(Tensor::eye(2))
        )
        .is_err());
    }
}
