//! The MPO layer: per-site local weight matrices computed from an MPO and the
//! current product-state embedding, applied to every site in parallel.
//!
//! For each site the MPO core is sandwiched between two copies of the local
//! vector to give Θ(j). Left and right context matrices are accumulated from
//! these, and the local weight is `H^{s,t}(j) = Tr(H^L(j) M^{s,t}(j) H^R(j))`.
//! Every H(j) is computed from the layer *input*, so site order is irrelevant.
//!
//! Core tensors are indexed `[a, a', s, t]` (left bond, right bond, output,
//! input). The boundary matrix G may be stored densely or as a factorization
//! `G = U Vᵀ`; with a factored boundary the left recursion tracks `Vᵀ H^L(j)`
//! and the right recursion `H^R(j)` restricted to the columns of `U`, which
//! makes the cost per site `O(d² D² rank G)`.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::embedding::{sequence_of, sites_of, EmbeddingSequence};
use crate::error::{shape_err, Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
    MatrixExp,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "sigmoid" => Ok(Self::Sigmoid),
            "matrix_exp" | "expm" | "exp" => Ok(Self::MatrixExp),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpoConfig {
    pub bond_dim: usize,
    pub local_dim: usize,
    pub activation: Activation,
    pub residual: bool,
    pub normalize_output: bool,
    pub normalize_contexts: bool,
    /// Site count for position-dependent cores; `None` means one shared core.
    pub sites: Option<usize>,
    /// Rank of a factored boundary `G = U Vᵀ`; `None` stores G densely.
    pub boundary_rank: Option<usize>,
}

impl MpoConfig {
    pub fn uniform(bond_dim: usize, activation: Activation) -> Self {
        Self {
            bond_dim,
            local_dim: 2,
            activation,
            residual: false,
            normalize_output: false,
            normalize_contexts: true,
            sites: None,
            boundary_rank: None,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.sites.is_none()
    }
}

/// Initialization `M^{s,t} = identity_scale · δ_{s,t} I_D + N(0, noise_std²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpoInit {
    pub identity_scale: f64,
    pub noise_std: f64,
}

impl Default for MpoInit {
    fn default() -> Self {
        Self {
            identity_scale: 1.0,
            noise_std: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MpoBoundary {
    Dense(Tensor),
    /// `G = u vᵀ` with `u`, `v` of shape `[D, r]`.
    Factored {
        u: Tensor,
        v: Tensor,
    },
}

impl MpoBoundary {
    pub fn matrix(&self) -> Tensor {
        match self {
            Self::Dense(g) => g.clone(),
            Self::Factored { u, v } => u.matmul(&v.t()).expect("factor shapes"),
        }
    }

    pub fn rank_bound(&self) -> usize {
        match self {
            Self::Dense(g) => g.shape()[0],
            Self::Factored { u, .. } => u.shape()[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpoLayer {
    config: MpoConfig,
    cores: Vec<Tensor>,
    boundary: MpoBoundary,
}

/// Tape handles for a bound layer's parameters.
#[derive(Clone, Debug)]
pub struct BoundMpo {
    cores: Vec<Var>,
    left_seed: Var,
    right_seed: Var,
}

/// Intermediate values of one batched layer application.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub thetas: Vec<Var>,
    pub lefts: Vec<Var>,
    pub rights: Vec<Var>,
    pub weights: Vec<Var>,
    pub outputs: Vec<Var>,
}

impl MpoLayer {
    pub fn new(config: MpoConfig, cores: Vec<Tensor>, boundary: MpoBoundary) -> Result<Self> {
        let (bd, d) = (config.bond_dim, config.local_dim);
        if bd == 0 || d == 0 {
            return Err(Error::InvalidArgument(
                "bond and local dimension must be positive".into(),
            ));
        }
        if config.activation == Activation::MatrixExp && d != 2 {
            return Err(Error::InvalidArgument("matrix_exp activation requires d = 2".into()));
        }
        let expected = config.sites.unwrap_or(1);
        if expected == 0 || cores.len() != expected {
            return Err(shape_err!("expected {expected} cores, got {}", cores.len()));
        }
        if cores.iter().any(|c| c.shape() != [bd, bd, d, d]) {
            return Err(shape_err!("cores must be [{bd}, {bd}, {d}, {d}]"));
        }
        match (&boundary, config.boundary_rank) {
            (MpoBoundary::Dense(g), None) if g.shape() == [bd, bd] => {}
            (MpoBoundary::Factored { u, v }, Some(r))
                if r >= 1 && r <= bd && u.shape() == [bd, r] && v.shape() == [bd, r] => {}
            _ => return Err(shape_err!("boundary does not match bond dimension {bd} / config")),
        }
        Ok(Self {
            config,
            cores,
            boundary,
        })
    }

    /// Rebuilds a layer from tensors in [`MpoLayer::parameters`] order.
    pub fn from_tensors(config: MpoConfig, mut tensors: Vec<Tensor>) -> Result<Self> {
        let n_cores = config.sites.unwrap_or(1);
        let n_boundary = if config.boundary_rank.is_some() { 2 } else { 1 };
        if tensors.len() != n_cores + n_boundary {
            return Err(shape_err!(
                "expected {} tensors, got {}",
                n_cores + n_boundary,
                tensors.len()
            ));
        }
        let rest = tensors.split_off(n_cores);
        let boundary = match <[Tensor; 2]>::try_from(rest) {
            Ok([u, v]) => MpoBoundary::Factored { u, v },
            Err(mut one) => MpoBoundary::Dense(one.pop().expect("one boundary tensor")),
        };
        Self::new(config, tensors, boundary)
    }

    pub fn init<R: Rng + ?Sized>(config: MpoConfig, init: MpoInit, rng: &mut R) -> Result<Self> {
        let (bd, d) = (config.bond_dim, config.local_dim);
        let mut ident = Tensor::zeros(&[bd, bd, d, d]);
        for a in 0..bd {
            for s in 0..d {
                ident.set(&[a, a, s, s], init.identity_scale);
            }
        }
        let cores = (0..config.sites.unwrap_or(1))
            .map(|_| {
                ident
                    .add(&Tensor::random_normal(&[bd, bd, d, d], init.noise_std, rng))
                    .expect("same shape")
            })
            .collect();
        let boundary = match config.boundary_rank {
            None => MpoBoundary::Dense(Tensor::eye(bd)),
            Some(r) => {
                let mut u = Tensor::zeros(&[bd, r.max(1)]);
                for i in 0..r.min(bd) {
                    u.set(&[i, i], 1.0);
                }
                MpoBoundary::Factored { u: u.clone(), v: u }
            }
        };
        Self::new(config, cores, boundary)
    }

    /// Layer whose every local weight is the identity (for normalized contexts).
    pub fn identity(config: MpoConfig) -> Result<Self> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        Self::init(
            config,
            MpoInit {
                identity_scale: 1.0,
                noise_std: 0.0,
            },
            &mut rng,
        )
    }

    pub fn config(&self) -> &MpoConfig {
        &self.config
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

    pub fn boundary(&self) -> &MpoBoundary {
        &self.boundary
    }

    pub fn core(&self, j: usize) -> &Tensor {
        if self.config.is_uniform() {
            &self.cores[0]
        } else {
            &self.cores[j]
        }
    }

    pub fn set_flags(&mut self, residual: bool, normalize_output: bool, normalize_contexts: bool) {
        self.config.residual = residual;
        self.config.normalize_output = normalize_output;
        self.config.normalize_contexts = normalize_contexts;
    }

    /// Named parameter tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .cores
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("core{i}"), c))
            .collect();
        match &self.boundary {
            MpoBoundary::Dense(g) => out.push(("boundary".into(), g)),
            MpoBoundary::Factored { u, v } => {
                out.push(("boundary_u".into(), u));
                out.push(("boundary_v".into(), v));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.cores.iter_mut().collect();
        match &mut self.boundary {
            MpoBoundary::Dense(g) => out.push(g),
            MpoBoundary::Factored { u, v } => {
                out.push(u);
                out.push(v);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_sites(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty input".into()));
        }
        match self.config.sites {
            Some(s) if s != n => Err(shape_err!("layer has {s} sites, input has {n}")),
            _ => Ok(()),
        }
    }

    /// Registers the parameters on `tape` with ids `first_id..`.
    pub fn bind(&self, tape: &mut Tape, first_id: usize) -> Result<(BoundMpo, usize)> {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .enumerate()
            .map(|(i, (_, t))| tape.param(ParamId(first_id + i), t.clone()))
            .collect();
        let next = first_id + vars.len();
        Ok((self.bind_vars(tape, &vars)?, next))
    }

    /// Wires already registered parameter variables, in [`MpoLayer::parameters`] order.
    pub fn bind_vars(&self, tape: &mut Tape, vars: &[Var]) -> Result<BoundMpo> {
        let n = self.cores.len();
        if vars.len() < n {
            return Err(shape_err!("wrong number of parameter variables"));
        }
        let (left_seed, right_seed) = match (&self.boundary, &vars[n..]) {
            (MpoBoundary::Dense(_), &[g]) => (tape.constant(Tensor::eye(self.config.bond_dim)), g),
            (MpoBoundary::Factored { .. }, &[u, v]) => (tape.permute(v, &[1, 0])?, u),
            _ => return Err(shape_err!("wrong number of parameter variables")),
        };
        Ok(BoundMpo {
            cores: vars[..n].to_vec(),
            left_seed,
            right_seed,
        })
    }

    /// Batched application to per-site `[B, d]` inputs.
    pub fn apply(&self, tape: &mut Tape, bound: &BoundMpo, sites: &[Var]) -> Result<LayerTrace> {
        let n = sites.len();
        self.check_sites(n)?;
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
        let normalize = self.config.normalize_contexts;

        let thetas = (0..n)
            .map(|j| theta_on_tape(tape, core(j), sites[j]))
            .collect::<Result<Vec<_>>>()?;

        let mut lefts = Vec::with_capacity(n);
        let mut h = broadcast(tape, bound.left_seed, b)?;
        if normalize {
            h = normalize_rows(tape, h, "left context")?;
        }
        lefts.push(h);
        for j in 1..n {
            let mut h = tape.batch_contract(lefts[j - 1], thetas[j - 1], &[(2, 1)])?;
            if normalize {
                h = normalize_rows(tape, h, "left context")?;
            }
            lefts.push(h);
        }

        let mut rights = vec![None; n];
        let mut h = broadcast(tape, bound.right_seed, b)?;
        if normalize {
            h = normalize_rows(tape, h, "right context")?;
        }
        rights[n - 1] = Some(h);
        for j in (0..n - 1).rev() {
            let prev = rights[j + 1].expect("filled");
            let mut h = tape.batch_contract(thetas[j + 1], prev, &[(2, 1)])?;
            if normalize {
                h = normalize_rows(tape, h, "right context")?;
            }
            rights[j] = Some(h);
        }
        let rights: Vec<Var> = rights.into_iter().map(|r| r.expect("filled")).collect();

        let mut weights = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        for j in 0..n {
            let hw = local_weight_on_tape(tape, lefts[j], core(j), rights[j])?;
            weights.push(hw);
            let out = self.activate(tape, hw, sites[j])?;
            outputs.push(out);
        }
        Ok(LayerTrace {
            thetas,
            lefts,
            rights,
            weights,
            outputs,
        })
    }

    fn activate(&self, tape: &mut Tape, hw: Var, phi: Var) -> Result<Var> {
        let mut psi = match self.config.activation {
            Activation::Linear => tape.batch_contract(hw, phi, &[(2, 1)])?,
            Activation::Sigmoid => {
                let lin = tape.batch_contract(hw, phi, &[(2, 1)])?;
                tape.sigmoid(lin)?
            }
            Activation::MatrixExp => {
                let e = tape.expm2(hw)?;
                tape.batch_contract(e, phi, &[(2, 1)])?
            }
        };
        if self.config.residual {
            psi = tape.add(phi, psi)?;
        }
        if self.config.normalize_output {
            psi = normalize_rows(tape, psi, "layer output")?;
        }
        Ok(psi)
    }

    fn run_constant(&self, emb: &EmbeddingSequence) -> Result<(Tape, LayerTrace)> {
        if emb.dim() != self.config.local_dim {
            return Err(shape_err!(
                "embedding dimension {} does not match layer dimension {}",
                emb.dim(),
                self.config.local_dim
            ));
        }
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape, 0)?;
        let sites: Vec<Var> = sites_of(emb).into_iter().map(|t| tape.constant(t)).collect();
        let trace = self.apply(&mut tape, &bound, &sites)?;
        Ok((tape, trace))
    }

    fn unbatch(tape: &Tape, vars: &[Var]) -> Result<Vec<Tensor>> {
        vars.iter()
            .map(|&v| {
                let t = tape.value(v);
                t.reshape(&t.shape()[1..])
            })
            .collect()
    }

    /// H^L(j) for every site (normalized if the layer normalizes contexts).
    pub fn left_contexts(&self, emb: &EmbeddingSequence) -> Result<Vec<Tensor>> {
        let (tape, trace) = self.run_constant(emb)?;
        Self::unbatch(&tape, &trace.lefts)
    }

    /// H^R(j) for every site (normalized if the layer normalizes contexts).
    pub fn right_contexts(&self, emb: &EmbeddingSequence) -> Result<Vec<Tensor>> {
        let (tape, trace) = self.run_constant(emb)?;
        Self::unbatch(&tape, &trace.rights)
    }

    /// The local weight matrices H(j).
    pub fn local_weights(&self, emb: &EmbeddingSequence) -> Result<Vec<Tensor>> {
        let (tape, trace) = self.run_constant(emb)?;
        Self::unbatch(&tape, &trace.weights)
    }

    pub fn forward(&self, emb: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        let (tape, trace) = self.run_constant(emb)?;
        let outs: Vec<&Tensor> = trace.outputs.iter().map(|&v| tape.value(v)).collect();
        sequence_of(&outs)
    }

    /// Forward pass over a batch given as per-site `[B, d]` tensors.
    pub fn forward_batch(&self, sites: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape, 0)?;
        let vars: Vec<Var> = sites.iter().map(|t| tape.constant(t.clone())).collect();
        let trace = self.apply(&mut tape, &bound, &vars)?;
        Ok(trace.outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Dominant operation count `N d² D² rank G` of the final contractions.
    pub fn cost_estimate(&self, n_sites: usize, rank_g: usize) -> Result<u64> {
        cost_estimate(self.config.local_dim, self.config.bond_dim, n_sites, rank_g)
    }
}

pub fn cost_estimate(d: usize, bond_dim: usize, n_sites: usize, rank_g: usize) -> Result<u64> {
    if rank_g == 0 || rank_g > bond_dim {
        return Err(Error::InvalidArgument(format!(
            "rank of G must be in 1..={bond_dim}, got {rank_g}"
        )));
    }
    Ok((n_sites * d * d * bond_dim * bond_dim * rank_g) as u64)
}

/// `[..] -> [B, ..]` by outer product with a ones vector.
pub(crate) fn broadcast(tape: &mut Tape, x: Var, b: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::full(&[b], 1.0));
    tape.contract(ones, x, &[])
}

/// Divides each batch row by its Frobenius norm, failing on a zero row.
pub(crate) fn normalize_rows(tape: &mut Tape, x: Var, what: &str) -> Result<Var> {
    let n = tape.row_norm(x)?;
    if tape.value(n).data().iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::ZeroNorm(format!("{what} has zero or non-finite norm")));
    }
    tape.row_div(x, n)
}

/// Θ_{a,a'} = Σ_{s,t} φ_s M^{s,t}_{a,a'} φ_t for `[B, d]` inputs: `[B, D, D]`.
pub(crate) fn theta_on_tape(tape: &mut Tape, core: Var, phi: Var) -> Result<Var> {
    // [B, s] x [a, a', s, t] -> [B, a, a', t]
    let half = tape.contract(phi, core, &[(1, 2)])?;
    tape.batch_contract(half, phi, &[(3, 1)])
}

/// `H^{s,t} = Tr(L M^{s,t} R)` for batched `L: [B, r, D]`, `R: [B, D, r]`.
pub(crate) fn local_weight_on_tape(tape: &mut Tape, left: Var, core: Var, right: Var) -> Result<Var> {
    // K_{c,b} = Σ_r R_{c,r} L_{r,b}
    let k = tape.batch_contract(right, left, &[(2, 1)])?;
    tape.contract(k, core, &[(1, 1), (2, 0)])
}

/// Θ for a single core and local vector.
pub fn theta(core: &Tensor, phi: &[f64]) -> Result<Tensor> {
    let s = core.shape();
    if s.len() != 4 || s[2] != phi.len() || s[3] != phi.len() || s[0] != s[1] {
        return Err(shape_err!("core {s:?} with local vector of length {}", phi.len()));
    }
    let mut tape = Tape::new();
    let c = tape.constant(core.clone());
    let p = tape.constant(Tensor::new(&[1, phi.len()], phi.to_vec())?);
    let t = theta_on_tape(&mut tape, c, p)?;
    tape.value(t).reshape(&[s[0], s[1]])
}

/// `H^{s,t} = Tr(hl M^{s,t} hr)` for a single site.
pub fn local_weight(hl: &Tensor, core: &Tensor, hr: &Tensor) -> Result<Tensor> {
    let s = core.shape();
    if s.len() != 4 || hl.rank() != 2 || hr.rank() != 2 {
        return Err(shape_err!("local_weight needs matrices and a rank-4 core"));
    }
    if hl.shape()[1] != s[0] || hr.shape()[0] != s[1] || hl.shape()[0] != hr.shape()[1] {
        return Err(shape_err!(
            "contexts {:?}, {:?} do not fit core {s:?}",
            hl.shape(),
            hr.shape()
        ));
    }
    let mut tape = Tape::new();
    let l = tape.constant(hl.reshape(&[1, hl.shape()[0], hl.shape()[1]])?);
    let r = tape.constant(hr.reshape(&[1, hr.shape()[0], hr.shape()[1]])?);
    let c = tape.constant(core.clone());
    let h = local_weight_on_tape(&mut tape, l, c, r)?;
    tape.value(h).reshape(&[s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::embed;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_core(bd: usize, d: usize) -> Tensor {
        let mut m = Tensor::zeros(&[bd, bd, d, d]);
        for a in 0..bd {
            for s in 0..d {
                m.set(&[a, a, s, s], 1.0);
            }
        }
        m
    }

    fn random_layer(bd: usize, n: usize, act: Activation, seed: u64) -> MpoLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = MpoConfig {
            sites: Some(n),
            ..MpoConfig::uniform(bd, act)
        };
        let mut layer = MpoLayer::init(
            config,
            MpoInit {
                identity_scale: 0.0,
                noise_std: 1.0,
            },
            &mut rng,
        )
        .unwrap();
        layer.boundary = MpoBoundary::Dense(Tensor::random_normal(&[bd, bd], 1.0, &mut rng));
        layer
    }

    fn random_features(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn theta_of_identity_core() {
        let m = identity_core(3, 2);
        assert_eq!(theta(&m, &[1.0, 0.0]).unwrap(), Tensor::eye(3));
        let t = theta(&m, &[0.6, 0.3]).unwrap();
        assert!(t.max_abs_diff(&Tensor::eye(3).scale(0.45)) < 1e-15);
    }

    #[test]
    fn theta_matches_dense_einsum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Tensor::random_normal(&[3, 3, 2, 2], 1.0, &mut rng);
        let phi = [0.3, -1.2];
        let got = theta(&m, &phi).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut want = 0.0;
                for s in 0..2 {
                    for t in 0..2 {
                        want += phi[s] * m.get(&[a, b, s, t]) * phi[t];
                    }
                }
                assert!((got.get(&[a, b]) - want).abs() < 1e-12);
            }
        }
        assert!(theta(&m, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn context_boundaries_and_recursion() {
        let mut layer = random_layer(3, 3, Activation::Linear, 1);
        layer.config.normalize_contexts = false;
        let emb = embed(&random_features(3, 2)).unwrap();
        let lefts = layer.left_contexts(&emb).unwrap();
        let rights = layer.right_contexts(&emb).unwrap();
        let th: Vec<Tensor> = (0..3).map(|j| theta(layer.core(j), emb.site(j)).unwrap()).collect();
        let g = layer.boundary.matrix();
        assert_eq!(lefts[0], Tensor::eye(3));
        assert_eq!(rights[2], g);
        let l3 = th[0].matmul(&th[1]).unwrap();
        assert!(lefts[2].max_abs_diff(&l3) < 1e-12);
        let r1 = th[1].matmul(&th[2]).unwrap().matmul(&g).unwrap();
        assert!(rights[0].max_abs_diff(&r1) < 1e-12);
        // H^R(N) H^L(1) = G
        assert!(rights[2].matmul(&lefts[0]).unwrap().max_abs_diff(&g) < 1e-15);
    }

    #[test]
    fn normalized_contexts_are_unit_and_proportional() {
        let layer = random_layer(3, 4, Activation::Linear, 3);
        let mut raw = layer.clone();
        raw.config.normalize_contexts = false;
        let emb = embed(&random_features(4, 4)).unwrap();
        for (n, r) in layer
            .left_contexts(&emb)
            .unwrap()
            .iter()
            .zip(raw.left_contexts(&emb).unwrap())
        {
            assert!((crate::frobenius_norm(n) - 1.0).abs() < 1e-12);
            let scaled = r.scale(1.0 / crate::frobenius_norm(&r));
            assert!(n.max_abs_diff(&scaled) < 1e-12);
        }
    }

    #[test]
    fn identity_layer_contexts() {
        let layer = MpoLayer::identity(MpoConfig::uniform(4, Activation::Linear)).unwrap();
        let emb = embed(&[0.2, 0.9, 0.5]).unwrap();
        let want = Tensor::eye(4).scale(0.5);
        for h in layer.left_contexts(&emb).unwrap() {
            assert!(h.max_abs_diff(&want) < 1e-15);
        }
        for h in layer.right_contexts(&emb).unwrap() {
            assert!(h.max_abs_diff(&want) < 1e-15);
        }
        for w in layer.local_weights(&emb).unwrap() {
            assert!(w.max_abs_diff(&Tensor::eye(2)) < 1e-14);
        }
    }

    #[test]
    fn local_weight_identity_case() {
        let hl = Tensor::eye(3).scale(1.0 / 3f64.sqrt());
        let h = local_weight(&hl, &identity_core(3, 2), &hl).unwrap();
        assert!(h.max_abs_diff(&Tensor::eye(2)) < 1e-15);
        assert!(local_weight(&Tensor::eye(2), &identity_core(3, 2), &hl).is_err());
    }

    #[test]
    fn local_weights_match_dense_network() {
        for seed in 0..5 {
            let n = 3 + (seed as usize % 3);
            let mut layer = random_layer(2, n, Activation::Linear, seed);
            layer.config.normalize_contexts = false;
            let emb = embed(&random_features(n, 100 + seed)).unwrap();
            let got = layer.local_weights(&emb).unwrap();
            let cores: Vec<Tensor> = (0..n).map(|j| layer.core(j).clone()).collect();
            for j in 0..n {
                let want = oracle::dense_local_weight(&cores, &layer.boundary.matrix(), &emb, j);
                assert!(got[j].max_abs_diff(&want) < 1e-12 * (1.0 + crate::frobenius_norm(&want)));
            }
        }
    }

    #[test]
    fn forward_identity_cases() {
        let emb = embed(&[0.1, 0.7, 0.4, 1.0]).unwrap();
        let lin = MpoLayer::identity(MpoConfig::uniform(3, Activation::Linear)).unwrap();
        assert!(lin.forward(&emb).unwrap().as_tensor().max_abs_diff(emb.as_tensor()) < 1e-14);
        let ex = MpoLayer::identity(MpoConfig::uniform(3, Activation::MatrixExp)).unwrap();
        let want = emb.as_tensor().scale(std::f64::consts::E);
        assert!(ex.forward(&emb).unwrap().as_tensor().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let n = 4;
        for act in [Activation::Linear, Activation::Sigmoid, Activation::MatrixExp] {
            let layer = random_layer(3, n, act, 21);
            let emb = embed(&random_features(n, 22)).unwrap();
            let got = layer.forward(&emb).unwrap();
            let want = oracle::dense_layer_forward(&layer, &emb);
            assert!(got.as_tensor().max_abs_diff(want.as_tensor()) < 1e-10, "{act:?}");
        }
    }

    #[test]
    fn residual_and_output_normalization() {
        let mut layer = MpoLayer::identity(MpoConfig::uniform(2, Activation::Linear)).unwrap();
        layer.set_flags(true, true, true);
        let emb = embed(&[0.3, 0.6]).unwrap();
        let out = layer.forward(&emb).unwrap();
        // φ + φ normalized
        let want = emb.l2_normalized().unwrap();
        assert!(out.as_tensor().max_abs_diff(want.as_tensor()) < 1e-15);
    }

    #[test]
    fn zero_output_is_an_error_under_normalization() {
        let mut layer = MpoLayer::identity(MpoConfig::uniform(2, Activation::Linear)).unwrap();
        layer.cores[0] = Tensor::zeros(&[2, 2, 2, 2]);
        layer.config.normalize_contexts = false;
        layer.config.normalize_output = true;
        let emb = embed(&[0.3, 0.6]).unwrap();
        assert!(matches!(layer.forward(&emb), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn zero_context_is_an_error() {
        let mut layer = MpoLayer::identity(MpoConfig::uniform(2, Activation::Linear)).unwrap();
        layer.cores[0] = Tensor::zeros(&[2, 2, 2, 2]);
        let emb = embed(&[0.3, 0.6, 0.1]).unwrap();
        assert!(matches!(layer.forward(&emb), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn wrong_site_count_and_dimension() {
        let layer = random_layer(2, 3, Activation::Linear, 5);
        assert!(layer.forward(&embed(&[0.1, 0.2]).unwrap()).is_err());
        let uni = MpoLayer::identity(MpoConfig::uniform(2, Activation::Linear)).unwrap();
        let emb3 = EmbeddingSequence::from_vectors(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(uni.forward(&emb3).is_err());
    }

    #[test]
    fn matrix_exp_requires_d2() {
        let config = MpoConfig {
            local_dim: 3,
            ..MpoConfig::uniform(2, Activation::MatrixExp)
        };
        assert!(MpoLayer::identity(config).is_err());
    }

    #[test]
    fn site_order_does_not_matter() {
        // all H(j) come from the input, so a reversed chain with reversed,
        // transposed cores gives the reversed output (unnormalized, since the
        // normalized contexts split the boundary differently)
        let mut layer = random_layer(3, 5, Activation::Sigmoid, 8);
        layer.config.normalize_contexts = false;
        let x = random_features(5, 9);
        let out = layer.forward(&embed(&x).unwrap()).unwrap();
        let rev_cores: Vec<Tensor> = (0..5)
            .rev()
            .map(|j| layer.core(j).permute(&[1, 0, 2, 3]).unwrap())
            .collect();
        let rev = MpoLayer::new(
            layer.config.clone(),
            rev_cores,
            MpoBoundary::Dense(layer.boundary.matrix().t()),
        )
        .unwrap();
        let xr: Vec<f64> = x.iter().rev().copied().collect();
        let out_r = rev.forward(&embed(&xr).unwrap()).unwrap();
        for j in 0..5 {
            for s in 0..2 {
                assert!((out.site(j)[s] - out_r.site(4 - j)[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_consistency_with_full_network_scalar() {
        for n in 2..=6 {
            let mut layer = random_layer(3, n, Activation::Linear, 30 + n as u64);
            layer.config.normalize_contexts = false;
            let emb = embed(&random_features(n, 40 + n as u64)).unwrap();
            let lefts = layer.left_contexts(&emb).unwrap();
            let rights = layer.right_contexts(&emb).unwrap();
            let th: Vec<Tensor> = (0..n).map(|j| theta(layer.core(j), emb.site(j)).unwrap()).collect();
            let mut full = layer.boundary.matrix();
            for t in &th {
                full = full.matmul(t).unwrap();
            }
            let total: f64 = (0..3).map(|i| full.get(&[i, i])).sum();
            for j in 0..n {
                let m = lefts[j].matmul(&th[j]).unwrap().matmul(&rights[j]).unwrap();
                let tr: f64 = (0..3).map(|i| m.get(&[i, i])).sum();
                assert!((tr - total).abs() < 1e-10 * (1.0 + total.abs()));
            }
        }
    }

    #[test]
    fn unnormalized_weights_scale_with_embedding() {
        let n = 4;
        let mut layer = random_layer(2, n, Activation::Linear, 50);
        layer.config.normalize_contexts = false;
        let emb = embed(&random_features(n, 51)).unwrap();
        let alpha = 1.7;
        let scaled = EmbeddingSequence::new(emb.as_tensor().scale(alpha)).unwrap();
        let a = layer.local_weights(&emb).unwrap();
        let b = layer.local_weights(&scaled).unwrap();
        let f = alpha.powi(2 * (n as i32 - 1));
        for (x, y) in a.iter().zip(&b) {
            assert!(y.max_abs_diff(&x.scale(f)) < 1e-10 * (1.0 + crate::frobenius_norm(y)));
        }
    }

    #[test]
    fn normalized_weights_ignore_positive_rescaling_elsewhere() {
        let n = 5;
        let layer = random_layer(3, n, Activation::Linear, 60);
        let x = random_features(n, 61);
        let emb = embed(&x).unwrap();
        let mut t = emb.as_tensor().clone();
        let scales = [2.0, 0.5, 1.0, 3.0, 0.25];
        for j in 0..n {
            for s in 0..2 {
                let v = t.get(&[j, s]);
                t.set(&[j, s], v * scales[j]);
            }
        }
        let scaled = EmbeddingSequence::new(t).unwrap();
        let a = layer.local_weights(&emb).unwrap();
        let b = layer.local_weights(&scaled).unwrap();
        // site 2 is unscaled: its weight is unchanged
        assert!(a[2].max_abs_diff(&b[2]) < 1e-12);
    }

    #[test]
    fn factored_boundary_matches_dense_for_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let n = 5;
        let dense = random_layer(3, n, Activation::Linear, 71);
        let mut raw = dense.clone();
        raw.config.normalize_contexts = false;
        // G = U Vᵀ with V = I
        let g = dense.boundary.matrix();
        let fact = MpoLayer::new(
            MpoConfig {
                boundary_rank: Some(3),
                normalize_contexts: false,
                ..dense.config.clone()
            },
            dense.cores.clone(),
            MpoBoundary::Factored {
                u: g.clone(),
                v: Tensor::eye(3),
            },
        )
        .unwrap();
        let emb = embed(&random_features(n, 72)).unwrap();
        let a = raw.local_weights(&emb).unwrap();
        let b = fact.local_weights(&emb).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-12 * (1.0 + crate::frobenius_norm(x)));
        }
        // rank-1 factor agrees with the dense rank-1 boundary
        let u = Tensor::random_normal(&[3, 1], 1.0, &mut rng);
        let v = Tensor::random_normal(&[3, 1], 1.0, &mut rng);
        let low = MpoLayer::new(
            MpoConfig {
                boundary_rank: Some(1),
                normalize_contexts: false,
                ..dense.config.clone()
            },
            dense.cores.clone(),
            MpoBoundary::Factored {
                u: u.clone(),
                v: v.clone(),
            },
        )
        .unwrap();
        let mut dense_low = raw.clone();
        dense_low.boundary = MpoBoundary::Dense(u.matmul(&v.t()).unwrap());
        let a = dense_low.local_weights(&emb).unwrap();
        let b = low.local_weights(&emb).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-12 * (1.0 + crate::frobenius_norm(x)));
        }
    }

    #[test]
    fn cost_estimate_scaling() {
        let c = cost_estimate(2, 4, 10, 4).unwrap();
        assert_eq!(cost_estimate(2, 4, 20, 4).unwrap(), 2 * c);
        assert_eq!(cost_estimate(2, 8, 10, 4).unwrap(), 4 * c);
        assert_eq!(cost_estimate(2, 4, 10, 1).unwrap() * 4, c);
        assert!(cost_estimate(2, 4, 10, 5).is_err());
        assert!(cost_estimate(2, 4, 10, 0).is_err());
    }
}
