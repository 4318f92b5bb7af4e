//! Embedding, a stack of MPO layers, and a classifier or decoder head.

use serde::{Deserialize, Serialize};

use crate::embedding::{decode, decode_on_tape, embed, embed_batch, EmbeddingSequence};
use crate::error::{shape_err, Error, Result};
use crate::mpo::{BoundMpo, MpoConfig, MpoLayer};
use crate::mps::{BoundHead, MpsHead, MpsHeadConfig};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Classifier(MpsHead),
    /// First component of the L1-normalized output at every site.
    Decoder,
}

/// Shapes and flags of a network, without parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub layers: Vec<MpoConfig>,
    /// `None` for a decoder head.
    pub head: Option<MpsHeadConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepTensorNetwork {
    layers: Vec<MpoLayer>,
    head: Head,
}

#[derive(Clone, Debug)]
pub struct BoundNetwork {
    layers: Vec<BoundMpo>,
    head: Option<BoundHead>,
}

impl DeepTensorNetwork {
    pub fn new(layers: Vec<MpoLayer>, head: Head) -> Result<Self> {
        let d = match &head {
            Head::Classifier(h) => Some(h.local_dim()),
            Head::Decoder => None,
        }
        .or_else(|| layers.first().map(|l| l.local_dim()));
        if let Some(d) = d {
            if layers.iter().any(|l| l.local_dim() != d) {
                return Err(shape_err!("all layers and the head must share d = {d}"));
            }
        }
        Ok(Self { layers, head })
    }

    pub fn classifier(layers: Vec<MpoLayer>, head: MpsHead) -> Result<Self> {
        Self::new(layers, Head::Classifier(head))
    }

    pub fn decoder(layers: Vec<MpoLayer>) -> Result<Self> {
        Self::new(layers, Head::Decoder)
    }

    pub fn layers(&self) -> &[MpoLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MpoLayer] {
        &mut self.layers
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn mps_head(&self) -> Option<&MpsHead> {
        match &self.head {
            Head::Classifier(h) => Some(h),
            Head::Decoder => None,
        }
    }

    pub fn local_dim(&self) -> usize {
        match &self.head {
            Head::Classifier(h) => h.local_dim(),
            Head::Decoder => self.layers.first().map_or(2, |l| l.local_dim()),
        }
    }

    /// True when every component accepts inputs of any length.
    pub fn is_uniform(&self) -> bool {
        self.layers.iter().all(|l| l.config().is_uniform()) && self.mps_head().is_none_or(|h| h.config().is_uniform())
    }

    pub fn topology(&self) -> Topology {
        Topology {
            layers: self.layers.iter().map(|l| l.config().clone()).collect(),
            head: self.mps_head().map(|h| h.config().clone()),
        }
    }

    /// Rebuilds a network from tensors in [`DeepTensorNetwork::parameters`] order.
    pub fn from_tensors(topology: &Topology, tensors: Vec<Tensor>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut take = |n: usize| -> Result<Vec<Tensor>> {
            let part: Vec<Tensor> = it.by_ref().take(n).collect();
            if part.len() != n {
                return Err(Error::Format("too few parameter tensors for topology".into()));
            }
            Ok(part)
        };
        let mut layers = Vec::with_capacity(topology.layers.len());
        for config in &topology.layers {
            let n = config.sites.unwrap_or(1) + if config.boundary_rank.is_some() { 2 } else { 1 };
            layers.push(MpoLayer::from_tensors(config.clone(), take(n)?)?);
        }
        let head = match &topology.head {
            None => Head::Decoder,
            Some(config) => {
                let n = config.sites.unwrap_or(1) + 1 + if config.boundary_rank.is_some() { 2 } else { 1 };
                Head::Classifier(MpsHead::from_tensors(config.clone(), take(n)?)?)
            }
        };
        if it.next().is_some() {
            return Err(Error::Format("more parameter tensors than the topology uses".into()));
        }
        Self::new(layers, head)
    }

    /// Named parameters; the position in this list is the tape [`crate::ParamId`].
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.parameters().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        if let Some(h) = self.mps_head() {
            out.extend(h.parameters().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            out.extend(l.parameters_mut());
        }
        if let Head::Classifier(h) = &mut self.head {
            out.extend(h.parameters_mut());
        }
        out
    }

    /// Indices (into [`DeepTensorNetwork::parameters`]) of head tensors.
    pub fn head_parameter_range(&self) -> std::ops::Range<usize> {
        let start: usize = self.layers.iter().map(|l| l.parameters().len()).sum();
        let len = self.mps_head().map_or(0, |h| h.parameters().len());
        start..start + len
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundNetwork> {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .enumerate()
            .map(|(i, (_, t))| tape.param(ParamId(i), t.clone()))
            .collect();
        self.bind_vars(tape, &vars)
    }

    /// Wires already registered parameter variables, in
    /// [`DeepTensorNetwork::parameters`] order.
    pub fn bind_vars(&self, tape: &mut Tape, vars: &[Var]) -> Result<BoundNetwork> {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let n = l.parameters().len();
            let part = vars
                .get(offset..offset + n)
                .ok_or_else(|| shape_err!("too few variables"))?;
            layers.push(l.bind_vars(tape, part)?);
            offset += n;
        }
        let head = match &self.head {
            Head::Classifier(h) => Some(h.bind_vars(tape, &vars[offset.min(vars.len())..])?),
            Head::Decoder => None,
        };
        Ok(BoundNetwork { layers, head })
    }

    /// Runs the MPO stack on per-site `[B, d]` inputs.
    pub fn propagate_on_tape(&self, tape: &mut Tape, bound: &BoundNetwork, sites: &[Var]) -> Result<Vec<Var>> {
        let mut cur = sites.to_vec();
        for (layer, b) in self.layers.iter().zip(&bound.layers) {
            cur = layer.apply(tape, b, &cur)?.outputs;
        }
        Ok(cur)
    }

    /// Logits `[B, K]`.
    pub fn classify_on_tape(&self, tape: &mut Tape, bound: &BoundNetwork, sites: &[Var]) -> Result<Var> {
        let (Head::Classifier(head), Some(bh)) = (&self.head, &bound.head) else {
            return Err(Error::InvalidArgument("network has no classifier head".into()));
        };
        let out = self.propagate_on_tape(tape, bound, sites)?;
        head.apply(tape, bh, &out)
    }

    /// Decoded predictions `[B, N]`.
    pub fn sequence_on_tape(&self, tape: &mut Tape, bound: &BoundNetwork, sites: &[Var]) -> Result<Var> {
        if !matches!(self.head, Head::Decoder) {
            return Err(Error::InvalidArgument("network has no decoder head".into()));
        }
        let out = self.propagate_on_tape(tape, bound, sites)?;
        decode_on_tape(tape, &out)
    }

    pub fn forward_embeddings(&self, emb: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        let mut cur = emb.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward_classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        let Head::Classifier(head) = &self.head else {
            return Err(Error::InvalidArgument("network has no classifier head".into()));
        };
        head.logits(&self.forward_embeddings(&embed(x)?)?)
    }

    pub fn forward_sequence(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !matches!(self.head, Head::Decoder) {
            return Err(Error::InvalidArgument("network has no decoder head".into()));
        }
        decode(&self.forward_embeddings(&embed(x)?)?)
    }

    fn run_batch(&self, rows: &[&[f64]], classify: bool) -> Result<Tensor> {
        let sites = embed_batch(rows)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let vars: Vec<Var> = sites.into_iter().map(|s| tape.constant(s)).collect();
        let out = if classify {
            self.classify_on_tape(&mut tape, &bound, &vars)?
        } else {
            self.sequence_on_tape(&mut tape, &bound, &vars)?
        };
        Ok(tape.value(out).clone())
    }

    /// Logits `[B, K]` for equally long feature rows.
    pub fn forward_classify_batch(&self, rows: &[&[f64]]) -> Result<Tensor> {
        self.run_batch(rows, true)
    }

    /// Decoded predictions `[B, N]` for equally long feature rows.
    pub fn forward_sequence_batch(&self, rows: &[&[f64]]) -> Result<Tensor> {
        self.run_batch(rows, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpo::{Activation, MpoInit};
    use crate::mps::MpsHeadConfig;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    fn head(bd: usize, sites: Option<usize>, seed: u64) -> MpsHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MpsHead::init(MpsHeadConfig::new(bd, 3, sites), 0.3, &mut rng).unwrap()
    }

    #[test]
    fn zero_layers_is_bare_head() {
        let h = head(3, None, 1);
        let net = DeepTensorNetwork::classifier(vec![], h.clone()).unwrap();
        let x = features(7, 2);
        assert_eq!(
            net.forward_classify(&x).unwrap(),
            h.logits(&embed(&x).unwrap()).unwrap()
        );
    }

    #[test]
    fn identity_layers_leave_logits_unchanged() {
        let h = head(3, None, 3);
        let layer = MpoLayer::identity(MpoConfig::uniform(2, Activation::Linear)).unwrap();
        let net = DeepTensorNetwork::classifier(vec![layer.clone(), layer], h.clone()).unwrap();
        let x = features(9, 4);
        let want = h.logits(&embed(&x).unwrap()).unwrap();
        for (a, b) in net.forward_classify(&x).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn one_layer_matches_chained_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = MpoConfig {
            sites: Some(6),
            ..MpoConfig::uniform(2, Activation::Sigmoid)
        };
        let layer = MpoLayer::init(
            config,
            MpoInit {
                identity_scale: 1.0,
                noise_std: 0.5,
            },
            &mut rng,
        )
        .unwrap();
        let h = head(2, Some(6), 6);
        let net = DeepTensorNetwork::classifier(vec![layer.clone()], h.clone()).unwrap();
        let x = features(6, 7);
        let mid = oracle::dense_layer_forward(&layer, &embed(&x).unwrap());
        let want = oracle::dense_mps_logits(&h, &mid);
        for (a, b) in net.forward_classify(&x).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn decoder_round_trip_and_sigmoid_shift() {
        let net = DeepTensorNetwork::decoder(vec![]).unwrap();
        let x = features(6, 8);
        for (a, b) in net.forward_sequence(&x).unwrap().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        let layer = MpoLayer::identity(MpoConfig::uniform(2, Activation::Sigmoid)).unwrap();
        let net = DeepTensorNetwork::decoder(vec![layer]).unwrap();
        let y = net.forward_sequence(&[0.0, 0.25, 1.0]).unwrap();
        let s = crate::tape::sigmoid;
        for (yi, xi) in y.iter().zip([0.0, 0.25, 1.0]) {
            let want = s(xi) / (s(xi) + s(1.0 - xi));
            assert!((yi - want).abs() < 1e-14);
        }
        assert!((y[0] - 0.5 / (0.5 + s(1.0))).abs() < 1e-14);
        assert!((y[1] - 0.25).abs() > 0.01);
    }

    #[test]
    fn depth_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = MpoInit {
            identity_scale: 1.0,
            noise_std: 0.3,
        };
        let l1 = MpoLayer::init(MpoConfig::uniform(3, Activation::Sigmoid), init, &mut rng).unwrap();
        let l2 = MpoLayer::init(MpoConfig::uniform(2, Activation::MatrixExp), init, &mut rng).unwrap();
        let both = DeepTensorNetwork::decoder(vec![l1.clone(), l2.clone()]).unwrap();
        let emb = embed(&features(8, 10)).unwrap();
        let chained = l2.forward(&l1.forward(&emb).unwrap()).unwrap();
        assert_eq!(both.forward_embeddings(&emb).unwrap(), chained);
    }

    #[test]
    fn uniform_network_accepts_any_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = MpoLayer::init(MpoConfig::uniform(2, Activation::Sigmoid), MpoInit::default(), &mut rng).unwrap();
        let net = DeepTensorNetwork::decoder(vec![layer]).unwrap();
        assert!(net.is_uniform());
        for n in 2..40 {
            assert_eq!(net.forward_sequence(&features(n, n as u64)).unwrap().len(), n);
        }
    }

    #[test]
    fn parameter_counts_by_hand() {
        let layer = MpoLayer::identity(MpoConfig::uniform(2, Activation::Sigmoid)).unwrap();
        let net = DeepTensorNetwork::decoder(vec![layer.clone()]).unwrap();
        // D²d² + D² = 16 + 4
        assert_eq!(net.num_parameters(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = MpsHead::init(MpsHeadConfig::new(3, 10, None), 0.0, &mut rng).unwrap();
        let big = MpoLayer::identity(MpoConfig::uniform(4, Activation::Linear)).unwrap();
        let net = DeepTensorNetwork::classifier(vec![layer, big], h).unwrap();
        // 20 + (64 + 16) + (d D² + K D² + D² = 18 + 90 + 9)
        assert_eq!(net.num_parameters(), 20 + 80 + 117);
        assert_eq!(net.head_parameter_range(), 4..7);
    }

    #[test]
    fn topology_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = MpoLayer::init(
            MpoConfig {
                boundary_rank: Some(1),
                sites: Some(5),
                ..MpoConfig::uniform(3, Activation::Linear)
            },
            MpoInit::default(),
            &mut rng,
        )
        .unwrap();
        let net = DeepTensorNetwork::classifier(vec![layer], head(2, Some(5), 13)).unwrap();
        let tensors: Vec<Tensor> = net.parameters().into_iter().map(|(_, t)| t.clone()).collect();
        let back = DeepTensorNetwork::from_tensors(&net.topology(), tensors.clone()).unwrap();
        assert_eq!(back, net);
        assert!(DeepTensorNetwork::from_tensors(&net.topology(), tensors[1..].to_vec()).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let layer = MpoLayer::init(MpoConfig::uniform(2, Activation::Sigmoid), MpoInit::default(), &mut rng).unwrap();
        let net = DeepTensorNetwork::decoder(vec![layer]).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|i| features(6, 20 + i)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let batch = net.forward_sequence_batch(&refs).unwrap();
        for (b, r) in rows.iter().enumerate() {
            let single = net.forward_sequence(r).unwrap();
            for j in 0..6 {
                assert!((batch.get(&[b, j]) - single[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mismatched_local_dims_rejected() {
        let a = MpoLayer::identity(MpoConfig::uniform(2, Activation::Linear)).unwrap();
        let b = MpoLayer::identity(MpoConfig {
            local_dim: 3,
            ..MpoConfig::uniform(2, Activation::Linear)
        })
        .unwrap();
        assert!(DeepTensorNetwork::decoder(vec![a, b]).is_err());
    }
}
