//! Product-state embedding of features in `[0, 1]` and the matching decoder.

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `N` local vectors of dimension `d`, stored as an `[N, d]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    vectors: Tensor,
}

impl EmbeddingSequence {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(shape_err!("embedding must be [N, d], got {:?}", vectors.shape()));
        }
        Ok(Self { vectors })
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let d = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != d) {
            return Err(shape_err!("local vectors of different dimension"));
        }
        let data = vectors.iter().flatten().copied().collect();
        Self::new(Tensor::new(&[vectors.len(), d], data)?)
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn site(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[j * d..(j + 1) * d]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.vectors
    }

    /// Every local vector rescaled to unit L2 norm.
    pub fn l2_normalized(&self) -> Result<Self> {
        let d = self.dim();
        let mut t = self.vectors.clone();
        for (j, v) in t.data_mut().chunks_mut(d).enumerate() {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("embedding vector at site {j}")));
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self { vectors: t })
    }
}

/// φ(j) = (x_j, 1 − x_j).
pub fn embed(x: &[f64]) -> Result<EmbeddingSequence> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot embed an empty feature vector".into()));
    }
    let mut data = Vec::with_capacity(2 * x.len());
    for (index, &value) in x.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::FeatureOutOfRange { index, value });
        }
        data.push(value);
        data.push(1.0 - value);
    }
    EmbeddingSequence::new(Tensor::new(&[x.len(), 2], data)?)
}

/// First component of each L1-normalized (absolute-valued) local vector.
pub fn decode(psi: &EmbeddingSequence) -> Result<Vec<f64>> {
    (0..psi.len())
        .map(|j| {
            let v = psi.site(j);
            let l1: f64 = v.iter().map(|x| x.abs()).sum();
            if l1 == 0.0 {
                Err(Error::ZeroNorm(format!("decoder input at site {j}")))
            } else {
                Ok(v[0].abs() / l1)
            }
        })
        .collect()
}

/// Embeds a batch of equally long feature rows as per-site `[B, 2]` tensors.
pub fn embed_batch(rows: &[&[f64]]) -> Result<Vec<Tensor>> {
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(shape_err!("batch rows must be non-empty and equally long"));
    }
    let b = rows.len();
    let mut sites = vec![Vec::with_capacity(2 * b); n];
    for row in rows {
        for (index, (&value, site)) in row.iter().zip(sites.iter_mut()).enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::FeatureOutOfRange { index, value });
            }
            site.push(value);
            site.push(1.0 - value);
        }
    }
    sites.into_iter().map(|data| Tensor::new(&[b, 2], data)).collect()
}

/// Splits an `[N, d]` sequence into per-site `[1, d]` tensors.
pub fn sites_of(emb: &EmbeddingSequence) -> Vec<Tensor> {
    (0..emb.len())
        .map(|j| Tensor::new(&[1, emb.dim()], emb.site(j).to_vec()).expect("site shape"))
        .collect()
}

/// Reassembles per-site `[1, d]` tensors into a sequence.
pub fn sequence_of(sites: &[&Tensor]) -> Result<EmbeddingSequence> {
    let d = sites.first().map(|s| s.numel()).unwrap_or(0);
    let mut data = Vec::with_capacity(sites.len() * d);
    for s in sites {
        if s.numel() != d {
            return Err(shape_err!("site tensors of different size"));
        }
        data.extend_from_slice(s.data());
    }
    EmbeddingSequence::new(Tensor::new(&[sites.len(), d], data)?)
}

/// Tape version of [`decode`]: per-site `[B, d]` inputs to a `[B, N]` output.
pub fn decode_on_tape(tape: &mut Tape, sites: &[Var]) -> Result<Var> {
    let mut outs = Vec::with_capacity(sites.len());
    for &s in sites {
        let shape = tape.value(s).shape().to_vec();
        let (b, d) = (shape[0], shape[1]);
        let a = tape.abs(s)?;
        let l1 = {
            let ones = tape.constant(Tensor::full(&[d], 1.0));
            tape.contract(a, ones, &[(1, 0)])?
        };
        if tape.value(l1).data().contains(&0.0) {
            return Err(Error::ZeroNorm("decoder input".into()));
        }
        let first = tape.slice(a, 1, 0, 1)?;
        let first = tape.reshape(first, &[b])?;
        outs.push(tape.div(first, l1)?);
    }
    tape.stack(&outs, 1)
}
