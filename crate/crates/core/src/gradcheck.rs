//! Finite-difference checks of tape gradients.
//!
//! Numerical derivatives use Ridders' extrapolation: central differences at
//! geometrically shrinking steps are combined in a Neville tableau and the
//! entry with the smallest error estimate is kept. A fixed step cannot serve
//! every configuration; unnormalized layers mix large curvature, nearby kinks
//! of `|·|` in the decoder and losses whose gradients sit far below their
//! rounding level.
//!
//! The error reported for one entry is `|analytic − numeric| / max(|analytic|,
//! |numeric|, floor)`, with `floor = 1e-3 · max |numeric|` so that entries far
//! below the gradient's own scale do not dominate through cancellation noise.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Initial finite-difference steps relative to `max(1, |x|)`. The smaller
/// start recovers derivatives next to kinks that the larger one straddles.
pub const FD_STEPS: [f64; 2] = [1e-2, 1e-4];
/// Step shrink factor between tableau columns.
const SHRINK: f64 = 2.0;
/// Maximum number of steps tried.
const TABLEAU: usize = 12;

/// Ridders' derivative of `f` at offset 0, starting from step `h`.
/// Steps whose evaluation is not finite are skipped. Returns the estimate
/// and its error bound.
pub fn ridders(mut f: impl FnMut(f64) -> Result<f64>, mut h: f64) -> Result<(f64, f64)> {
    let mut central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let mut first = central(h)?;
    let mut tries = 0;
    while !first.is_finite() && tries < TABLEAU {
        h /= SHRINK;
        first = central(h)?;
        tries += 1;
    }
    if !first.is_finite() {
        return Err(Error::NonFinite("finite-difference quotient".into()));
    }
    let c2 = SHRINK * SHRINK;
    let mut prev = vec![first];
    let (mut best, mut err) = (first, f64::INFINITY);
    for _ in 1..TABLEAU {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = c2;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        let diag = (row[prev.len()] - prev[prev.len() - 1]).abs();
        prev = row;
        // higher orders have started to amplify rounding noise
        if diag >= 2.0 * err {
            break;
        }
    }
    Ok((best, err))
}

/// Ridders' derivative from each of [`FD_STEPS`] scaled by `scale`, keeping
/// the estimate with the smallest error bound.
pub fn derivative(mut f: impl FnMut(f64) -> Result<f64>, scale: f64) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for step in FD_STEPS {
        if let Ok((d, e)) = ridders(&mut f, step * scale) {
            if best.is_none_or(|(_, be)| e < be) {
                best = Some((d, e));
            }
        }
    }
    best.map(|(d, _)| d)
        .ok_or_else(|| Error::NonFinite("finite-difference quotient".into()))
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Checks the gradient of a scalar-valued `f` with respect to every tensor in
/// `params`. At most `max_entries` randomly chosen entries per tensor are
/// perturbed (`None` checks all of them).
pub fn check_scalar<R: Rng + ?Sized>(
    params: &[Tensor],
    max_entries: Option<usize>,
    rng: &mut R,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |ps: &[Tensor]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };
    let (tape, out) = eval(params)?;
    let grads = tape.backward(out)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let picks: Vec<usize> = match max_entries {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let g = grads
            .get(ParamId(pi))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        for idx in picks {
            let x = p.data()[idx];
            let scale = x.abs().max(1.0);
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[idx] = x + offset;
                let (t, o) = eval(&work)?;
                Ok(t.value(o).item())
            };
            let fd = derivative(&mut at, scale)?;
            work[pi].data_mut()[idx] = x;
            analytic.push(g.data()[idx]);
            numeric.push(fd);
        }
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        entries_checked: analytic.len(),
    })
}

/// Checks a tensor-valued `f` by projecting its output onto a fixed random
/// direction. Returns the maximum relative error over all input entries.
pub fn check_function<R: Rng + ?Sized>(
    inputs: &[Tensor],
    rng: &mut R,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let w = if shape.is_empty() {
        Tensor::scalar(1.0)
    } else {
        Tensor::random_normal(&shape, 1.0, rng)
    };
    let report = check_scalar(inputs, None, rng, |tape, vars| {
        let out = f(tape, vars)?;
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        tape.sum(prod)
    })?;
    Ok(report.max_rel_error)
}
