//! Elementary cellular automata on a periodic lattice and the j-step
//! prediction task built from them.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DeepTensorNetwork;
use crate::training::{round_state, Dataset};

/// Largest width for which exhaustive enumeration is allowed.
pub const MAX_EXHAUSTIVE_WIDTH: usize = 14;

/// Number of random states drawn per width when not enumerating.
pub const DEFAULT_TEST_SAMPLES: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaTask {
    pub rule: u8,
    pub steps: usize,
    pub width: usize,
}

impl CaTask {
    pub fn new(rule: u32, steps: usize, width: usize) -> Result<Self> {
        let rule = u8::try_from(rule).map_err(|_| Error::InvalidArgument(format!("rule {rule} is not in 0..=255")))?;
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if width < 3 {
            return Err(Error::InvalidArgument("width must be at least 3".into()));
        }
        Ok(Self { rule, steps, width })
    }

    pub fn target(&self, state: &[u8]) -> Result<Vec<u8>> {
        let mut s = state.to_vec();
        for _ in 0..self.steps {
            s = ca_step(&s, self.rule)?;
        }
        Ok(s)
    }
}

/// One synchronous update with periodic wraparound.
pub fn ca_step(state: &[u8], rule: u8) -> Result<Vec<u8>> {
    let n = state.len();
    if let Some(i) = state.iter().position(|&v| v > 1) {
        return Err(Error::InvalidArgument(format!(
            "cell {i} holds non-binary value {}",
            state[i]
        )));
    }
    Ok((0..n)
        .map(|i| {
            let l = state[(i + n - 1) % n];
            let c = state[i];
            let r = state[(i + 1) % n];
            (rule >> (4 * l + 2 * c + r)) & 1
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Exhaustive,
    Random { count: usize, seed: u64 },
}

pub type Pair = (Vec<u8>, Vec<u8>);

/// `(input, j-step output)` pairs. Exhaustive inputs are listed in binary
/// counting order with the first cell as the most significant bit.
pub fn generate_dataset(task: &CaTask, sampling: Sampling) -> Result<Vec<Pair>> {
    let n = task.width;
    let inputs: Vec<Vec<u8>> = match sampling {
        Sampling::Exhaustive => {
            if n > MAX_EXHAUSTIVE_WIDTH {
                return Err(Error::InvalidArgument(format!(
                    "exhaustive enumeration needs width <= {MAX_EXHAUSTIVE_WIDTH}, got {n}"
                )));
            }
            (0..1u32 << n)
                .map(|k| (0..n).map(|i| ((k >> (n - 1 - i)) & 1) as u8).collect())
                .collect()
        }
        Sampling::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            (0..count)
                .map(|_| (0..n).map(|_| rng.random_range(0..2u8)).collect())
                .collect()
        }
    };
    inputs
        .into_iter()
        .map(|x| {
            let y = task.target(&x)?;
            Ok((x, y))
        })
        .collect()
}

/// Concatenated pairs for several widths, as a training dataset.
pub fn to_dataset(pairs: &[Pair]) -> Dataset {
    let as_f64 = |v: &[u8]| v.iter().map(|&b| f64::from(b)).collect::<Vec<f64>>();
    Dataset::sequences(
        pairs.iter().map(|(x, _)| as_f64(x)).collect(),
        pairs.iter().map(|(_, y)| as_f64(y)).collect(),
    )
    .expect("pairs have equal lengths")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaMetrics {
    pub accuracy: f64,
    pub solved: bool,
}

/// Scores decoded predictions against the targets: each output is rounded
/// at 0.5 (ties up), accuracy is the fraction of correct cells and `solved`
/// requires every sequence to be exactly right.
pub fn evaluate_predictions(pairs: &[Pair], mut predict: impl FnMut(&[u8]) -> Result<Vec<f64>>) -> Result<CaMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let (mut correct, mut cells, mut solved) = (0usize, 0usize, true);
    for (x, y) in pairs {
        let pred = predict(x)?;
        if pred.len() != y.len() {
            return Err(Error::Shape(format!(
                "prediction of length {} for width {}",
                pred.len(),
                y.len()
            )));
        }
        let ok = pred
            .iter()
            .zip(y)
            .filter(|(p, &t)| round_state(**p) == f64::from(t))
            .count();
        solved &= ok == y.len();
        correct += ok;
        cells += y.len();
    }
    Ok(CaMetrics {
        accuracy: correct as f64 / cells as f64,
        solved,
    })
}

/// Batched network evaluation on pairs of possibly different widths.
pub fn evaluate(net: &DeepTensorNetwork, pairs: &[Pair]) -> Result<CaMetrics> {
    const CHUNK: usize = 512;
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(pairs.len());
    let mut start = 0;
    while start < pairs.len() {
        let width = pairs[start].0.len();
        let mut end = start;
        while end < pairs.len() && end - start < CHUNK && pairs[end].0.len() == width {
            end += 1;
        }
        let rows: Vec<Vec<f64>> = pairs[start..end]
            .iter()
            .map(|(x, _)| x.iter().map(|&b| f64::from(b)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let out = net.forward_sequence_batch(&refs)?;
        preds.extend(out.data().chunks(width).map(<[f64]>::to_vec));
        start = end;
    }
    let mut it = preds.into_iter();
    evaluate_predictions(pairs, |_| Ok(it.next().expect("one prediction per pair")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub accuracy: f64,
    pub solved: bool,
}

/// Accuracy of a uniform network across widths: exhaustive up to
/// `exhaustive_max`, otherwise `samples` random states from a fixed seed.
pub fn generalization_sweep(
    net: &DeepTensorNetwork,
    rule: u8,
    steps: usize,
    widths: impl IntoIterator<Item = usize>,
    exhaustive_max: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if !net.is_uniform() {
        return Err(Error::InvalidArgument(
            "generalization sweeps need a uniform network".into(),
        ));
    }
    widths
        .into_iter()
        .map(|n| {
            let task = CaTask::new(u32::from(rule), steps, n)?;
            let sampling = if n <= exhaustive_max.min(MAX_EXHAUSTIVE_WIDTH) {
                Sampling::Exhaustive
            } else {
                Sampling::Random { count: samples, seed }
            };
            let m = evaluate(net, &generate_dataset(&task, sampling)?)?;
            Ok(SweepRow {
                n,
                accuracy: m.accuracy,
                solved: m.solved,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "N,accuracy,solved")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.n, r.accuracy, r.solved)?;
    }
    Ok(())
}

fn bits(v: &[u8]) -> String {
    v.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

fn parse_bits(s: &str, width: usize, line: usize) -> Result<Vec<u8>> {
    if s.len() != width {
        return Err(Error::Format(format!(
            "line {line}: expected {width} cells, found {}",
            s.len()
        )));
    }
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Format(format!("line {line}: invalid cell {c:?}"))),
        })
        .collect()
}

/// Cache format: one line per pair, `width input output`.
pub fn save_pairs(pairs: &[Pair], mut out: impl Write) -> Result<()> {
    for (x, y) in pairs {
        writeln!(out, "{} {} {}", x.len(), bits(x), bits(y))?;
    }
    Ok(())
}

pub fn load_pairs(input: impl BufRead) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(w), Some(x), Some(y), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("line {}: expected three fields", i + 1)));
        };
        let w: usize = w
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad width {w:?}", i + 1)))?;
        pairs.push((parse_bits(x, w, i + 1)?, parse_bits(y, w, i + 1)?));
    }
    Ok(pairs)
}
