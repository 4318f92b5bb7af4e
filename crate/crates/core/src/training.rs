//! Losses, optimizers, learning-rate scheduling and the training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::embed_batch;
use crate::error::{shape_err, Error, Result};
use crate::gradcheck::{check_scalar, GradCheckReport};
use crate::model::DeepTensorNetwork;
use crate::mps::argmax;
use crate::tape::{log_sum_exp, Gradients, ParamId, Tape, Var};
use crate::tensor::Tensor;

/// `−log softmax(logits)[label] + l2 · Σ ‖p‖²_F`.
pub fn cross_entropy_l2(logits: &[f64], label: usize, params: &[&Tensor], l2: f64) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let penalty: f64 = params.iter().map(|p| p.data().iter().map(|x| x * x).sum::<f64>()).sum();
    Ok(log_sum_exp(logits) - logits[label] + l2 * penalty)
}

/// `Σ_j (pred_j − target_j)²`.
pub fn l2_sequence_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        ));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// Mean cross-entropy of `[B, K]` logits against integer labels.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err!("logits {shape:?} for {} labels", labels.len()));
    }
    let k = shape[1];
    let mut onehot = Tensor::zeros(&[labels.len(), k]);
    for (b, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        onehot.set(&[b, l], 1.0);
    }
    let lsm = tape.log_softmax(logits)?;
    let mask = tape.constant(onehot);
    let picked = tape.mul(lsm, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / labels.len() as f64)
}

/// Mean over the batch of the per-sequence squared error, for `[B, N]` inputs.
pub fn sequence_loss_on_tape(tape: &mut Tape, pred: Var, targets: &Tensor) -> Result<Var> {
    let b = targets.shape()[0];
    let t = tape.constant(targets.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / b as f64)
}

/// `l2 · Σ ‖p‖²` of the given parameter variables.
pub fn l2_penalty_on_tape(tape: &mut Tape, params: &[Var], l2: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = tape.mul(p, p)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let total = acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    tape.scale(total, l2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Adam / AdamW. For `Adam` a nonzero weight decay is added to the gradient
/// (coupled L2); `AdamW` shrinks the parameters directly by `lr · wd`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "lr and weight decay must be non-negative".into(),
            ));
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params[i]` with the gradient stored under `ParamId(i)`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &Gradients) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(shape_err!(
                "optimizer holds {} moment tensors, got {} parameters",
                self.first.len(),
                params.len()
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = grads.get(ParamId(i)) {
                if g.shape() != p.shape() || self.first[i].shape() != p.shape() {
                    return Err(shape_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(ParamId(i)) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let decay = self.kind == OptimizerKind::AdamW && self.weight_decay > 0.0;
            let coupled = if self.kind == OptimizerKind::Adam {
                self.weight_decay
            } else {
                0.0
            };
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + coupled * *x;
                if decay {
                    *x -= self.lr * self.weight_decay * *x;
                }
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `gamma` after `patience` consecutive
/// epochs without a strict decrease of the monitored metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub gamma: f64,
    pub patience: usize,
    best: Option<f64>,
    epochs_since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(gamma: f64, patience: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) || patience == 0 {
            return Err(Error::InvalidArgument("need 0 < gamma < 1 and patience >= 1".into()));
        }
        Ok(Self {
            gamma,
            patience,
            best: None,
            epochs_since_improvement: 0,
        })
    }

    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if metric >= b => {
                self.epochs_since_improvement += 1;
                if self.epochs_since_improvement >= self.patience {
                    self.epochs_since_improvement = 0;
                    return lr * self.gamma;
                }
            }
            _ => {
                self.best = Some(metric);
                self.epochs_since_improvement = 0;
            }
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Scope {
    /// Every trainable tensor.
    All,
    /// Only the MPS head tensors.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Samples per step; 0 means one full-batch step per epoch.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub l2_scope: L2Scope,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub plateau_gamma: f64,
    /// 0 disables the plateau scheduler.
    pub plateau_patience: usize,
    pub folds: usize,
    /// Evaluate the validation set every this many epochs.
    pub eval_every: usize,
    /// For sequence tasks: stop as soon as the validation set is solved.
    pub stop_when_solved: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 20,
            lr: 0.00026,
            l2: 0.0033,
            l2_scope: L2Scope::All,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            plateau_gamma: 0.5,
            plateau_patience: 20,
            folds: 10,
            eval_every: 1,
            stop_when_solved: false,
        }
    }
}

impl TrainConfig {
    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "l2_scope" => {
                self.l2_scope = match value {
                    "all" => L2Scope::All,
                    "head" => L2Scope::Head,
                    _ => return Err(Error::InvalidArgument(format!("bad l2_scope {value:?}"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "plateau_gamma" | "gamma" => self.plateau_gamma = parse(key, value)?,
            "plateau_patience" | "step" => self.plateau_patience = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "stop_when_solved" => self.stop_when_solved = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr >= 0.0) || !(self.l2 >= 0.0) || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "epochs and eval_every must be positive, lr and l2 non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Sequences(Vec<Vec<f64>>),
}

/// Feature rows in `[0, 1]` with class labels or target sequences.
/// Rows may differ in length; batches are split by length internally.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
}

impl Dataset {
    pub fn classification(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(shape_err!("{} inputs but {} labels", inputs.len(), labels.len()));
        }
        Ok(Self {
            inputs,
            targets: Targets::Labels(labels),
        })
    }

    pub fn sequences(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.iter().zip(&targets).any(|(x, y)| x.len() != y.len()) {
            return Err(shape_err!(
                "inputs and target sequences must pair up with equal lengths"
            ));
        }
        Ok(Self {
            inputs,
            targets: Targets::Sequences(targets),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: match &self.targets {
                Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
                Targets::Sequences(s) => Targets::Sequences(idx.iter().map(|&i| s[i].clone()).collect()),
            },
        }
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        let targets = match (&self.targets, &other.targets) {
            (Targets::Labels(a), Targets::Labels(b)) => Targets::Labels([a.clone(), b.clone()].concat()),
            (Targets::Sequences(a), Targets::Sequences(b)) => Targets::Sequences([a.clone(), b.clone()].concat()),
            _ => return Err(Error::InvalidArgument("cannot mix labels and sequences".into())),
        };
        Ok(Self {
            inputs: [self.inputs.clone(), other.inputs.clone()].concat(),
            targets,
        })
    }
}

/// Groups sample indices by input length, keeping their relative order.
fn by_length(data: &Dataset, idx: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        groups.entry(data.inputs[i].len()).or_default().push(i);
    }
    groups
}

/// Mean task loss over `idx` (no regularization) and its gradients.
pub fn batch_loss_and_grads(net: &DeepTensorNetwork, data: &Dataset, idx: &[usize]) -> Result<(f64, Gradients)> {
    let total = idx.len() as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for group in by_length(data, idx).values() {
        let (value, mut g) = group_loss(net, data, group, true)?;
        let w = group.len() as f64 / total;
        loss += w * value;
        g.scale(w);
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}

fn group_loss(net: &DeepTensorNetwork, data: &Dataset, group: &[usize], with_grad: bool) -> Result<(f64, Gradients)> {
    let rows: Vec<&[f64]> = group.iter().map(|&i| data.inputs[i].as_slice()).collect();
    let sites = embed_batch(&rows)?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape)?;
    let vars: Vec<Var> = sites.into_iter().map(|s| tape.constant(s)).collect();
    let loss = match &data.targets {
        Targets::Labels(l) => {
            let logits = net.classify_on_tape(&mut tape, &bound, &vars)?;
            let labels: Vec<usize> = group.iter().map(|&i| l[i]).collect();
            cross_entropy_on_tape(&mut tape, logits, &labels)?
        }
        Targets::Sequences(s) => {
            let pred = net.sequence_on_tape(&mut tape, &bound, &vars)?;
            let n = rows[0].len();
            let flat: Vec<f64> = group.iter().flat_map(|&i| s[i].iter().copied()).collect();
            let targets = Tensor::new(&[group.len(), n], flat)?;
            sequence_loss_on_tape(&mut tape, pred, &targets)?
        }
    };
    let value = tape.value(loss).item();
    let grads = if with_grad {
        tape.backward(loss)?
    } else {
        Gradients::default()
    };
    Ok((value, grads))
}

/// Regularization value and gradients for the configured parameter scope.
pub fn l2_penalty(net: &DeepTensorNetwork, l2: f64, scope: L2Scope) -> Result<(f64, Gradients)> {
    let params = net.parameters();
    let range = match scope {
        L2Scope::All => 0..params.len(),
        L2Scope::Head => net.head_parameter_range(),
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = range.map(|i| tape.param(ParamId(i), params[i].1.clone())).collect();
    let pen = l2_penalty_on_tape(&mut tape, &vars, l2)?;
    Ok((tape.value(pen).item(), tape.backward(pen)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Classification accuracy, or per-cell accuracy for sequences.
    pub accuracy: f64,
    /// Sequences only: every rounded sequence is exactly right.
    pub solved: Option<bool>,
}

/// Rounds a decoded output to a binary state (ties round up).
pub fn round_state(y: f64) -> f64 {
    if y >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Loss (without regularization) and accuracy on `data`.
pub fn evaluate(net: &DeepTensorNetwork, data: &Dataset, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut cells = 0usize;
    let mut solved = true;
    for group in by_length(data, &all).values() {
        let chunk_len = if batch_size == 0 { group.len() } else { batch_size };
        for chunk in group.chunks(chunk_len) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| data.inputs[i].as_slice()).collect();
            match &data.targets {
                Targets::Labels(l) => {
                    let logits = net.forward_classify_batch(&rows)?;
                    let k = logits.shape()[1];
                    for (row, &i) in logits.data().chunks(k).zip(chunk) {
                        loss += log_sum_exp(row) - row[l[i]];
                        correct += usize::from(argmax(row) == l[i]);
                        cells += 1;
                    }
                }
                Targets::Sequences(s) => {
                    let pred = net.forward_sequence_batch(&rows)?;
                    let n = pred.shape()[1];
                    for (row, &i) in pred.data().chunks(n).zip(chunk) {
                        loss += l2_sequence_loss(row, &s[i])?;
                        let ok = row.iter().zip(&s[i]).filter(|(p, t)| round_state(**p) == **t).count();
                        solved &= ok == n;
                        correct += ok;
                        cells += n;
                    }
                }
            }
        }
    }
    Ok(Metrics {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / cells as f64,
        solved: matches!(data.targets, Targets::Sequences(_)).then_some(solved),
    })
}

/// One JSON-lines record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// First epoch (1-based) after which the validation set was solved.
    pub solved_at: Option<usize>,
}

/// Mini-batch training with per-epoch metrics. Deterministic given the seed.
pub fn train(
    net: &mut DeepTensorNetwork,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    mut metrics_out: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(config.optimizer, config.lr, config.weight_decay)?;
    let mut sched = if config.plateau_patience > 0 {
        Some(PlateauScheduler::new(config.plateau_gamma, config.plateau_patience)?)
    } else {
        None
    };
    let mut outcome = TrainOutcome::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let batch = if config.batch_size == 0 {
            order.len()
        } else {
            config.batch_size
        };
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let (mut loss, mut grads) = batch_loss_and_grads(net, train_set, chunk)?;
            if config.l2 > 0.0 {
                let (pen, pg) = l2_penalty(net, config.l2, config.l2_scope)?;
                loss += pen;
                grads.accumulate(&pg);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {bi}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            let mut params = net.parameters_mut();
            opt.step(&mut params, &grads)?;
        }
        let train_loss = epoch_loss / order.len() as f64;

        let mut record = EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            val_accuracy: None,
            lr: opt.lr,
        };
        if let Some(val) = val_set {
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                let m = evaluate(net, val, config.batch_size)?;
                record.val_loss = Some(m.loss);
                record.val_accuracy = Some(m.accuracy);
                if m.solved == Some(true) && outcome.solved_at.is_none() {
                    outcome.solved_at = Some(epoch);
                }
            }
        }
        if let Some(s) = sched.as_mut() {
            opt.lr = s.step(record.val_loss.unwrap_or(train_loss), opt.lr);
        }
        if let Some(w) = metrics_out.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        outcome.history.push(record);
        if config.stop_when_solved && outcome.solved_at.is_some() {
            break;
        }
    }
    Ok(outcome)
}

/// `k` validation folds that partition `0..n` after a seeded shuffle.
/// Returns `(train, validation)` index pairs.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds: Vec<Vec<usize>> = (0..k)
        .map(|f| idx.iter().copied().skip(f).step_by(k).collect())
        .collect();
    Ok((0..k)
        .map(|f| {
            let train = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].iter().copied())
                .collect();
            (train, folds[f].clone())
        })
        .collect())
}

/// Training target of a single gradient-check sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Label(usize),
    Sequence(Vec<f64>),
}

/// Compares tape gradients of the task loss on one sample with finite
/// differences on up to `max_entries` random entries per tensor.
///
/// For labels the differenced function is `w · z(θ)` with `w = ∂CE/∂z` frozen
/// at the current parameters. Its gradient there equals the cross-entropy
/// gradient, but unlike the loss it keeps full relative precision when the
/// logits saturate or collapse towards zero. The cross-entropy backward itself
/// is checked against `softmax − onehot` in this module's tests.
pub fn grad_check<R: Rng + ?Sized>(
    net: &DeepTensorNetwork,
    input: &[f64],
    target: &Target,
    max_entries: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let params: Vec<Tensor> = net.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    let sites = embed_batch(&[input])?;
    let weights = match target {
        Target::Label(l) => {
            let logits = net.forward_classify(input)?;
            if *l >= logits.len() {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {} classes",
                    logits.len()
                )));
            }
            let mut w = logits;
            crate::tape::softmax_in_place(&mut w);
            w[*l] -= 1.0;
            Some(Tensor::new(&[1, w.len()], w)?)
        }
        Target::Sequence(_) => None,
    };
    check_scalar(&params, max_entries, rng, |tape, vars| {
        let bound = net.bind_vars(tape, vars)?;
        let s: Vec<Var> = sites.iter().map(|t| tape.constant(t.clone())).collect();
        match (target, &weights) {
            (Target::Label(_), Some(w)) => {
                let logits = net.classify_on_tape(tape, &bound, &s)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(logits, wv)?;
                tape.sum(prod)
            }
            (Target::Sequence(y), _) => {
                let pred = net.sequence_on_tape(tape, &bound, &s)?;
                let t = Tensor::new(&[1, y.len()], y.clone())?;
                sequence_loss_on_tape(tape, pred, &t)
            }
            (Target::Label(_), None) => unreachable!("weights exist for labels"),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpo::{Activation, MpoConfig, MpoInit, MpoLayer};
    use crate::mps::{MpsHead, MpsHeadConfig};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn small_classifier(act: Activation, seed: u64) -> DeepTensorNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = MpoLayer::init(
            MpoConfig::uniform(2, act),
            MpoInit {
                identity_scale: 1.0,
                noise_std: 0.3,
            },
            &mut rng,
        )
        .unwrap();
        let head = MpsHead::init(MpsHeadConfig::new(3, 3, None), 0.3, &mut rng).unwrap();
        DeepTensorNetwork::classifier(vec![layer], head).unwrap()
    }

    fn toy_classification(n: usize, len: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let label = rng.random_range(0..3usize);
            let x: Vec<f64> = (0..len)
                .map(|j| {
                    let base = if j % 3 == label { 0.9 } else { 0.1 };
                    (base + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0)
                })
                .collect();
            inputs.push(x);
            labels.push(label);
        }
        Dataset::classification(inputs, labels).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let k = 7;
        let l = cross_entropy_l2(&vec![0.3; k], 2, &[], 0.0).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-15);
        let confident = cross_entropy_l2(&[0.0, 60.0], 1, &[], 0.0).unwrap();
        assert!(confident < 1e-25);
        assert!(cross_entropy_l2(&[0.0, 1.0], 2, &[], 0.0).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = Tensor::random_normal(&[3, 2], 1.0, &mut rng);
        // reference: log of explicit probability, penalty by explicit loop
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let mut pen = 0.0;
        for v in p.data() {
            pen += v * v;
        }
        let want = -(logits[3].exp() / z).ln() + 0.01 * pen;
        let got = cross_entropy_l2(&logits, 3, &[&p], 0.01).unwrap();
        assert!((got - want).abs() < 1e-12);
        // the tape version agrees on the data term
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::new(&[1, 5], logits.clone()).unwrap());
        let ce = cross_entropy_on_tape(&mut tape, lv, &[3]).unwrap();
        assert!((tape.value(ce).item() - cross_entropy_l2(&logits, 3, &[], 0.0).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let cases: [(&[f64], usize); 4] = [
            (&[0.3, -1.2, 2.0], 0),
            (&[50.0, 36.5, 76.0], 2),
            (&[50.0, 36.5, 76.0], 1),
            (&[1e-10, -2e-10, 0.0], 1),
        ];
        for (z, l) in cases {
            let mut tape = Tape::new();
            let v = tape.param(ParamId(0), Tensor::new(&[1, z.len()], z.to_vec()).unwrap());
            let ce = cross_entropy_on_tape(&mut tape, v, &[l]).unwrap();
            let g = tape.backward(ce).unwrap();
            let total: f64 = z.iter().map(|x| (x - 76.0).exp()).sum();
            for (c, got) in g.get(ParamId(0)).unwrap().data().iter().enumerate() {
                // p_c − δ_cl; for the label, −Σ_{c≠l} p_c avoids 1 − p cancelling
                let want = if c == l {
                    -z.iter()
                        .enumerate()
                        .filter(|&(i, _)| i != l)
                        .map(|(_, x)| (x - 76.0).exp())
                        .sum::<f64>()
                        / total
                } else {
                    (z[c] - 76.0).exp() / total
                };
                assert!(
                    (got - want).abs() <= 1e-13 * want.abs().max(1e-300) + 1e-300,
                    "{z:?} {l} {c}: {got:e} vs {want:e}"
                );
            }
        }
    }

    #[test]
    fn sequence_loss_examples() {
        assert_eq!(l2_sequence_loss(&[0.1, 0.9], &[0.1, 0.9]).unwrap(), 0.0);
        let t = [0.0, 1.0, 0.5, 0.25];
        let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert!((l2_sequence_loss(&p, &t).unwrap() - 4.0).abs() < 1e-15);
        assert!((l2_sequence_loss(&[0.2, 0.8], &[0.0, 1.0]).unwrap() - 0.08).abs() < 1e-15);
        assert!(l2_sequence_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::vector(&[1.0, -2.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, 0.0).unwrap();
        let mut g = Gradients::default();
        g.insert(ParamId(0), Tensor::zeros(&[2]));
        opt.step(&mut [&mut p], &g).unwrap();
        assert_eq!(p, Tensor::vector(&[1.0, -2.0]));
    }

    #[test]
    fn adam_first_step_by_hand() {
        let (lr, g0, x0) = (0.01, 0.3, 1.5);
        let mut p = Tensor::vector(&[x0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, lr, 0.0).unwrap();
        let mut g = Gradients::default();
        g.insert(ParamId(0), Tensor::vector(&[g0]));
        opt.step(&mut [&mut p], &g).unwrap();
        let m = 0.1 * g0 / (1.0 - 0.9);
        let v = 0.001 * g0 * g0 / (1.0 - 0.999);
        let want = x0 - lr * m / (v.sqrt() + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        // second step by hand
        g.insert(ParamId(0), Tensor::vector(&[-0.2]));
        opt.step(&mut [&mut p], &g).unwrap();
        let m2 = 0.9 * 0.1 * g0 + 0.1 * -0.2;
        let v2 = 0.999 * 0.001 * g0 * g0 + 0.001 * 0.04;
        let want2 = want - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.data()[0] - want2).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_with_zero_gradient() {
        let mut p = Tensor::vector(&[2.0, -4.0]);
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, 0.1, 0.5).unwrap();
        let mut g = Gradients::default();
        g.insert(ParamId(0), Tensor::zeros(&[2]));
        opt.step(&mut [&mut p], &g).unwrap();
        assert_eq!(p, Tensor::vector(&[2.0 * 0.95, -4.0 * 0.95]));
    }

    #[test]
    fn plateau_examples() {
        let mut s = PlateauScheduler::new(0.5, 3).unwrap();
        let mut lr = 1.0;
        for i in 0..20 {
            lr = s.step(10.0 - i as f64, lr);
        }
        assert_eq!(lr, 1.0);

        let mut s = PlateauScheduler::new(0.5, 3).unwrap();
        let mut lr = 1.0;
        for _ in 0..4 {
            lr = s.step(1.0, lr);
        }
        assert_eq!(lr, 0.5);
        for _ in 0..3 {
            lr = s.step(1.0, lr);
        }
        assert_eq!(lr, 0.25);
        assert!(PlateauScheduler::new(1.0, 3).is_err());
        assert!(PlateauScheduler::new(0.5, 0).is_err());
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        c.set("lr", "0.5").unwrap();
        c.set("optimizer", "adam").unwrap();
        c.set("step", "30").unwrap();
        assert_eq!((c.lr, c.optimizer, c.plateau_patience), (0.5, OptimizerKind::Adam, 30));
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("epochs", "x").is_err());
    }

    #[test]
    fn zero_lr_epoch_leaves_params() {
        let mut net = small_classifier(Activation::Linear, 2);
        let before = net.clone();
        let data = toy_classification(12, 6, 3);
        let config = TrainConfig {
            epochs: 1,
            lr: 0.0,
            batch_size: 5,
            ..TrainConfig::default()
        };
        train(&mut net, &data, None, &config, None).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic_and_logs_jsonl() {
        let data = toy_classification(30, 6, 4);
        let config = TrainConfig {
            epochs: 3,
            lr: 0.01,
            batch_size: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut a = small_classifier(Activation::Sigmoid, 5);
        let mut b = a.clone();
        let mut log = Vec::new();
        let ha = train(&mut a, &data, Some(&data), &config, Some(&mut log)).unwrap();
        let hb = train(&mut b, &data, Some(&data), &config, None).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: EpochRecord = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(rec, ha.history[2]);
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy_classification(60, 6, 8);
        let config = TrainConfig {
            epochs: 8,
            lr: 0.02,
            batch_size: 10,
            l2: 0.0,
            ..TrainConfig::default()
        };
        let mut net = small_classifier(Activation::Linear, 9);
        let start = evaluate(&net, &data, 0).unwrap().loss;
        train(&mut net, &data, None, &config, None).unwrap();
        assert!(evaluate(&net, &data, 0).unwrap().loss < start);
    }

    #[test]
    fn mixed_lengths_are_grouped() {
        let mut a = toy_classification(6, 5, 1);
        let b = toy_classification(6, 8, 2);
        a = a.concat(&b).unwrap();
        let net = small_classifier(Activation::Linear, 3);
        let idx: Vec<usize> = (0..12).collect();
        let (loss, _) = batch_loss_and_grads(&net, &a, &idx).unwrap();
        let mut want = 0.0;
        if let Targets::Labels(l) = &a.targets {
            for i in 0..12 {
                want += cross_entropy_l2(&net.forward_classify(&a.inputs[i]).unwrap(), l[i], &[], 0.0).unwrap();
            }
        }
        assert!((loss - want / 12.0).abs() < 1e-12);
    }

    #[test]
    fn l2_gradient_is_twice_l2_times_param() {
        let net = small_classifier(Activation::Linear, 4);
        let (_, g) = l2_penalty(&net, 0.37, L2Scope::Head).unwrap();
        let params = net.parameters();
        let range = net.head_parameter_range();
        assert_eq!(g.len(), range.len());
        for i in range {
            let want = params[i].1.scale(2.0 * 0.37);
            assert_eq!(g.get(ParamId(i)).unwrap(), &want);
        }
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = [0.2, 0.7, 0.4, 0.9, 0.1];
        for (act, tol) in [
            (Activation::Linear, 1e-5),
            (Activation::Sigmoid, 1e-5),
            (Activation::MatrixExp, 1e-4),
        ] {
            let net = small_classifier(act, 6);
            let r = grad_check(&net, &x, &Target::Label(1), Some(6), &mut rng).unwrap();
            assert!(r.max_rel_error < tol, "{act:?}: {}", r.max_rel_error);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn kfold_partitions(n in 10usize..200, k in 2usize..10, seed in 0u64..1000) {
            let folds = kfold_indices(n, k, seed).unwrap();
            let mut seen = vec![0usize; n];
            for (train, val) in &folds {
                prop_assert_eq!(train.len() + val.len(), n);
                for &i in val {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
