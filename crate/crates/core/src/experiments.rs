//! Reproduction harness: cellular-automaton bond searches, image depth and
//! robustness sweeps, and the forward-cost benchmark.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ca::{self, CaMetrics, CaTask, Sampling};
use crate::error::{Error, Result};
use crate::io::{resize_crop, Crop, ImageDataset};
use crate::model::DeepTensorNetwork;
use crate::mpo::{Activation, MpoConfig, MpoInit, MpoLayer};
use crate::mps::{MpsHead, MpsHeadConfig};
use crate::training::{self, Dataset, EpochRecord, OptimizerKind, TrainConfig};

/// Everything needed to train one CA model from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaRunConfig {
    pub rule: u8,
    pub steps: usize,
    /// Widths enumerated exhaustively for training and the solved check.
    pub train_widths: Vec<usize>,
    pub bond_dim: usize,
    pub layers: usize,
    pub activation: Activation,
    pub residual: bool,
    pub normalize_output: bool,
    /// Std of the Gaussian noise added to the identity cores.
    pub init_noise: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Solved check interval in epochs.
    pub eval_every: usize,
}

impl Default for CaRunConfig {
    fn default() -> Self {
        Self {
            rule: 30,
            steps: 1,
            train_widths: (5..=10).collect(),
            bond_dim: 2,
            layers: 1,
            activation: Activation::Sigmoid,
            residual: false,
            normalize_output: false,
            init_noise: 1e-2,
            epochs: 2000,
            lr: 0.02,
            eval_every: 50,
        }
    }
}

impl CaRunConfig {
    pub fn layer_config(&self) -> MpoConfig {
        MpoConfig {
            residual: self.residual,
            normalize_output: self.normalize_output,
            ..MpoConfig::uniform(self.bond_dim, self.activation)
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 0,
            epochs: self.epochs,
            lr: self.lr,
            l2: 0.0,
            seed,
            optimizer: OptimizerKind::Adam,
            plateau_patience: 0,
            eval_every: self.eval_every,
            stop_when_solved: true,
            ..TrainConfig::default()
        }
    }

    /// Uniform network of `layers` identical-shape layers, initialized
    /// from `seed`.
    pub fn build_network(&self, seed: u64) -> Result<DeepTensorNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = MpoInit {
            identity_scale: if self.activation == Activation::MatrixExp {
                0.0
            } else {
                1.0
            },
            noise_std: self.init_noise,
        };
        let layers = (0..self.layers)
            .map(|_| MpoLayer::init(self.layer_config(), init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        DeepTensorNetwork::decoder(layers)
    }

    /// Exhaustive training pairs over all training widths.
    pub fn training_pairs(&self) -> Result<Vec<ca::Pair>> {
        let mut pairs = Vec::new();
        for &n in &self.train_widths {
            let task = CaTask::new(u32::from(self.rule), self.steps, n)?;
            pairs.extend(ca::generate_dataset(&task, Sampling::Exhaustive)?);
        }
        Ok(pairs)
    }
}

#[derive(Clone, Debug)]
pub struct CaRun {
    pub seed: u64,
    pub net: DeepTensorNetwork,
    pub solved_at: Option<usize>,
    pub metrics: CaMetrics,
    pub history: Vec<EpochRecord>,
}

pub fn train_ca_seed(config: &CaRunConfig, seed: u64, metrics_out: Option<&mut dyn Write>) -> Result<CaRun> {
    let pairs = config.training_pairs()?;
    let data = ca::to_dataset(&pairs);
    let mut net = config.build_network(seed)?;
    let outcome = training::train(&mut net, &data, Some(&data), &config.train_config(seed), metrics_out)?;
    let metrics = ca::evaluate(&net, &pairs)?;
    Ok(CaRun {
        seed,
        net,
        solved_at: outcome.solved_at,
        metrics,
        history: outcome.history,
    })
}

/// Trains `seeds` restarts, stopping early at the first solve when asked.
pub fn train_ca_seeds(
    config: &CaRunConfig,
    seeds: impl IntoIterator<Item = u64>,
    stop_on_solve: bool,
) -> Result<Vec<CaRun>> {
    let mut runs = Vec::new();
    for seed in seeds {
        let run = train_ca_seed(config, seed, None)?;
        let solved = run.solved_at.is_some();
        runs.push(run);
        if solved && stop_on_solve {
            break;
        }
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondAttempt {
    pub bond_dim: usize,
    pub seed: u64,
    pub solved_at: Option<usize>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinBondResult {
    pub steps: usize,
    pub layers: usize,
    /// `None` when no bond dimension in the range solved the task.
    pub minimal: Option<usize>,
    pub attempts: Vec<BondAttempt>,
}

/// Smallest bond dimension in `bond_dims` (scanned in increasing order)
/// for which one of `seeds` restarts solves the `steps`-step task.
pub fn run_min_bond_search(
    base: &CaRunConfig,
    steps: usize,
    layers: usize,
    bond_dims: impl IntoIterator<Item = usize>,
    seeds: usize,
) -> Result<MinBondResult> {
    if steps == 0 || layers == 0 {
        return Err(Error::InvalidArgument("steps and layers must be positive".into()));
    }
    let mut dims: Vec<usize> = bond_dims.into_iter().collect();
    dims.sort_unstable();
    dims.dedup();
    let mut result = MinBondResult {
        steps,
        layers,
        minimal: None,
        attempts: Vec::new(),
    };
    for bond_dim in dims {
        let config = CaRunConfig {
            steps,
            layers,
            bond_dim,
            ..base.clone()
        };
        for run in train_ca_seeds(&config, 0..seeds as u64, true)? {
            result.attempts.push(BondAttempt {
                bond_dim,
                seed: run.seed,
                solved_at: run.solved_at,
                accuracy: run.metrics.accuracy,
            });
            if run.solved_at.is_some() {
                result.minimal = Some(bond_dim);
            }
        }
        if result.minimal.is_some() {
            break;
        }
    }
    Ok(result)
}

/// One per-seed (or per-fold) result row of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// Row group, e.g. a depth or a bond dimension.
    pub group: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: String,
    pub config: serde_json::Value,
    /// Name of the quantity in [`Outcome::value`].
    pub metric: String,
    pub outcomes: Vec<Outcome>,
    pub summary: Vec<GroupSummary>,
}

/// Mean and sample standard deviation per group, in first-seen order.
pub fn summarize(outcomes: &[Outcome]) -> Vec<GroupSummary> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for o in outcomes {
        match groups.iter_mut().find(|(g, _)| *g == o.group) {
            Some((_, v)) => v.push(o.value),
            None => groups.push((o.group.clone(), vec![o.value])),
        }
    }
    groups
        .into_iter()
        .map(|(group, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            GroupSummary {
                group,
                count: v.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

impl ExperimentReport {
    pub fn new(id: &str, config: &impl Serialize, metric: &str, outcomes: Vec<Outcome>) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            config: serde_json::to_value(config)?,
            metric: metric.to_string(),
            summary: summarize(&outcomes),
            outcomes,
        })
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "group,seed,{}", self.metric)?;
        for o in &self.outcomes {
            writeln!(out, "{},{},{}", o.group, o.seed, o.value)?;
        }
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "# {}\n\n| group | n | mean {} | std |\n|---|---|---|---|\n",
            self.id, self.metric
        );
        for g in &self.summary {
            s += &format!("| {} | {} | {:.4} | {:.4} |\n", g.group, g.count, g.mean, g.std);
        }
        s += &format!(
            "\n```json\n{}\n```\n",
            serde_json::to_string_pretty(&self.config).unwrap_or_default()
        );
        s
    }

    /// Writes `<id>.md` and `<id>.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.md", self.id)), self.to_markdown())?;
        self.write_csv(std::fs::File::create(dir.join(format!("{}.csv", self.id)))?)
    }
}

/// Image classifier settings on top of a [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRunConfig {
    pub mps_bond_dim: usize,
    /// Rank of the factored head boundary; `None` keeps it dense.
    pub head_boundary_rank: Option<usize>,
    pub mpo_bond_dim: usize,
    pub layers: usize,
    pub activation: Activation,
    pub residual: bool,
    pub normalize_output: bool,
    /// Shared cores in every layer and in the head.
    pub uniform: bool,
    pub init_noise: f64,
    pub train: TrainConfig,
}

impl Default for ImageRunConfig {
    fn default() -> Self {
        Self {
            mps_bond_dim: 20,
            head_boundary_rank: None,
            mpo_bond_dim: 10,
            layers: 0,
            activation: Activation::MatrixExp,
            residual: false,
            normalize_output: false,
            uniform: false,
            init_noise: 1e-2,
            train: TrainConfig::default(),
        }
    }
}

impl ImageRunConfig {
    pub fn build_network(&self, sites: usize, num_classes: usize, seed: u64) -> Result<DeepTensorNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let site_count = (!self.uniform).then_some(sites);
        let init = MpoInit {
            identity_scale: if self.activation == Activation::MatrixExp {
                0.0
            } else {
                1.0
            },
            noise_std: self.init_noise,
        };
        let layer_config = MpoConfig {
            residual: self.residual,
            normalize_output: self.normalize_output,
            sites: site_count,
            ..MpoConfig::uniform(self.mpo_bond_dim, self.activation)
        };
        let layers = (0..self.layers)
            .map(|_| MpoLayer::init(layer_config.clone(), init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_config = MpsHeadConfig {
            boundary_rank: self.head_boundary_rank,
            ..MpsHeadConfig::new(self.mps_bond_dim, num_classes, site_count)
        };
        let head = MpsHead::init(head_config, self.init_noise, &mut rng)?;
        DeepTensorNetwork::classifier(layers, head)
    }
}

#[derive(Clone, Debug)]
pub struct ImageRun {
    pub seed: u64,
    pub net: DeepTensorNetwork,
    pub test_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains on `train_set` and reports accuracy on `test_set` after the last
/// epoch. Images of different sizes are allowed when the model is uniform.
pub fn train_image_seed(
    config: &ImageRunConfig,
    train_set: &ImageDataset,
    test_set: &ImageDataset,
    seed: u64,
    metrics_out: Option<&mut dyn Write>,
) -> Result<ImageRun> {
    train_image_on(
        config,
        &train_set.to_dataset(),
        train_set.height * train_set.width,
        test_set,
        seed,
        metrics_out,
    )
}

fn train_image_on(
    config: &ImageRunConfig,
    train_data: &Dataset,
    sites: usize,
    test_set: &ImageDataset,
    seed: u64,
    metrics_out: Option<&mut dyn Write>,
) -> Result<ImageRun> {
    let classes = test_set.num_classes().max(match &train_data.targets {
        crate::training::Targets::Labels(l) => l.iter().max().map_or(0, |m| m + 1),
        crate::training::Targets::Sequences(_) => 0,
    });
    let mut net = config.build_network(sites, classes, seed)?;
    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    // The test set stays out of training so the plateau scheduler only sees training loss.
    let outcome = training::train(&mut net, train_data, None, &train_config, metrics_out)?;
    let test_accuracy = training::evaluate(&net, &test_set.to_dataset(), 256)?.accuracy;
    Ok(ImageRun {
        seed,
        net,
        test_accuracy,
        history: outcome.history,
    })
}

/// Accuracy versus number of MPO layers, `seeds` restarts per depth.
pub fn run_depth_sweep(
    config: &ImageRunConfig,
    depths: &[usize],
    seeds: usize,
    train_set: &ImageDataset,
    test_set: &ImageDataset,
) -> Result<ExperimentReport> {
    let mut outcomes = Vec::new();
    for &depth in depths {
        let c = ImageRunConfig {
            layers: depth,
            ..config.clone()
        };
        for seed in 0..seeds as u64 {
            let run = train_image_seed(&c, train_set, test_set, seed, None)?;
            outcomes.push(Outcome {
                group: format!("depth {depth}"),
                seed,
                value: run.test_accuracy,
            });
        }
    }
    ExperimentReport::new("depth_sweep", config, "accuracy", outcomes)
}

/// Training copies resized to each `(height, width)` in `sizes`.
pub fn resize_augment(data: &ImageDataset, sizes: &[(usize, usize)]) -> Result<Dataset> {
    let mut out: Option<Dataset> = None;
    for &(h, w) in sizes {
        let part = resize_crop(data, h, w, Crop::None)?.to_dataset();
        out = Some(match out {
            None => part,
            Some(d) => d.concat(&part)?,
        });
    }
    out.ok_or_else(|| Error::InvalidArgument("no sizes given".into()))
}

/// Uniform model trained on several input sizes at once.
pub fn train_image_multisize(
    config: &ImageRunConfig,
    train_set: &ImageDataset,
    sizes: &[(usize, usize)],
    test_set: &ImageDataset,
    seed: u64,
) -> Result<ImageRun> {
    if !config.uniform {
        return Err(Error::InvalidArgument(
            "multi-size training needs a uniform model".into(),
        ));
    }
    let data = resize_augment(train_set, sizes)?;
    train_image_on(config, &data, 0, test_set, seed, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub height: usize,
    pub width: usize,
    pub accuracy: f64,
}

/// Test accuracy of a uniform classifier after resizing the test images to
/// every `(height, width)` in `sizes`.
pub fn run_robustness_sweep(
    net: &DeepTensorNetwork,
    test_set: &ImageDataset,
    sizes: &[(usize, usize)],
) -> Result<Vec<RobustnessRow>> {
    if !net.is_uniform() {
        return Err(Error::InvalidArgument("robustness sweeps need a uniform model".into()));
    }
    sizes
        .iter()
        .map(|&(height, width)| {
            let data = if (height, width) == (test_set.height, test_set.width) {
                test_set.clone()
            } else {
                resize_crop(test_set, height, width, Crop::None)?
            };
            let accuracy = training::evaluate(net, &data.to_dataset(), 256)?.accuracy;
            Ok(RobustnessRow {
                height,
                width,
                accuracy,
            })
        })
        .collect()
}

pub fn write_robustness_csv(rows: &[RobustnessRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "height,width,accuracy")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.height, r.width, r.accuracy)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sites: usize,
    pub bond_dim: usize,
    pub rank_g: usize,
    /// Best wall time over the repetitions, in seconds.
    pub seconds: f64,
    /// Predicted multiply-add count.
    pub cost: u64,
}

/// Forward time of one uniform linear layer (rank-`rank_g` boundary) on a
/// batch of `batch` random sequences, for every `(N, D)` combination.
pub fn bench_forward(
    sites: &[usize],
    bond_dims: &[usize],
    rank_g: usize,
    batch: usize,
    reps: usize,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::new();
    for &bond_dim in bond_dims {
        let config = MpoConfig {
            boundary_rank: Some(rank_g),
            ..MpoConfig::uniform(bond_dim, Activation::Linear)
        };
        let layer = MpoLayer::init(config, MpoInit::default(), &mut rng)?;
        for &n in sites {
            let inputs: Vec<crate::tensor::Tensor> = (0..n)
                .map(|_| {
                    let x = crate::tensor::Tensor::random_uniform(&[batch, 1], 0.0, 1.0, &mut rng);
                    let mut t = crate::tensor::Tensor::zeros(&[batch, 2]);
                    for b in 0..batch {
                        t.set(&[b, 0], x.get(&[b, 0]));
                        t.set(&[b, 1], 1.0 - x.get(&[b, 0]));
                    }
                    t
                })
                .collect();
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let start = Instant::now();
                std::hint::black_box(layer.forward_batch(&inputs)?);
                best = best.min(start.elapsed().as_secs_f64());
            }
            rows.push(BenchRow {
                sites: n,
                bond_dim,
                rank_g,
                seconds: best,
                cost: layer.cost_estimate(n, rank_g)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "N,D_MPO,rank_G,seconds,cost")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:e},{}",
            r.sites, r.bond_dim, r.rank_g, r.seconds, r.cost
        )?;
    }
    Ok(())
}

/// Least-squares line `y = a + b x`: returns `(a, b, R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("x values are all equal".into()));
    }
    let b = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((my - b * mx, b, r2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub label: String,
    pub activation: Activation,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Finite-difference checks over every layer flag combination (activation,
/// residual, output and context normalization, shared or per-site cores,
/// dense or factored boundary), each inside a small classifier and a small
/// decoder.
pub fn grad_check_all(
    bond_dim: usize,
    sites: usize,
    seed: u64,
    max_entries: Option<usize>,
) -> Result<Vec<GradCheckRow>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for activation in [Activation::Linear, Activation::Sigmoid, Activation::MatrixExp] {
        for flags in 0..32u32 {
            let bit = |k: u32| flags >> k & 1 == 1;
            let config = MpoConfig {
                residual: bit(0),
                normalize_output: bit(1),
                normalize_contexts: bit(2),
                sites: bit(3).then_some(sites),
                boundary_rank: bit(4).then_some(1),
                ..MpoConfig::uniform(bond_dim, activation)
            };
            let init = MpoInit {
                identity_scale: if activation == Activation::MatrixExp { 0.0 } else { 1.0 },
                noise_std: 0.3,
            };
            let layer = MpoLayer::init(config.clone(), init, &mut rng)?;
            let x: Vec<f64> = (0..sites).map(|_| rng.random_range(0.05..0.95)).collect();
            let head = MpsHead::init(
                MpsHeadConfig {
                    boundary_rank: bit(4).then_some(2),
                    ..MpsHeadConfig::new(3, 3, config.sites)
                },
                0.3,
                &mut rng,
            )?;
            let nets = [
                ("classifier", DeepTensorNetwork::classifier(vec![layer.clone()], head)?),
                ("decoder", DeepTensorNetwork::decoder(vec![layer])?),
            ];
            for (kind, net) in nets {
                let target = match kind {
                    "classifier" => training::Target::Label(rng.random_range(0..3)),
                    _ => training::Target::Sequence((0..sites).map(|_| f64::from(rng.random_range(0..2u8))).collect()),
                };
                let report = training::grad_check(&net, &x, &target, max_entries, &mut rng)?;
                rows.push(GradCheckRow {
                    label: format!(
                        "{kind} {activation:?} residual={} normalize_output={} normalize_contexts={} per_site={} factored={}",
                        bit(0),
                        bit(1),
                        bit(2),
                        bit(3),
                        bit(4)
                    ),
                    activation,
                    max_rel_error: report.max_rel_error,
                    entries_checked: report.entries_checked,
                });
            }
        }
    }
    Ok(rows)
}
