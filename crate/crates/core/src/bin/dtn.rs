use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deeptn::attention::{self, build_corrected_permutation_mpo};
use deeptn::ca;
use deeptn::embedding::EmbeddingSequence;
use deeptn::experiments::{self, CaRunConfig, ImageRunConfig};
use deeptn::io::{self, Checkpoint, Crop, ImageDataset};
use deeptn::mpo::Activation;
use deeptn::mps::{argmax, ensemble_logits};
use deeptn::tensor::Tensor;
use deeptn::training::{kfold_indices, TrainConfig};

#[derive(Parser)]
#[command(name = "dtn", about = "Deep tensor networks: training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train uniform decoders on the j-step cellular automaton task.
    TrainCa(TrainCaArgs),
    /// Accuracy of a CA checkpoint across input widths.
    EvalCa(EvalCaArgs),
    /// Train MPS / deep tensor network image classifiers.
    TrainImage(TrainImageArgs),
    /// Evaluate one checkpoint or an ensemble on images.
    EvalImage(EvalImageArgs),
    /// Check the attention-as-MPO identities.
    VerifyAttention(VerifyAttentionArgs),
    /// Finite-difference gradient checks over all layer configurations.
    GradCheck(GradCheckArgs),
    /// Forward timing versus sequence length and bond dimension.
    Bench(BenchArgs),
}

/// Inclusive integer range: `a..b`, `a-b`, a single value, or `a,b,c`.
fn parse_range(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.contains(',') {
        return s.split(',').map(|p| Ok(p.trim().parse()?)).collect();
    }
    let pair = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .or_else(|| s.split_once('-'));
    match pair {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
            if a > b {
                bail!("empty range {s}");
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.parse()?]),
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    s.parse().map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Args)]
struct TrainCaArgs {
    #[arg(long, default_value_t = 30)]
    rule: u8,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Single training width (overrides --width-range).
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value = "5..10")]
    width_range: String,
    #[arg(long, default_value_t = 2)]
    d_mpo: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value = "sigmoid")]
    activation: String,
    #[arg(long)]
    residual: bool,
    /// L2-normalize every layer output.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    init_noise: f64,
    /// Keep training the remaining seeds after one solves.
    #[arg(long)]
    all_seeds: bool,
    #[arg(long, default_value = "runs/ca")]
    out: PathBuf,
}

fn train_ca(a: TrainCaArgs) -> Result<()> {
    let config = CaRunConfig {
        rule: a.rule,
        steps: a.steps,
        train_widths: match a.width {
            Some(w) => vec![w],
            None => parse_range(&a.width_range)?,
        },
        bond_dim: a.d_mpo,
        layers: a.layers,
        activation: parse_activation(&a.activation)?,
        residual: a.residual,
        normalize_output: a.normalize,
        init_noise: a.init_noise,
        epochs: a.epochs,
        lr: a.lr,
        ..CaRunConfig::default()
    };
    std::fs::create_dir_all(&a.out)?;
    let mut outcomes = Vec::new();
    for seed in 0..a.seeds {
        let mut log = BufWriter::new(File::create(a.out.join(format!("metrics_seed{seed}.jsonl")))?);
        let run = experiments::train_ca_seed(&config, seed, Some(&mut log))?;
        log.flush()?;
        println!(
            "seed {seed}: accuracy {:.4}, solved {}",
            run.metrics.accuracy,
            run.solved_at.map_or("no".to_string(), |e| format!("at epoch {e}"))
        );
        let ck = Checkpoint {
            net: run.net.clone(),
            config: Some(config.train_config(seed)),
            seed,
        };
        io::save_checkpoint(&ck, a.out.join(format!("seed{seed}.dtnc")))?;
        outcomes.push(experiments::Outcome {
            group: format!("D={}", config.bond_dim),
            seed,
            value: run.metrics.accuracy,
        });
        if run.solved_at.is_some() && !a.all_seeds {
            break;
        }
    }
    let report = experiments::ExperimentReport::new("train_ca", &config, "accuracy", outcomes)?;
    report.save(&a.out)?;
    Ok(())
}

#[derive(Args)]
struct EvalCaArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 30)]
    rule: u8,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value = "5..100")]
    width_range: String,
    /// Widths up to this are enumerated exhaustively.
    #[arg(long, default_value_t = 10)]
    exhaustive_max: usize,
    #[arg(long, default_value_t = ca::DEFAULT_TEST_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

fn eval_ca(a: EvalCaArgs) -> Result<()> {
    let ck = io::load_checkpoint(&a.checkpoint)?;
    let rows = ca::generalization_sweep(
        &ck.net,
        a.rule,
        a.steps,
        parse_range(&a.width_range)?,
        a.exhaustive_max,
        a.samples,
        a.seed,
    )?;
    ca::write_sweep_csv(&rows, std::io::stdout().lock())?;
    if let Some(p) = a.csv_out {
        ca::write_sweep_csv(&rows, File::create(p)?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetName {
    Mnist,
    Fashion,
}

fn load_split(dir: &Path, split: &str) -> Result<ImageDataset> {
    let find = |kind: &str| -> Result<PathBuf> {
        for ext in [".gz", ""] {
            let p = dir.join(format!("{split}-{kind}{ext}"));
            if p.exists() {
                return Ok(p);
            }
        }
        bail!("no {split}-{kind}[.gz] in {}", dir.display())
    };
    Ok(io::load_idx(find("images-idx3-ubyte")?, find("labels-idx1-ubyte")?)?)
}

fn default_dir(name: DatasetName) -> PathBuf {
    match name {
        DatasetName::Mnist => PathBuf::from("data/mnist"),
        DatasetName::Fashion => PathBuf::from("data/fashion"),
    }
}

/// Loads train/test splits, then applies the subset, permutation and size.
fn prepare_images(
    dir: &Path,
    subset: usize,
    permute_seed: u64,
    size: Option<usize>,
) -> Result<(ImageDataset, ImageDataset)> {
    let mut train = load_split(dir, "train")?;
    let mut test = load_split(dir, "t10k")?;
    if subset > 0 {
        let classes = train.num_classes().max(1);
        train = train.stratified(subset / classes, 0);
        test = test.stratified(subset / 2 / classes, 0);
    }
    train = io::apply_permutation(&train, permute_seed);
    test = io::apply_permutation(&test, permute_seed);
    if let Some(s) = size {
        train = io::resize_crop(&train, s, s, Crop::None)?;
        test = io::resize_crop(&test, s, s, Crop::None)?;
    }
    Ok((train, test))
}

#[derive(Args)]
struct TrainImageArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetName,
    /// Directory with `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Stratified training subset size (test subset is half of it); 0 keeps all.
    #[arg(long, default_value_t = 2000)]
    subset_size: usize,
    #[arg(long, default_value_t = io::IDENTITY_PERMUTATION_SEED)]
    permute_seed: u64,
    /// Square side the images are resized to before flattening.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 20)]
    d_mps: usize,
    #[arg(long, default_value_t = 10)]
    d_mpo: usize,
    #[arg(long, default_value_t = 0)]
    layers: usize,
    #[arg(long, default_value = "matrix_exp")]
    activation: String,
    #[arg(long)]
    residual: bool,
    #[arg(long)]
    uniform: bool,
    /// Rank of a factored head boundary.
    #[arg(long)]
    head_rank: Option<usize>,
    /// Train a uniform model on every square size in this range.
    #[arg(long)]
    resize_range: Option<String>,
    /// Cross-validation folds; 1 trains a single model on the full subset.
    #[arg(long, default_value_t = 1)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` training overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "runs/image")]
    out: PathBuf,
}

fn train_image(a: TrainImageArgs) -> Result<()> {
    let mut train_config = TrainConfig::default();
    if let Some(p) = &a.config {
        io::load_train_config(p, &mut train_config)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').context("overrides look like key=value")?;
        train_config.set(k.trim(), v.trim())?;
    }
    train_config.validate()?;
    let config = ImageRunConfig {
        mps_bond_dim: a.d_mps,
        head_boundary_rank: a.head_rank,
        mpo_bond_dim: a.d_mpo,
        layers: a.layers,
        activation: parse_activation(&a.activation)?,
        residual: a.residual,
        uniform: a.uniform || a.resize_range.is_some(),
        train: train_config,
        ..ImageRunConfig::default()
    };
    let dir = a.data_dir.clone().unwrap_or_else(|| default_dir(a.dataset));
    let (train, test) = prepare_images(&dir, a.subset_size, a.permute_seed, a.size)?;
    std::fs::create_dir_all(&a.out)?;

    if let Some(range) = &a.resize_range {
        let sizes: Vec<(usize, usize)> = parse_range(range)?.into_iter().map(|s| (s, s)).collect();
        let run = experiments::train_image_multisize(&config, &train, &sizes, &test, a.seed)?;
        println!("multi-size model: test accuracy {:.4}", run.test_accuracy);
        let ck = Checkpoint {
            net: run.net,
            config: Some(config.train.clone()),
            seed: a.seed,
        };
        io::save_checkpoint(&ck, a.out.join("model.dtnc"))?;
        return Ok(());
    }

    let mut outcomes = Vec::new();
    let folds = if a.folds > 1 {
        kfold_indices(train.len(), a.folds, a.seed)?
    } else {
        vec![((0..train.len()).collect(), Vec::new())]
    };
    for (f, (train_idx, _)) in folds.iter().enumerate() {
        let part = train.subset(train_idx);
        let seed = a.seed + f as u64;
        let mut log = BufWriter::new(File::create(a.out.join(format!("metrics_fold{f}.jsonl")))?);
        let run = experiments::train_image_seed(&config, &part, &test, seed, Some(&mut log))?;
        log.flush()?;
        println!("fold {f}: test accuracy {:.4}", run.test_accuracy);
        io::save_checkpoint(
            &Checkpoint {
                net: run.net,
                config: Some(config.train.clone()),
                seed,
            },
            a.out.join(format!("fold{f}.dtnc")),
        )?;
        outcomes.push(experiments::Outcome {
            group: format!("layers={}", config.layers),
            seed,
            value: run.test_accuracy,
        });
    }
    experiments::ExperimentReport::new("train_image", &config, "accuracy", outcomes)?.save(&a.out)?;
    Ok(())
}

#[derive(Args)]
struct EvalImageArgs {
    /// One or more checkpoints; several are evaluated as an ensemble.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetName,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    subset_size: usize,
    #[arg(long, default_value_t = io::IDENTITY_PERMUTATION_SEED)]
    permute_seed: u64,
    /// Square side to resize test images to.
    #[arg(long)]
    resize: Option<usize>,
    /// Evaluate a uniform model at every `HxW` size in this list, e.g. `12x14,14x14,16x14`.
    #[arg(long)]
    aspect_sweep: Option<String>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

fn eval_image(a: EvalImageArgs) -> Result<()> {
    let nets = a
        .checkpoint
        .iter()
        .map(|p| Ok(io::load_checkpoint(p).with_context(|| p.display().to_string())?.net))
        .collect::<Result<Vec<_>>>()?;
    let dir = a.data_dir.clone().unwrap_or_else(|| default_dir(a.dataset));
    let (_, test) = prepare_images(&dir, a.subset_size, a.permute_seed, a.resize)?;

    if let Some(sweep) = &a.aspect_sweep {
        let sizes = sweep
            .split(',')
            .map(|p| {
                let (h, w) = p.trim().split_once('x').context("sizes look like HxW")?;
                Ok((h.parse()?, w.parse()?))
            })
            .collect::<Result<Vec<(usize, usize)>>>()?;
        let rows = experiments::run_robustness_sweep(&nets[0], &test, &sizes)?;
        experiments::write_robustness_csv(&rows, std::io::stdout().lock())?;
        if let Some(p) = a.csv_out {
            experiments::write_robustness_csv(&rows, File::create(p)?)?;
        }
        return Ok(());
    }

    let rows: Vec<&[f64]> = test.images.iter().map(Vec::as_slice).collect();
    let per_model = nets
        .iter()
        .map(|n| n.forward_classify_batch(&rows))
        .collect::<deeptn::Result<Vec<Tensor>>>()?;
    let k = per_model[0].shape()[1];
    let mut correct = vec![0usize; nets.len() + 1];
    for (i, &label) in test.labels.iter().enumerate() {
        let members: Vec<Vec<f64>> = per_model
            .iter()
            .map(|t| t.data()[i * k..(i + 1) * k].to_vec())
            .collect();
        for (m, l) in members.iter().enumerate() {
            correct[m] += usize::from(argmax(l) == label);
        }
        correct[nets.len()] += usize::from(argmax(&ensemble_logits(&members)?) == label);
    }
    let mut out: Box<dyn Write> = match &a.csv_out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::sink()),
    };
    writeln!(out, "model,accuracy")?;
    for (m, c) in correct.iter().enumerate() {
        let name = if m == nets.len() {
            "ensemble".to_string()
        } else {
            a.checkpoint[m].display().to_string()
        };
        let acc = *c as f64 / test.len() as f64;
        println!("{name}: accuracy {acc:.4}");
        writeln!(out, "{name},{acc}")?;
    }
    Ok(())
}

#[derive(Args)]
struct VerifyAttentionArgs {
    #[arg(long, default_value = "3..8")]
    n_range: String,
    #[arg(long, default_value = "2..4")]
    d_range: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn random_unit_embedding(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<EmbeddingSequence> {
    let raw = Tensor::random_normal(&[n, d], 1.0, rng);
    Ok(EmbeddingSequence::new(raw)?.l2_normalized()?)
}

fn verify_attention(a: VerifyAttentionArgs) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut all_ok = true;
    println!("N,d,published_max_deviation,corrected_max_deviation,status");
    for d in parse_range(&a.d_range)? {
        let (cm, cg) = build_corrected_permutation_mpo(d)?;
        for n in parse_range(&a.n_range)? {
            let (mut worst, mut worst_corrected) = (0.0f64, 0.0f64);
            for _ in 0..a.trials {
                let emb = random_unit_embedding(n, d, &mut rng)?;
                let wq = Tensor::random_normal(&[d, d], 1.0, &mut rng);
                let wk = Tensor::random_normal(&[d, d], 1.0, &mut rng);
                worst = worst.max(attention::verify_equivalence(&emb, &wq, &wk)?.max());
                worst_corrected =
                    worst_corrected.max(attention::verify_equivalence_with(&emb, &wq, &wk, &cm, &cg)?.max());
            }
            let ok = worst < a.tolerance;
            all_ok &= ok;
            println!(
                "{n},{d},{worst:e},{worst_corrected:e},{}",
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(all_ok)
}

#[derive(Args)]
struct GradCheckArgs {
    /// Flat `key = value` file with `bond_dim`, `sites`, `seed`, `max_entries`.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let (mut bond_dim, mut sites, mut seed, mut max_entries) = (2usize, 3usize, 0u64, Some(8usize));
    if let Some(p) = a.config {
        for (k, v) in io::parse_config(&std::fs::read_to_string(p)?)? {
            match k.as_str() {
                "bond_dim" => bond_dim = v.parse()?,
                "sites" => sites = v.parse()?,
                "seed" => seed = v.parse()?,
                "max_entries" => max_entries = if v == "all" { None } else { Some(v.parse()?) },
                _ => bail!("unknown grad-check key {k:?}"),
            }
        }
    }
    let rows = experiments::grad_check_all(bond_dim, sites, seed, max_entries)?;
    let mut ok = true;
    for r in &rows {
        let tol = if r.activation == Activation::MatrixExp {
            1e-4
        } else {
            1e-5
        };
        let pass = r.max_rel_error < tol;
        ok &= pass;
        println!(
            "{} {:.3e} {}",
            if pass { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.label
        );
    }
    Ok(ok)
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "16,32,64,128,256,512")]
    n_range: String,
    #[arg(long, default_value = "8,16,32")]
    d_mpo_range: String,
    #[arg(long, default_value_t = 1)]
    rank_g: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

fn bench(a: BenchArgs) -> Result<()> {
    let rows = experiments::bench_forward(
        &parse_range(&a.n_range)?,
        &parse_range(&a.d_mpo_range)?,
        a.rank_g,
        a.batch,
        a.reps,
    )?;
    experiments::write_bench_csv(&rows, std::io::stdout().lock())?;
    if let Some(p) = a.csv_out {
        experiments::write_bench_csv(&rows, File::create(p)?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let ok = match Cli::parse().command {
        Command::TrainCa(a) => train_ca(a).map(|_| true),
        Command::EvalCa(a) => eval_ca(a).map(|_| true),
        Command::TrainImage(a) => train_image(a).map(|_| true),
        Command::EvalImage(a) => eval_image(a).map(|_| true),
        Command::VerifyAttention(a) => verify_attention(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Bench(a) => bench(a).map(|_| true),
    }?;
    if !ok {
        std::process::exit(1);
    }
    Ok(())
}
