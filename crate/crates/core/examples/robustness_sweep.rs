//! A uniform classifier trained at one image size and at a range of sizes,
//! evaluated on resized test images.
//!
//! ```bash
//! cargo run --release --example robustness_sweep
//! ```

use std::path::PathBuf;

use deeptn::experiments::{run_robustness_sweep, train_image_multisize, train_image_seed, ImageRunConfig};
use deeptn::io::{self, Crop};
use deeptn::training::TrainConfig;

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let load = |prefix: &str, per_class: usize| -> anyhow::Result<io::ImageDataset> {
        let data = io::load_idx(
            dir.join(format!("{prefix}-images-idx3-ubyte.gz")),
            dir.join(format!("{prefix}-labels-idx1-ubyte.gz")),
        )?;
        Ok(io::resize_crop(&data.stratified(per_class, 0), 12, 12, Crop::None)?)
    };
    let (train, test) = (load("train", 50)?, load("t10k", 20)?);
    let config = ImageRunConfig {
        uniform: true,
        mps_bond_dim: 10,
        train: TrainConfig {
            batch_size: 32,
            epochs: 3,
            lr: 1e-3,
            l2: 0.0,
            plateau_patience: 0,
            ..TrainConfig::default()
        },
        ..ImageRunConfig::default()
    };
    let sizes: Vec<(usize, usize)> = [10, 11, 12, 13, 14].iter().map(|&s| (s, s)).collect();

    let fixed = train_image_seed(&config, &train, &test, 0, None)?;
    let ranged = train_image_multisize(&config, &train, &sizes, &test, 0)?;
    for (name, run) in [("fixed 12x12", &fixed), ("sizes 10..14", &ranged)] {
        let rows = run_robustness_sweep(&run.net, &test, &sizes)?;
        let line: Vec<String> = rows
            .iter()
            .map(|r| format!("{}x{}: {:.3}", r.height, r.width, r.accuracy))
            .collect();
        println!("{name}: {}", line.join("  "));
    }
    Ok(())
}
