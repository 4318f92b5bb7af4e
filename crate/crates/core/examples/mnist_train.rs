//! Train an MPS classifier, with and without one matrix-exponential MPO
//! layer, on the bundled MNIST subset downsampled to 14x14.
//!
//! ```bash
//! cargo run --release --example mnist_train
//! ```

use std::path::PathBuf;

use deeptn::experiments::{train_image_seed, ImageRunConfig};
use deeptn::io::{self, Crop};
use deeptn::training::TrainConfig;

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let load = |prefix: &str| -> anyhow::Result<io::ImageDataset> {
        let data = io::load_idx(
            dir.join(format!("{prefix}-images-idx3-ubyte.gz")),
            dir.join(format!("{prefix}-labels-idx1-ubyte.gz")),
        )?;
        Ok(io::resize_crop(&data, 14, 14, Crop::None)?)
    };
    let (train, test) = (load("train")?, load("t10k")?);

    let base = ImageRunConfig {
        train: TrainConfig {
            batch_size: 32,
            epochs: 5,
            lr: 5e-4,
            l2: 0.0,
            plateau_patience: 1,
            ..TrainConfig::default()
        },
        ..ImageRunConfig::default()
    };
    for layers in [0, 1] {
        let config = ImageRunConfig { layers, ..base.clone() };
        let mut log = std::io::stdout();
        let run = train_image_seed(&config, &train, &test, 0, Some(&mut log))?;
        println!(
            "{layers} MPO layers: test accuracy {:.3}, {} parameters",
            run.test_accuracy,
            run.net.num_parameters()
        );
    }
    Ok(())
}
