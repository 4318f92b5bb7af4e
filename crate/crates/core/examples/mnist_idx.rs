//! Load the bundled MNIST subset from gzipped IDX files, take a stratified
//! slice, permute and resize it.
//!
//! ```bash
//! cargo run --release --example mnist_idx
//! ```

use std::path::PathBuf;

use deeptn::io::{self, Crop};

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let train = io::load_idx(
        dir.join("train-images-idx3-ubyte.gz"),
        dir.join("train-labels-idx1-ubyte.gz"),
    )?;
    println!(
        "{} images of {}x{}, {} classes",
        train.len(),
        train.height,
        train.width,
        train.num_classes()
    );

    let small = train.stratified(5, 0);
    println!("stratified labels: {:?}", small.labels);

    let art: String = small.images[0]
        .chunks(train.width)
        .step_by(2)
        .map(|row| {
            row.iter()
                .step_by(2)
                .map(|&p| {
                    if p > 0.5 {
                        '#'
                    } else if p > 0.1 {
                        '+'
                    } else {
                        ' '
                    }
                })
                .collect::<String>()
                + "\n"
        })
        .collect();
    println!("{art}");

    let shuffled = io::apply_permutation(&small, 3);
    let restored = io::permute_pixels(&shuffled, &io::invert_permutation(&io::permutation(28 * 28, 3)))?;
    println!("permutation round trip exact: {}", restored.images == small.images);

    let resized = io::resize_crop(&small, 14, 14, Crop::None)?;
    let cropped = io::resize_crop(&small, 20, 20, Crop::Center { height: 16, width: 16 })?;
    println!(
        "resized to {}x{}, center-cropped to {}x{}",
        resized.height, resized.width, cropped.height, cropped.width
    );
    Ok(())
}
