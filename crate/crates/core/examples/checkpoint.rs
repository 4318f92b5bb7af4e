//! Save a network with its training config and load it back bit for bit.
//!
//! ```bash
//! cargo run --example checkpoint
//! ```

use deeptn::experiments::ImageRunConfig;
use deeptn::io::{self, Checkpoint};
use deeptn::training::TrainConfig;

fn main() -> anyhow::Result<()> {
    let config = ImageRunConfig {
        layers: 2,
        mpo_bond_dim: 3,
        mps_bond_dim: 5,
        ..ImageRunConfig::default()
    };
    let net = config.build_network(16, 10, 7)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.dtnc");
    io::save_checkpoint(
        &Checkpoint {
            net: net.clone(),
            config: Some(TrainConfig::default()),
            seed: 7,
        },
        &path,
    )?;
    println!("wrote {} bytes", std::fs::metadata(&path)?.len());

    let back = io::load_checkpoint(&path)?;
    let same = net
        .parameters()
        .iter()
        .zip(back.net.parameters())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("topology {:?}", back.net.topology().layers.len());
    println!(
        "parameters identical: {same}, seed {}, lr {:?}",
        back.seed,
        back.config.map(|c| c.lr)
    );

    let mut bytes = std::fs::read(&path)?;
    bytes.truncate(bytes.len() - 3);
    println!("truncated file: {}", io::read_checkpoint(&bytes).unwrap_err());
    Ok(())
}
