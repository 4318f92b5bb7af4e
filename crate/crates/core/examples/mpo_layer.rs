//! One MPO layer applied to an embedded sequence: contexts, local weights
//! and the three activations.
//!
//! ```bash
//! cargo run --example mpo_layer
//! ```

use deeptn::embedding::{decode, embed};
use deeptn::mpo::{cost_estimate, Activation, MpoConfig, MpoInit, MpoLayer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let emb = embed(&[0.1, 0.7, 0.4, 0.95, 0.3, 0.6])?;

    // identity cores rescale every site by the same context product, so the
    // decoded values survive unchanged
    let identity = MpoLayer::identity(MpoConfig {
        normalize_contexts: false,
        ..MpoConfig::uniform(3, Activation::Linear)
    })?;
    let same = identity.forward(&emb)?;
    let gap = decode(&same)?
        .iter()
        .zip(decode(&emb)?)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("identity layer decoded deviation: {gap:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for activation in [Activation::Linear, Activation::Sigmoid, Activation::MatrixExp] {
        let init = MpoInit {
            identity_scale: if activation == Activation::MatrixExp { 0.0 } else { 1.0 },
            noise_std: 0.3,
        };
        let config = MpoConfig {
            residual: true,
            normalize_output: true,
            ..MpoConfig::uniform(4, activation)
        };
        let layer = MpoLayer::init(config, init, &mut rng)?;
        let out = layer.forward(&emb)?;
        println!("{activation:?}: site 0 -> {:?}", out.site(0));
    }

    let layer = MpoLayer::init(MpoConfig::uniform(4, Activation::Linear), MpoInit::default(), &mut rng)?;
    let weights = layer.local_weights(&emb)?;
    println!("H(2) = {:?}", weights[2].data());
    println!(
        "left context norms: {:?}",
        layer
            .left_contexts(&emb)?
            .iter()
            .map(deeptn::frobenius_norm)
            .collect::<Vec<_>>()
    );
    println!("cost estimate N=100, D=4, rank G=1: {}", cost_estimate(2, 4, 100, 1)?);
    Ok(())
}
