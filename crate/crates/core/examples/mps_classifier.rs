//! MPS classification head: logits, probabilities, ensembles, and the
//! brute-force check of the contraction.
//!
//! ```bash
//! cargo run --example mps_classifier
//! ```

use deeptn::embedding::embed;
use deeptn::mps::{argmax, class_probabilities, ensemble_logits, MpsHead, MpsHeadConfig};
use deeptn::oracle::dense_mps_logits;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = [0.2, 0.8, 0.5, 0.1, 0.9, 0.4];
    let emb = embed(&x)?;

    let members: Vec<MpsHead> = (0..3)
        .map(|_| MpsHead::init(MpsHeadConfig::new(4, 3, Some(x.len())), 0.2, &mut rng))
        .collect::<Result<_, _>>()?;
    let mut all = Vec::new();
    for (i, head) in members.iter().enumerate() {
        let logits = head.logits(&emb)?;
        let dense = dense_mps_logits(head, &emb);
        let gap = logits
            .iter()
            .zip(&dense)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("member {i}: logits {logits:.4?} (dense oracle gap {gap:.1e})");
        all.push(logits);
    }
    let avg = ensemble_logits(&all)?;
    let p = class_probabilities(&avg)?;
    println!("ensemble probabilities {p:.4?}, predicted class {}", argmax(&avg));

    // a uniform head evaluates any input length
    let uniform = MpsHead::init(MpsHeadConfig::new(4, 3, None), 0.2, &mut rng)?;
    for n in [4, 16, 64] {
        let xs: Vec<f64> = (0..n).map(|i| (i % 7) as f64 / 7.0).collect();
        println!("uniform head, N = {n}: {:.4?}", uniform.logits(&embed(&xs)?)?);
    }
    Ok(())
}
