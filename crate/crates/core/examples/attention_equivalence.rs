//! The permutation MPO behind the linear-attention construction: its dense
//! contraction versus the sum of transpositions, and the resulting layer
//! versus unnormalized linear dot-attention.
//!
//! ```bash
//! cargo run --example attention_equivalence
//! ```

use deeptn::attention::{
    build_corrected_permutation_mpo, build_permutation_mpo, permutation_operator, transposition_sum,
    verify_equivalence, verify_equivalence_with,
};
use deeptn::{EmbeddingSequence, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let d = 2;
    let (m, g) = build_permutation_mpo(d)?;
    let (cm, cg) = build_corrected_permutation_mpo(d)?;
    println!(
        "bond dimensions: published {}, corrected {}",
        m.shape()[0],
        cm.shape()[0]
    );
    for n in 2..=5 {
        let want = transposition_sum(d, n);
        let published = permutation_operator(&m, &g, n)?.max_abs_diff(&want);
        let corrected = permutation_operator(&cm, &cg, n)?.max_abs_diff(&want);
        println!("N = {n}: distance to sum of P_ij: published {published}, corrected {corrected}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let emb = EmbeddingSequence::new(Tensor::random_normal(&[4, d], 1.0, &mut rng))?.l2_normalized()?;
    let wq = Tensor::random_normal(&[d, d], 1.0, &mut rng);
    let wk = Tensor::random_normal(&[d, d], 1.0, &mut rng);
    let published = verify_equivalence(&emb, &wq, &wk)?;
    let corrected = verify_equivalence_with(&emb, &wq, &wk, &cm, &cg)?;
    println!(
        "attention identity deviation: published {:.3e}, corrected {:.3e}",
        published.max(),
        corrected.max()
    );
    Ok(())
}
