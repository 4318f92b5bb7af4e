//! Pairwise tensor contraction, batching and the 2x2 matrix exponential.
//!
//! ```bash
//! cargo run --example tensor_contraction
//! ```

use deeptn::{batch_contract, contract, frobenius_norm, matrix_exp_2x2, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Θ = Σ_st φ_s M^{st} φ_t for a [D, D, d, d] core
    let core = Tensor::random_normal(&[3, 3, 2, 2], 1.0, &mut rng);
    let phi = Tensor::vector(&[0.3, 0.7]);
    let half = contract(&core, &phi, &[(3, 0)])?;
    let theta = contract(&half, &phi, &[(2, 0)])?;
    println!("theta shape {:?}, norm {:.4}", theta.shape(), frobenius_norm(&theta));

    // the same contraction for a batch of embeddings: leading axis shared
    let cores = Tensor::stack(&[&core, &core], 0)?;
    let phis = Tensor::stack(&[&phi, &Tensor::vector(&[0.9, 0.1])], 0)?;
    let batched = batch_contract(&cores, &phis, &[(4, 1)])?;
    println!("batched shape {:?}", batched.shape());

    let h = Tensor::matrix(&[&[0.0, 1.0], &[-1.0, 0.0]])?;
    println!("exp of a rotation generator: {:?}", matrix_exp_2x2(&h)?.data());
    Ok(())
}
