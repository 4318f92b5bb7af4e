//! Reverse-mode differentiation on the tape, checked against Ridders'
//! finite differences.
//!
//! ```bash
//! cargo run --example autodiff_tape
//! ```

use deeptn::gradcheck::check_scalar;
use deeptn::{ParamId, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    // f(A, x) = Σ sigmoid(A x)
    let a = Tensor::matrix(&[&[0.5, -1.0], &[2.0, 0.3]])?;
    let x = Tensor::vector(&[0.7, -0.4]);

    let mut tape = Tape::new();
    let av = tape.param(ParamId(0), a.clone());
    let xv = tape.param(ParamId(1), x.clone());
    let y = tape.contract(av, xv, &[(1, 0)])?;
    let s = tape.sigmoid(y)?;
    let f = tape.sum(s)?;
    let grads = tape.backward(f)?;
    println!("f = {:.6}", tape.value(f).item());
    println!("df/dA = {:?}", grads.get(ParamId(0)).map(|g| g.data().to_vec()));
    println!("df/dx = {:?}", grads.get(ParamId(1)).map(|g| g.data().to_vec()));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let report = check_scalar(&[a, x], None, &mut rng, |tape, v| {
        let y = tape.contract(v[0], v[1], &[(1, 0)])?;
        let s = tape.sigmoid(y)?;
        tape.sum(s)
    })?;
    println!(
        "max relative error vs finite differences: {:.2e} over {} entries",
        report.max_rel_error, report.entries_checked
    );
    Ok(())
}
