//! Gradient check of every MPO-layer configuration inside a classifier and
//! a decoder.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use deeptn::experiments::grad_check_all;
use deeptn::Activation;

fn main() -> anyhow::Result<()> {
    let rows = grad_check_all(3, 4, 0, Some(6))?;
    let mut worst = [0.0f64; 3];
    for r in &rows {
        let k = match r.activation {
            Activation::Linear => 0,
            Activation::Sigmoid => 1,
            Activation::MatrixExp => 2,
        };
        worst[k] = worst[k].max(r.max_rel_error);
    }
    println!("{} configurations checked", rows.len());
    println!(
        "worst relative error: linear {:.2e}, sigmoid {:.2e}, matrix-exp {:.2e}",
        worst[0], worst[1], worst[2]
    );
    let top = rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("rows");
    println!("hardest case: {} ({:.2e})", top.label, top.max_rel_error);
    Ok(())
}
