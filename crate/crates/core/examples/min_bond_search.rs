//! Smallest MPO bond dimension that solves the one-step rule-30 task,
//! with a short seed budget.
//!
//! ```bash
//! cargo run --release --example min_bond_search
//! ```

use deeptn::experiments::{run_min_bond_search, CaRunConfig};

fn main() -> anyhow::Result<()> {
    let base = CaRunConfig::default();
    let result = run_min_bond_search(&base, 1, 1, 1..=3, 4)?;
    for a in &result.attempts {
        println!(
            "D = {} seed {}: solved {:?} accuracy {:.4}",
            a.bond_dim, a.seed, a.solved_at, a.accuracy
        );
    }
    match result.minimal {
        Some(d) => println!("minimal bond dimension: {d}"),
        None => println!("no bond dimension in range solved the task"),
    }
    Ok(())
}
