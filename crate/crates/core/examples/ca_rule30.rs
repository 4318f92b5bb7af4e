//! Learn one step of rule 30 with a single sigmoid MPO layer of bond
//! dimension 2, then test it on widths the model never saw.
//!
//! ```bash
//! cargo run --release --example ca_rule30
//! ```

use deeptn::ca::{self, CaTask, Sampling};
use deeptn::experiments::{train_ca_seeds, CaRunConfig};

fn main() -> anyhow::Result<()> {
    let task = CaTask::new(30, 1, 8)?;
    let state = [0, 0, 0, 1, 0, 0, 0, 0];
    println!("rule 30 from {state:?}: {:?}", task.target(&state)?);

    let config = CaRunConfig::default();
    let runs = train_ca_seeds(&config, 0..10, true)?;
    let run = runs.last().expect("at least one seed");
    match run.solved_at {
        Some(epoch) => println!("seed {} solved widths 5..=10 after {epoch} epochs", run.seed),
        None => println!("no seed solved; best cell accuracy {:.4}", run.metrics.accuracy),
    }

    let rows = ca::generalization_sweep(&run.net, 30, 1, [5, 12, 20, 50, 100], 14, 2048, 7)?;
    for r in &rows {
        println!("N = {:3}: accuracy {:.4} solved {}", r.n, r.accuracy, r.solved);
    }

    let wide = ca::generate_dataset(&CaTask::new(30, 1, 64)?, Sampling::Random { count: 4, seed: 1 })?;
    let pred = run
        .net
        .forward_sequence(&wide[0].0.iter().map(|&b| f64::from(b)).collect::<Vec<_>>())?;
    let rounded: String = pred.iter().map(|p| if *p >= 0.5 { '#' } else { '.' }).collect();
    let truth: String = wide[0].1.iter().map(|&b| if b == 1 { '#' } else { '.' }).collect();
    println!("predicted {rounded}\nexpected  {truth}");
    Ok(())
}
