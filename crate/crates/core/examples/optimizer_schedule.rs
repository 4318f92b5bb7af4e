//! Adam versus AdamW on a quadratic, and the plateau scheduler.
//!
//! ```bash
//! cargo run --example optimizer_schedule
//! ```

use deeptn::training::{OptimizerKind, OptimizerState, PlateauScheduler};
use deeptn::{Gradients, ParamId, Tensor};

fn main() -> anyhow::Result<()> {
    for kind in [OptimizerKind::Adam, OptimizerKind::AdamW] {
        let mut opt = OptimizerState::new(kind, 0.1, 0.05)?;
        let mut p = Tensor::vector(&[3.0, -2.0]);
        for _ in 0..200 {
            // gradient of ½‖p − 1‖²
            let mut g = Gradients::default();
            g.insert(ParamId(0), p.map(|v| v - 1.0));
            opt.step(&mut [&mut p], &g)?;
        }
        println!("{kind:?}: p = {:.4?} after {} steps", p.data(), opt.steps_taken());
    }

    let mut sched = PlateauScheduler::new(0.5, 2)?;
    let mut lr = 1e-2;
    for (epoch, loss) in [1.0, 0.8, 0.81, 0.82, 0.7, 0.75, 0.72, 0.71].iter().enumerate() {
        lr = sched.step(*loss, lr);
        println!("epoch {}: loss {loss:.2} lr {lr:.4e}", epoch + 1);
    }
    Ok(())
}
