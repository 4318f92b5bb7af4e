//! Forward time of an MPO layer against N and the bond dimension.
//!
//! ```bash
//! cargo run --release --example forward_bench
//! ```

use deeptn::experiments::{bench_forward, linear_fit};

fn main() -> anyhow::Result<()> {
    let sites = [16, 32, 64, 128, 256];
    let dims = [8, 16, 32];
    let rows = bench_forward(&sites, &dims, 1, 32, 3)?;
    let mut slopes = Vec::new();
    for &d in &dims {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.bond_dim == d)
            .map(|r| (r.sites as f64, r.seconds))
            .unzip();
        let (_, slope, r2) = linear_fit(&xs, &ys)?;
        println!("D = {d:2}: {:.2} us per site, R^2 {r2:.4}", slope * 1e6);
        slopes.push(slope);
    }
    for w in slopes.windows(2) {
        println!("doubling D multiplies the per-site time by {:.2}", w[1] / w[0]);
    }
    Ok(())
}
