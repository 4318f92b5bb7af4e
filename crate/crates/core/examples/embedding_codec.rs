//! Linear feature map φ(x) = (x, 1 − x) and its inverse.
//!
//! ```bash
//! cargo run --example embedding_codec
//! ```

use deeptn::{decode, embed};

fn main() -> anyhow::Result<()> {
    let x = [0.0, 0.25, 0.5, 0.9, 1.0];
    let emb = embed(&x)?;
    for (j, xj) in x.iter().enumerate() {
        println!("x = {xj:.2} -> phi = {:?}", emb.site(j));
    }
    let back = decode(&emb)?;
    let worst = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("round trip max error {worst:e}");

    // decode only looks at relative magnitudes of the two components
    let scaled = deeptn::EmbeddingSequence::from_vectors(&[vec![3.0, 1.0], vec![-0.2, -0.6]])?;
    println!("decoded unnormalized outputs: {:?}", decode(&scaled)?);
    Ok(())
}
