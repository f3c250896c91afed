//! Sparse decomposition of a target vector over a pool of phrase embeddings.

use ndarray::Array2;
use neuronscope::sparse::{omp, top_phrases, TextPool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> neuronscope::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb: Array2<f32> = Array2::from_shape_simple_fn((50, 12), || StandardNormal.sample(&mut rng));
    let phrases = (0..50).map(|i| format!("phrase {i}")).collect();
    let pool = TextPool::new(phrases, emb)?;

    // A target built from three atoms is recovered with three atoms.
    let target = pool.atoms.row(3).to_owned() * 2.0 - pool.atoms.row(17).to_owned()
        + pool.atoms.row(40).to_owned() * 0.5;
    for m in [1, 2, 3] {
        let code = omp(&target, &pool, m)?;
        println!("m={m}: atoms {:?}, residual {:.2e}", code.indices, code.residual_norm);
    }
    let code = omp(&target, &pool, 3)?;
    let (top, _) = top_phrases(&code, &pool, 3);
    for (phrase, weight) in top {
        println!("  {phrase:<10} {weight:+.3}");
    }
    Ok(())
}
