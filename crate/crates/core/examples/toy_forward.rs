//! Runs a random toy ViT over a few random images and classifies the
//! representations against random class embeddings.

use ndarray::Array2;
use neuronscope::engine::{forward_batch, generate_toy, random_images};
use neuronscope::eval::{classify, ClassSet};
use neuronscope::ModelSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> neuronscope::Result<()> {
    let spec = ModelSpec::toy();
    let weights = generate_toy(7, &spec);
    let images = random_images(8, &spec, 6);
    let trace = forward_batch(&weights, images.view())?;
    println!(
        "post-GELU activations {:?}, representation {:?}",
        trace.post_gelu.shape(),
        trace.representation.shape()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = Array2::from_shape_simple_fn((3, spec.d_out), || StandardNormal.sample(&mut rng));
    let classes = ClassSet::new(vec!["cat".into(), "dog".into(), "car".into()], emb)?;
    for (i, p) in classify(trace.representation.view(), &classes).iter().enumerate() {
        println!("image {i}: {:?}", p.map(|c| &classes.names[c]));
    }
    Ok(())
}
