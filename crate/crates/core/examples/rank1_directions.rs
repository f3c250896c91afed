//! Fits one direction per neuron and reports how much of each neuron's
//! effect variance it captures.

use neuronscope::effects::{second_order, EffectOptions};
use neuronscope::engine::{forward_batch, generate_toy, random_images};
use neuronscope::eval::variance_explained_report;
use neuronscope::rank1::{fit_layer, Rank1Options};
use neuronscope::ModelSpec;

fn main() -> neuronscope::Result<()> {
    let spec = ModelSpec::toy();
    let weights = generate_toy(7, &spec);
    let trace = forward_batch(&weights, random_images(8, &spec, 40).view())?;
    let neurons: Vec<usize> = (0..spec.mlp_width).collect();

    let mut all = Vec::new();
    for layer in 0..spec.layers - 1 {
        let field = second_order(&weights, &trace, layer, &neurons, &EffectOptions::default())?;
        let opts = Rank1Options {
            support_size: 16,
            ..Rank1Options::default()
        };
        all.extend(fit_layer(&field, &opts)?);
    }
    for (layer, ve) in variance_explained_report(&all) {
        println!("layer {layer}: mean variance explained {ve:.3}");
    }
    Ok(())
}
