//! Second-order effects of every neuron of one layer, and the neurons with
//! the largest mean effect norm.

use neuronscope::effects::{effect_norms, second_order, EffectOptions};
use neuronscope::engine::{forward_batch, generate_toy, random_images};
use neuronscope::ModelSpec;

fn main() -> neuronscope::Result<()> {
    let spec = ModelSpec::toy();
    let weights = generate_toy(7, &spec);
    let trace = forward_batch(&weights, random_images(8, &spec, 16).view())?;

    let layer = 1;
    let neurons: Vec<usize> = (0..spec.mlp_width).collect();
    let field = second_order(&weights, &trace, layer, &neurons, &EffectOptions::default())?;
    let norms = effect_norms(&field);
    let mut mean_norm: Vec<(usize, f32)> = neurons
        .iter()
        .map(|&n| (n, norms.column(n).mean().unwrap_or(0.0)))
        .collect();
    mean_norm.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("layer {layer}: {} images × {} neurons", field.images(), neurons.len());
    for (n, v) in mean_norm.iter().take(5) {
        println!("  neuron {n:>3}  mean ‖φ‖ = {v:.4}");
    }
    Ok(())
}
