//! Mean-ablates second-order effects layer by layer and reports how much
//! zero-shot accuracy drops under each mode.

use neuronscope::config::RunConfig;
use neuronscope::eval::{run_ablation, AblationConfig, AblationInputs, AblationMode};
use neuronscope::pipeline;

fn main() -> neuronscope::Result<()> {
    let out = std::env::temp_dir().join(format!("neuronscope-ablate-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&out);
    pipeline::gen_toy(&RunConfig { out: out.clone(), ..RunConfig::default() }, false)?;
    let cfg = RunConfig::load(&out.join("config.json"))?;
    pipeline::trace(&cfg, false)?;
    pipeline::effects(&cfg, false)?;
    pipeline::rank1(&cfg, false)?;

    let w = pipeline::load_weights(&cfg)?;
    let trace = pipeline::load_trace(&cfg, &w.spec)?;
    let (classes, labels) = pipeline::load_classes(&cfg)?;
    let images = pipeline::load_images(&cfg, &w.spec)?;
    let means = trace.per_token_means();
    let mut fields = Vec::new();
    let mut directions = Vec::new();
    for &layer in &cfg.layers {
        fields.push(pipeline::load_field(&cfg, layer)?);
        directions.extend(pipeline::load_directions(&cfg, layer)?);
    }
    let inputs = AblationInputs {
        trace: &trace,
        classes: &classes,
        labels: &labels,
        fields: &fields,
        directions: &directions,
        weights: Some(&w),
        images: Some(images.view()),
        per_token_means: Some(&means),
    };
    println!("{:<20} {:>7} {:>9} {:>9}", "mode", "layers", "baseline", "ablated");
    for mode in AblationMode::ALL {
        let config = AblationConfig {
            q: cfg.q,
            ..AblationConfig::new(cfg.layers.clone(), mode)
        };
        let r = run_ablation(&config, &inputs)?;
        println!(
            "{:<20} {:>7} {:>8.1}% {:>8.1}%",
            r.mode, r.layer, r.baseline_acc, r.ablated_acc
        );
    }
    std::fs::remove_dir_all(&out).ok();
    Ok(())
}
