//! Lists the phrases describing one image, from the neurons whose effect on
//! it is unusually large.

use neuronscope::apps::concepts::{discover_concepts, percentile_table, PercentileMode};
use neuronscope::config::RunConfig;
use neuronscope::pipeline;

fn main() -> neuronscope::Result<()> {
    let out = std::env::temp_dir().join(format!("neuronscope-concepts-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&out);
    pipeline::gen_toy(&RunConfig { out: out.clone(), ..RunConfig::default() }, false)?;
    let cfg = RunConfig::load(&out.join("config.json"))?;
    pipeline::trace(&cfg, false)?;
    pipeline::effects(&cfg, false)?;
    pipeline::rank1(&cfg, false)?;
    pipeline::decompose(&cfg, false)?;

    let pool = pipeline::load_pool(&cfg)?;
    let layer = cfg.layers[0];
    let field = pipeline::load_field(&cfg, layer)?;
    let codes = pipeline::load_codes(&cfg, layer, &pool)?;
    for mode in [PercentileMode::PerNeuron, PercentileMode::Global] {
        let thresholds = percentile_table(&field, 90.0, mode)?;
        let mut ranking = discover_concepts(&field, &thresholds, &codes, 0)?;
        ranking.truncate(5);
        println!("image 0, layer {layer}, {mode:?} thresholds:");
        for e in &ranking.entries {
            println!("  {:<12} {:+.4}", pool.phrases[e.phrase], e.score);
        }
    }
    std::fs::remove_dir_all(&out).ok();
    Ok(())
}
