//! Ranks phrases whose neurons push predictions from one class toward
//! another. Prepares a toy run directory with the pipeline stages first.

use neuronscope::apps::mining::{
    classification_direction, contribution_scores, select_neurons_by_direction,
};
use neuronscope::config::RunConfig;
use neuronscope::pipeline;

fn main() -> neuronscope::Result<()> {
    let out = std::env::temp_dir().join(format!("neuronscope-spurious-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&out);
    let mut cfg = RunConfig {
        out: out.clone(),
        ..RunConfig::default()
    };
    pipeline::gen_toy(&cfg, false)?;
    cfg = RunConfig::load(&out.join("config.json"))?;
    pipeline::trace(&cfg, false)?;
    pipeline::effects(&cfg, false)?;
    pipeline::rank1(&cfg, false)?;
    pipeline::decompose(&cfg, false)?;

    let (classes, _) = pipeline::load_classes(&cfg)?;
    let pool = pipeline::load_pool(&cfg)?;
    let (mut directions, mut codes) = (Vec::new(), Vec::new());
    for &layer in &cfg.layers {
        directions.extend(pipeline::load_directions(&cfg, layer)?);
        codes.extend(pipeline::load_codes(&cfg, layer, &pool)?);
    }
    let (v, _) = classification_direction(&classes.embedding(0), &classes.embedding(1));
    let selected = select_neurons_by_direction(&directions, &v, cfg.k)?;
    let mut ranking = contribution_scores(&selected, &directions, &codes, &v)?;
    ranking.truncate(5);
    println!("{} -> {}", classes.names[0], classes.names[1]);
    for e in &ranking.entries {
        println!("  {:<12} {:+.4}", pool.phrases[e.phrase], e.score);
    }
    std::fs::remove_dir_all(&out).ok();
    Ok(())
}
