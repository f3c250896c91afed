//! Zero-shot segmentation heatmaps from class-aligned neurons, scored
//! against the toy ground-truth masks.

use neuronscope::apps::metrics::segmentation_metrics;
use neuronscope::config::RunConfig;
use neuronscope::pipeline;

fn main() -> neuronscope::Result<()> {
    let out = std::env::temp_dir().join(format!("neuronscope-segment-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&out);
    pipeline::gen_toy(&RunConfig { out: out.clone(), ..RunConfig::default() }, false)?;
    let cfg = RunConfig::load(&out.join("config.json"))?;
    pipeline::trace(&cfg, false)?;
    pipeline::effects(&cfg, false)?;
    pipeline::rank1(&cfg, false)?;

    let spec = pipeline::load_weights(&cfg)?.spec;
    let maps = pipeline::segment_images(&cfg, &spec)?;
    let truth = pipeline::load_masks(&cfg)?;
    for row in maps[0].upsampled.rows() {
        let line: String = row.iter().map(|&v| if v >= 0.5 { '#' } else { '.' }).collect();
        println!("{line}");
    }
    let m = segmentation_metrics(&maps, &truth)?;
    println!(
        "pixel acc {:.1}%, mIoU {:.1}%, mAP {:?} over {} images",
        m.pixel_acc, m.miou, m.map, m.images
    );
    std::fs::remove_dir_all(&out).ok();
    Ok(())
}
