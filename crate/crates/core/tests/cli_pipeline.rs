//! End-to-end runs of the command-line stages on a toy model, checked
//! against direct library calls.

use std::path::Path;

use neuronscope::apps::concepts::{discover_concepts_layers, percentile_table};
use neuronscope::apps::write_ranking;
use neuronscope::cli::dispatch;
use neuronscope::config::RunConfig;
use neuronscope::effects::SecondOrderField;
use neuronscope::eval::read_reports_csv;
use neuronscope::pipeline;
use neuronscope::sparse::SparseCode;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("neuronscope").chain(args.iter().copied()))
}

fn toy(dir: &Path) -> (String, RunConfig) {
    let out = dir.join("run");
    assert_eq!(run(&["gen-toy", "--out", out.to_str().unwrap(), "--toy-images", "12"]), 0);
    let config = out.join("config.json");
    let cfg = RunConfig::load(&config).unwrap();
    (config.to_str().unwrap().to_string(), cfg)
}

#[test]
fn discover_output_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = toy(dir.path());
    for stage in ["trace", "effects", "rank1", "decompose", "discover"] {
        assert_eq!(run(&[stage, "--config", &config]), 0, "{stage}");
    }

    let pool = pipeline::load_pool(&cfg).unwrap();
    let mut layers = Vec::new();
    for &layer in &cfg.layers {
        let field = pipeline::load_field(&cfg, layer).unwrap();
        let table = percentile_table(&field, cfg.percentile, cfg.percentile_mode).unwrap();
        let codes = pipeline::load_codes(&cfg, layer, &pool).unwrap();
        layers.push((field, table, codes));
    }
    let views: Vec<(&SecondOrderField, &[f32], &[SparseCode])> = layers
        .iter()
        .map(|(f, t, c)| (f, t.as_slice(), c.as_slice()))
        .collect();
    for img in [0usize, 5, 11] {
        let mut ranking = discover_concepts_layers(&views, img).unwrap();
        ranking.truncate(cfg.discover_top);
        let expected = dir.path().join(format!("expected_{img}.jsonl"));
        write_ranking(&expected, &ranking, &pool).unwrap();
        let got = pipeline::discover_dir(&cfg).join(format!("image_{img:04}.jsonl"));
        assert_eq!(
            std::fs::read(&got).unwrap(),
            std::fs::read(&expected).unwrap(),
            "image {img}"
        );
    }
}

#[test]
fn ablate_writes_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = toy(dir.path());
    for stage in ["trace", "effects"] {
        assert_eq!(run(&[stage, "--config", &config]), 0, "{stage}");
    }
    assert_eq!(run(&["ablate", "--config", &config, "--mode", "all", "--layers", "1,2"]), 0);
    let path = pipeline::ablation_path(&cfg, neuronscope::eval::AblationMode::All);
    let rows = read_reports_csv(&path).unwrap();
    let layers: Vec<&str> = rows.iter().map(|r| r.layer.as_str()).collect();
    assert_eq!(layers, ["1", "2"]);
    assert!(rows.iter().all(|r| r.mode == "all" && r.n_images == 12));

    // A second run refuses to overwrite unless forced.
    assert_eq!(run(&["ablate", "--config", &config, "--layers", "1"]), 1);
    assert_eq!(run(&["ablate", "--config", &config, "--layers", "1", "--force"]), 0);
    assert_eq!(read_reports_csv(&path).unwrap().len(), 1);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = toy(dir.path());
    assert_eq!(run(&["trace", "--config", &config]), 0);
    // The file lists every layer; the flag narrows effects to one.
    assert!(cfg.layers.len() > 1);
    assert_eq!(run(&["effects", "--config", &config, "--layers", "0"]), 0);
    let effects = cfg.effects_dir();
    let mut written: Vec<_> = std::fs::read_dir(&effects)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    written.sort();
    assert_eq!(written, ["layer_00"]);
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = toy(dir.path());
    // Effects before trace: the trace container does not exist.
    assert_eq!(run(&["effects", "--config", &config]), 2);
    // Valid classes but no fitted directions yet.
    assert_eq!(run(&["spurious", "--config", &config]), 2);
    // An unknown class name is invalid input, not a filesystem failure.
    assert_eq!(run(&["spurious", "--config", &config, "--class-a", "nope"]), 1);
}
