//! Drives every command-line stage on a toy model, exactly as the
//! `neuronscope` binary would, and lists what each stage wrote.

use neuronscope::cli::dispatch;

fn main() {
    let out = std::env::temp_dir().join(format!("neuronscope-pipeline-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&out);
    let out_s = out.to_str().expect("utf-8 temp dir");
    let config = out.join("config.json");
    let config_s = config.to_str().expect("utf-8 temp dir");

    let stages: &[&[&str]] = &[
        &["gen-toy", "--out", out_s],
        &["trace", "--config", config_s],
        &["effects", "--config", config_s],
        &["rank1", "--config", config_s],
        &["decompose", "--config", config_s],
        &["spurious", "--config", config_s],
        &["discover", "--config", config_s, "--discover-images", "0,1"],
        &["segment", "--config", config_s],
        &["metrics", "--config", config_s],
        &["ablate", "--config", config_s, "--mode", "small_norm"],
    ];
    for args in stages {
        let code = dispatch(std::iter::once("neuronscope").chain(args.iter().copied()));
        println!("{:<10} exit {code}", args[0]);
        if code != 0 {
            std::process::exit(code);
        }
    }
    let mut entries: Vec<_> = std::fs::read_dir(&out)
        .expect("output dir")
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    entries.sort();
    println!("{}: {}", out.display(), entries.join(" "));
    println!(
        "{}",
        std::fs::read_to_string(out.join("metrics.json")).unwrap_or_default()
    );
    std::fs::remove_dir_all(&out).ok();
}
