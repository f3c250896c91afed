//! The pipeline stages behind the command-line subcommands.
//!
//! Each stage reads its inputs from the paths in a [`RunConfig`] and writes
//! its outputs under `config.out` (see the table in [`crate::config`]).
//! Existing outputs are only replaced when `force` is set; a replaced output
//! directory is removed first so no stale files survive.

use std::path::{Path, PathBuf};

use log::info;
use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::apps::concepts::{discover_concepts_layers, percentile_table};
use crate::apps::metrics::{segmentation_metrics, SegMetrics};
use crate::apps::mining::{
    classification_direction, contribution_scores, select_neurons_by_direction,
};
use crate::apps::segment::{self, Heatmap};
use crate::apps::write_ranking;
use crate::config::{layer_dir, RunConfig};
use crate::container::TensorMap;
use crate::effects::{second_order, EffectOptions, SecondOrderField, Storage};
use crate::engine::{forward_batch, generate_toy, random_images, ActivationTrace};
use crate::error::{Error, Result};
use crate::eval::{
    classify, labels_from_map, labels_to_tensor, run_ablation, write_reports_csv, AblationConfig,
    AblationInputs, AblationMode, ClassSet, ROLE_CLASS_LABELS,
};
use crate::rank1::{self, NeuronDirection, Rank1Options};
use crate::sparse::{decompose_layer, read_codes, write_codes, SparseCode, TextPool};
use crate::spec::ModelSpec;
use crate::weights::WeightBundle;

pub const ROLE_IMAGES: &str = "inputs.images";
pub const ROLE_MASKS: &str = "masks.ground_truth";
pub const ROLE_SEGMENT_DEGENERATE: &str = "segment.degenerate";

/// Output locations that are not configurable.
pub fn spurious_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("spurious")
}
pub fn discover_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("discover")
}
pub fn segment_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("segment")
}
pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("metrics.json")
}
pub fn ablation_path(cfg: &RunConfig, mode: AblationMode) -> PathBuf {
    cfg.out.join(format!("ablation_{mode}.csv"))
}
pub fn codes_path(cfg: &RunConfig, layer: usize) -> PathBuf {
    cfg.codes_dir().join(format!("layer_{layer:02}.jsonl"))
}

/// Refuses to replace `path` unless `force`; with `force`, removes it.
fn claim(path: &Path, force: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(Error::arg(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    let removed = if path.is_dir() {
        std::fs::remove_dir_all(path)
    } else {
        std::fs::remove_file(path)
    };
    removed.map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn check_layers(cfg: &RunConfig, spec: &ModelSpec) -> Result<()> {
    if cfg.layers.is_empty() {
        return Err(Error::Config("`layers` is empty".into()));
    }
    for &l in &cfg.layers {
        if l >= spec.layers {
            return Err(Error::Config(format!(
                "layer {l} does not exist in a {}-layer model",
                spec.layers
            )));
        }
    }
    Ok(())
}

pub fn load_weights(cfg: &RunConfig) -> Result<WeightBundle> {
    WeightBundle::load(&cfg.weights_dir(), cfg.model.as_ref())
}

pub fn load_images(cfg: &RunConfig, spec: &ModelSpec) -> Result<Array4<f32>> {
    let dir = cfg.images_dir();
    let mut map = TensorMap::read(&dir)?;
    let images = map
        .take(ROLE_IMAGES)?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::container(ROLE_IMAGES, "expected images × 3 × S × S"))?;
    let (_, c, h, w) = images.dim();
    if (c, h, w) != (3, spec.image_size, spec.image_size) {
        return Err(Error::Shape {
            name: ROLE_IMAGES.into(),
            expected: vec![images.len_of(Axis(0)), 3, spec.image_size, spec.image_size],
            found: images.shape().to_vec(),
        });
    }
    Ok(images)
}

pub fn load_trace(cfg: &RunConfig, spec: &ModelSpec) -> Result<ActivationTrace> {
    ActivationTrace::from_tensor_map(&TensorMap::read(&cfg.traces_dir())?, spec)
}

pub fn load_field(cfg: &RunConfig, layer: usize) -> Result<SecondOrderField> {
    SecondOrderField::from_tensor_map(&TensorMap::read(&layer_dir(&cfg.effects_dir(), layer))?)
}

pub fn load_directions(cfg: &RunConfig, layer: usize) -> Result<Vec<NeuronDirection>> {
    rank1::from_tensor_map(&TensorMap::read(&layer_dir(&cfg.directions_dir(), layer))?)
}

pub fn load_pool(cfg: &RunConfig) -> Result<TextPool> {
    TextPool::from_tensor_map(&TensorMap::read(&cfg.pool_dir())?)
}

pub fn load_classes(cfg: &RunConfig) -> Result<(ClassSet, Vec<usize>)> {
    let map = TensorMap::read(&cfg.classes_dir())?;
    let classes = ClassSet::from_tensor_map(&map)?;
    let labels = labels_from_map(&map)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(Error::container(
            ROLE_CLASS_LABELS,
            format!("label {bad} but only {} classes", classes.len()),
        ));
    }
    Ok((classes, labels))
}

pub fn load_codes(cfg: &RunConfig, layer: usize, pool: &TextPool) -> Result<Vec<SparseCode>> {
    read_codes(&codes_path(cfg, layer), pool)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Writes a complete toy fixture (weights, images, classes with labels, a
/// phrase pool, ground-truth masks) and a `config.json` with stage
/// parameters scaled to it.
///
/// Labels are the model's own zero-shot predictions, so baseline accuracy is
/// 100% and ablations measure how far predictions move.
pub fn gen_toy(cfg: &RunConfig, force: bool) -> Result<()> {
    let spec = cfg.model.unwrap_or_else(ModelSpec::toy);
    spec.validate()?;
    let outputs = [
        cfg.weights_dir(),
        cfg.images_dir(),
        cfg.classes_dir(),
        cfg.pool_dir(),
        cfg.masks_dir(),
        cfg.out.join("config.json"),
    ];
    for p in &outputs {
        claim(p, force)?;
    }
    create_dir(&cfg.out)?;

    let weights = generate_toy(cfg.seed, &spec);
    let images = random_images(cfg.seed.wrapping_add(1), &spec, cfg.toy_images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let class_emb = normal_matrix(&mut rng, cfg.toy_classes, spec.d_out);
    let pool_emb = normal_matrix(&mut rng, cfg.toy_pool, spec.d_out);

    let names: Vec<String> = (0..cfg.toy_classes).map(|c| format!("class_{c}")).collect();
    let classes = ClassSet::new(names, class_emb)?;
    let trace = forward_batch(&weights, images.view())?;
    let labels: Vec<usize> = classify(trace.representation.view(), &classes)
        .into_iter()
        .map(|p| p.unwrap_or(0))
        .collect();

    // foreground: pixels brighter than the image's median brightness
    let size = spec.image_size;
    let mut masks = Array3::<f32>::zeros((cfg.toy_images, size, size));
    for (i, img) in images.outer_iter().enumerate() {
        let brightness = img.mean_axis(Axis(0)).expect("3 channels");
        let mut sorted: Vec<f32> = brightness.iter().copied().collect();
        sorted.sort_by(f32::total_cmp);
        let median = sorted[sorted.len() / 2];
        masks
            .slice_mut(s![i, .., ..])
            .assign(&brightness.mapv(|v| (v >= median) as u8 as f32));
    }

    weights.save(&cfg.weights_dir())?;
    let mut m = TensorMap::new();
    m.insert(ROLE_IMAGES, images.into_dyn());
    m.write(&cfg.images_dir())?;
    let mut m = classes.to_tensor_map();
    m.insert(ROLE_CLASS_LABELS, labels_to_tensor(&labels));
    m.write(&cfg.classes_dir())?;
    let phrases = (0..cfg.toy_pool)
        .map(|j| format!("phrase_{j:03}"))
        .collect();
    TextPool::new(phrases, pool_emb)?
        .to_tensor_map()
        .write(&cfg.pool_dir())?;
    let mut m = TensorMap::new();
    m.insert(ROLE_MASKS, masks.into_dyn());
    m.write(&cfg.masks_dir())?;

    let toy = toy_config(cfg, &spec);
    let path = cfg.out.join("config.json");
    std::fs::write(&path, toy.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    info!(
        "wrote toy fixture with {} images to {}",
        cfg.toy_images,
        cfg.out.display()
    );
    Ok(())
}

/// `cfg` with stage parameters that fit a small model and image set.
pub fn toy_config(cfg: &RunConfig, spec: &ModelSpec) -> RunConfig {
    let neurons = spec.mlp_width * spec.layers.saturating_sub(1);
    RunConfig {
        layers: (0..spec.layers.saturating_sub(1)).collect(),
        m: 8.min(spec.d_out).min(cfg.toy_pool),
        support_size: 16.min(cfg.toy_images).max(2),
        k: 20.min(neurons).max(1),
        q: 4.min(cfg.toy_images),
        segment_k: 20.min(neurons).max(1),
        class_a: Some("class_0".into()),
        class_b: Some("class_1".into()),
        ..cfg.clone()
    }
}

pub fn trace(cfg: &RunConfig, force: bool) -> Result<()> {
    let w = load_weights(cfg)?;
    let images = load_images(cfg, &w.spec)?;
    let out = cfg.traces_dir();
    claim(&out, force)?;
    let trace = forward_batch(&w, images.view())?;
    trace.to_tensor_map().write(&out)?;
    info!("traced {} images into {}", trace.images(), out.display());
    Ok(())
}

pub fn effect_options(cfg: &RunConfig) -> EffectOptions {
    EffectOptions {
        bias_shares: cfg.bias_shares,
        storage: cfg.top_q_storage.map_or(Storage::Full, Storage::TopQ),
    }
}

pub fn effects(cfg: &RunConfig, force: bool) -> Result<()> {
    let w = load_weights(cfg)?;
    check_layers(cfg, &w.spec)?;
    let trace = load_trace(cfg, &w.spec)?;
    let opts = effect_options(cfg);
    let neurons: Vec<usize> = (0..w.spec.mlp_width).collect();
    for &layer in &cfg.layers {
        let out = layer_dir(&cfg.effects_dir(), layer);
        claim(&out, force)?;
        let field = second_order(&w, &trace, layer, &neurons, &opts)?;
        field.to_tensor_map().write(&out)?;
        info!(
            "layer {layer}: second-order effects of {} neurons",
            neurons.len()
        );
    }
    Ok(())
}

pub fn rank1_options(cfg: &RunConfig) -> Rank1Options {
    Rank1Options {
        support_size: cfg.support_size,
        ..Rank1Options::default()
    }
}

pub fn rank1(cfg: &RunConfig, force: bool) -> Result<()> {
    let opts = rank1_options(cfg);
    for &layer in &cfg.layers {
        let field = load_field(cfg, layer)?;
        let out = layer_dir(&cfg.directions_dir(), layer);
        claim(&out, force)?;
        let dirs = rank1::fit_layer(&field, &opts)?;
        rank1::to_tensor_map(&dirs)?.write(&out)?;
        let ve = dirs.iter().map(|d| d.variance_explained).sum::<f64>() / dirs.len().max(1) as f64;
        info!("layer {layer}: mean variance explained {:.1}%", 100.0 * ve);
    }
    Ok(())
}

pub fn decompose(cfg: &RunConfig, force: bool) -> Result<()> {
    let pool = load_pool(cfg)?;
    create_dir(&cfg.codes_dir())?;
    for &layer in &cfg.layers {
        let dirs = load_directions(cfg, layer)?;
        let out = codes_path(cfg, layer);
        claim(&out, force)?;
        let codes = decompose_layer(&dirs, &pool, cfg.m)?;
        write_codes(&out, &codes)?;
        info!(
            "layer {layer}: {} sparse codes with {} atoms",
            codes.len(),
            cfg.m
        );
    }
    Ok(())
}

fn all_directions(cfg: &RunConfig) -> Result<Vec<NeuronDirection>> {
    let mut all = Vec::new();
    for &layer in &cfg.layers {
        all.extend(load_directions(cfg, layer)?);
    }
    Ok(all)
}

pub fn spurious(cfg: &RunConfig, force: bool) -> Result<()> {
    let (a, b) = match (&cfg.class_a, &cfg.class_b) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Config(
                "spurious mining needs `class_a` and `class_b`".into(),
            ))
        }
    };
    let (classes, _) = load_classes(cfg)?;
    let find = |name: &str| {
        classes
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown class {name:?}")))
    };
    let (ia, ib) = (find(a)?, find(b)?);
    let (v, degenerate) = classification_direction(&classes.embedding(ia), &classes.embedding(ib));
    if degenerate {
        return Err(Error::arg(format!(
            "classes {a:?} and {b:?} have identical embeddings"
        )));
    }
    let pool = load_pool(cfg)?;
    let directions = all_directions(cfg)?;
    let mut codes = Vec::new();
    for &layer in &cfg.layers {
        codes.extend(load_codes(cfg, layer, &pool)?);
    }
    let selected = select_neurons_by_direction(&directions, &v, cfg.k)?;
    let mut ranking = contribution_scores(&selected, &directions, &codes, &v)?;
    ranking.truncate(cfg.spurious_top);
    let dir = spurious_dir(cfg);
    create_dir(&dir)?;
    let out = dir.join(format!("{a}__{b}.jsonl"));
    claim(&out, force)?;
    write_ranking(&out, &ranking, &pool)?;
    info!("{a} -> {b}: {} phrases", ranking.entries.len());
    Ok(())
}

pub fn discover(cfg: &RunConfig, force: bool) -> Result<()> {
    let pool = load_pool(cfg)?;
    let mut layers = Vec::new();
    for &layer in &cfg.layers {
        let field = load_field(cfg, layer)?;
        let table = percentile_table(&field, cfg.percentile, cfg.percentile_mode)?;
        let codes = load_codes(cfg, layer, &pool)?;
        layers.push((field, table, codes));
    }
    let images = layers.first().map_or(0, |(f, _, _)| f.images());
    let selected: Vec<usize> = if cfg.discover_images.is_empty() {
        (0..images).collect()
    } else {
        cfg.discover_images.clone()
    };
    let dir = discover_dir(cfg);
    claim(&dir, force)?;
    create_dir(&dir)?;
    let views: Vec<(&SecondOrderField, &[f32], &[SparseCode])> = layers
        .iter()
        .map(|(f, t, c)| (f, t.as_slice(), c.as_slice()))
        .collect();
    for img in selected {
        let mut ranking = discover_concepts_layers(&views, img)?;
        ranking.truncate(cfg.discover_top);
        write_ranking(&dir.join(format!("image_{img:04}.jsonl")), &ranking, &pool)?;
    }
    Ok(())
}

/// Heatmaps for every traced image.
pub fn segment_images(cfg: &RunConfig, spec: &ModelSpec) -> Result<Vec<Heatmap>> {
    let trace = load_trace(cfg, spec)?;
    let (classes, labels) = load_classes(cfg)?;
    if labels.len() != trace.images() {
        return Err(Error::arg(format!(
            "{} labels for {} traced images",
            labels.len(),
            trace.images()
        )));
    }
    let fixed = match &cfg.segment_class {
        Some(name) => Some(
            classes
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("unknown class {name:?}")))?,
        ),
        None => None,
    };
    let directions = all_directions(cfg)?;
    (0..trace.images())
        .map(|img| {
            let class = fixed.unwrap_or(labels[img]);
            segment::segment(
                &trace,
                spec,
                img,
                &directions,
                &classes.embedding(class),
                cfg.segment_k,
                cfg.threshold,
            )
        })
        .collect()
}

pub fn heatmaps_to_tensor_map(maps: &[Heatmap]) -> TensorMap {
    let stack = |f: &dyn Fn(&Heatmap) -> Array2<f32>| {
        let views: Vec<Array2<f32>> = maps.iter().map(f).collect();
        let views: Vec<_> = views.iter().map(|a| a.view()).collect();
        ndarray::stack(Axis(0), &views)
            .expect("heatmaps share a shape")
            .into_dyn()
    };
    let mut m = TensorMap::new();
    m.insert(segment::ROLE_GRID, stack(&|h| h.grid.clone()));
    m.insert(segment::ROLE_UPSAMPLED, stack(&|h| h.upsampled.clone()));
    m.insert(
        segment::ROLE_MASK,
        stack(&|h| h.mask.mapv(|b| b as u8 as f32)),
    );
    m.insert(
        ROLE_SEGMENT_DEGENERATE,
        Array1::from_iter(maps.iter().map(|h| h.degenerate as u8 as f32)).into_dyn(),
    );
    m.metadata.insert(
        "threshold".into(),
        serde_json::json!(maps.first().map_or(0.5, |h| h.threshold)),
    );
    m
}

pub fn heatmaps_from_tensor_map(map: &TensorMap) -> Result<Vec<Heatmap>> {
    let get3 = |name: &str| -> Result<Array3<f32>> {
        map.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::container(name, "expected a stack of maps"))
    };
    let grid = get3(segment::ROLE_GRID)?;
    let up = get3(segment::ROLE_UPSAMPLED)?;
    let mask = get3(segment::ROLE_MASK)?;
    let degenerate = map.get(ROLE_SEGMENT_DEGENERATE)?;
    let threshold = map
        .metadata
        .get("threshold")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::container("threshold", "missing from segment metadata"))?
        as f32;
    let n = grid.len_of(Axis(0));
    if up.len_of(Axis(0)) != n || mask.dim() != up.dim() || degenerate.len() != n {
        return Err(Error::container(
            segment::ROLE_MASK,
            "heatmap tensors disagree in size",
        ));
    }
    Ok((0..n)
        .map(|i| Heatmap {
            grid: grid.index_axis(Axis(0), i).to_owned(),
            upsampled: up.index_axis(Axis(0), i).to_owned(),
            mask: mask.index_axis(Axis(0), i).mapv(|v| v != 0.0),
            threshold,
            degenerate: degenerate[i] != 0.0,
        })
        .collect())
}

pub fn segment(cfg: &RunConfig, force: bool) -> Result<()> {
    let w = load_weights(cfg)?;
    check_layers(cfg, &w.spec)?;
    let dir = segment_dir(cfg);
    claim(&dir, force)?;
    let maps = segment_images(cfg, &w.spec)?;
    heatmaps_to_tensor_map(&maps).write(&dir.join("heatmaps"))?;
    for (i, h) in maps.iter().enumerate() {
        segment::write_heatmap_pgm(&dir.join(format!("image_{i:04}_heat.pgm")), &h.upsampled)?;
        segment::write_mask_pgm(&dir.join(format!("image_{i:04}_mask.pgm")), &h.mask)?;
    }
    let flat = maps.iter().filter(|h| h.degenerate).count();
    info!(
        "segmented {} images ({flat} with a constant map)",
        maps.len()
    );
    Ok(())
}

pub fn load_masks(cfg: &RunConfig) -> Result<Vec<Array2<bool>>> {
    let map = TensorMap::read(&cfg.masks_dir())?;
    let masks: Array3<f32> = map
        .get(ROLE_MASKS)?
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::container(ROLE_MASKS, "expected images × S × S"))?;
    Ok(masks.outer_iter().map(|m| m.mapv(|v| v != 0.0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub pixel_acc: f64,
    pub miou: f64,
    pub map: Option<f64>,
    pub images: usize,
    pub ap_images: usize,
}

impl From<SegMetrics> for MetricsRecord {
    fn from(m: SegMetrics) -> Self {
        MetricsRecord {
            pixel_acc: m.pixel_acc,
            miou: m.miou,
            map: m.map,
            images: m.images,
            ap_images: m.ap_images,
        }
    }
}

pub fn metrics(cfg: &RunConfig, force: bool) -> Result<()> {
    let maps = heatmaps_from_tensor_map(&TensorMap::read(&segment_dir(cfg).join("heatmaps"))?)?;
    let masks = load_masks(cfg)?;
    let m = segmentation_metrics(&maps, &masks)?;
    let out = metrics_path(cfg);
    claim(&out, force)?;
    let text =
        serde_json::to_string_pretty(&MetricsRecord::from(m)).expect("metrics serialize") + "\n";
    std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    info!(
        "pixel acc {:.2}, mIoU {:.2}, mAP {:?}",
        m.pixel_acc, m.miou, m.map
    );
    Ok(())
}

/// One report row per configured layer, each layer ablated on its own.
pub fn ablate(cfg: &RunConfig, force: bool) -> Result<()> {
    let mode: AblationMode = cfg
        .ablation_mode
        .parse()
        .map_err(|e: Error| Error::Config(e.to_string()))?;
    let w = load_weights(cfg)?;
    check_layers(cfg, &w.spec)?;
    let trace = load_trace(cfg, &w.spec)?;
    let (classes, labels) = load_classes(cfg)?;
    let images = match mode {
        AblationMode::Indirect => Some(load_images(cfg, &w.spec)?),
        _ => None,
    };
    let means = trace.per_token_means();
    let out = ablation_path(cfg, mode);
    claim(&out, force)?;
    let mut reports = Vec::new();
    for &layer in &cfg.layers {
        let needs_field = !matches!(mode, AblationMode::FirstOrderMsa | AblationMode::Indirect);
        let fields = if needs_field {
            vec![load_field(cfg, layer)?]
        } else {
            Vec::new()
        };
        let directions = if mode == AblationMode::Pc1Reconstruction {
            load_directions(cfg, layer)?
        } else {
            Vec::new()
        };
        let inputs = AblationInputs {
            trace: &trace,
            classes: &classes,
            labels: &labels,
            fields: &fields,
            directions: &directions,
            weights: Some(&w),
            images: images.as_ref().map(|i| i.view()),
            per_token_means: Some(&means),
        };
        let config = AblationConfig {
            layers: vec![layer],
            mode,
            q: cfg.q,
        };
        let report = run_ablation(&config, &inputs)?;
        info!(
            "layer {layer} {mode}: {:.2} -> {:.2}",
            report.baseline_acc, report.ablated_acc
        );
        reports.push(report);
    }
    write_reports_csv(&out, &reports)
}
