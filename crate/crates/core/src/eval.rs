//! Zero-shot classification and the mean-ablation experiments.
//!
//! Second-order ablations edit the output representation directly: φ is an
//! additive share of the representation, so replacing `φ_n(I)` by its mean
//! amounts to `rep − φ_n(I) + mean_n`. Only the indirect mode re-runs the
//! network.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::TensorMap;
use crate::effects::{top_by_norm, PhiStore, SecondOrderField};
use crate::engine::{forward_with_intervention, ActivationTrace, Intervention, LnSite};
use crate::error::{Error, Result};
use crate::rank1::{fit_rows, NeuronDirection, Rank1Options};
use crate::weights::WeightBundle;

pub const ROLE_CLASS_EMBEDDINGS: &str = "classes.embeddings";
pub const ROLE_CLASS_NAMES: &str = "classes.names";
pub const ROLE_CLASS_LABELS: &str = "classes.labels";

pub const DEFAULT_Q: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub names: Vec<String>,
    /// `C × d_out` text embeddings.
    pub embeddings: Array2<f32>,
}

impl ClassSet {
    pub fn new(names: Vec<String>, embeddings: Array2<f32>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::arg(format!(
                "a class set needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() != embeddings.nrows() {
            return Err(Error::arg(format!(
                "{} class names but {} embeddings",
                names.len(),
                embeddings.nrows()
            )));
        }
        for (i, row) in embeddings.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) || row.iter().all(|&v| v == 0.0) {
                return Err(Error::arg(format!(
                    "class embedding {i} ({}) is zero or not finite",
                    names[i]
                )));
            }
        }
        Ok(ClassSet { names, embeddings })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Index of a class by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn embedding(&self, class: usize) -> Array1<f64> {
        self.embeddings.row(class).mapv(f64::from)
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(ROLE_CLASS_EMBEDDINGS, self.embeddings.clone().into_dyn());
        m.insert_text(ROLE_CLASS_NAMES, self.names.clone());
        m
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let emb = map
            .get(ROLE_CLASS_EMBEDDINGS)?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::container(ROLE_CLASS_EMBEDDINGS, "expected a matrix"))?;
        let names = map.text(ROLE_CLASS_NAMES)?.to_vec();
        ClassSet::new(names, emb)
    }
}

/// Labels are stored as an `f32` vector of class indices.
pub fn labels_to_tensor(labels: &[usize]) -> ndarray::ArrayD<f32> {
    Array1::from_iter(labels.iter().map(|&l| l as f32)).into_dyn()
}

pub fn labels_from_map(map: &TensorMap) -> Result<Vec<usize>> {
    let t = map.get(ROLE_CLASS_LABELS)?;
    t.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::container(
                    ROLE_CLASS_LABELS,
                    format!("label {v} is not a class index"),
                ))
            }
        })
        .collect()
}

/// Class with the highest cosine similarity per representation (lowest index
/// on ties); `None` for zero or non-finite representations.
pub fn classify(representations: ArrayView2<'_, f32>, classes: &ClassSet) -> Vec<Option<usize>> {
    let emb: Vec<(Array1<f64>, f64)> = classes
        .embeddings
        .outer_iter()
        .map(|e| {
            let e = e.mapv(f64::from);
            let n = e.dot(&e).sqrt();
            (e, n)
        })
        .collect();
    representations
        .outer_iter()
        .map(|x| {
            let x = x.mapv(f64::from);
            let norm = x.dot(&x).sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return None;
            }
            let mut best = None;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, (e, en)) in emb.iter().enumerate() {
                let sim = x.dot(e) / (norm * en);
                if sim > best_sim {
                    best_sim = sim;
                    best = Some(c);
                }
            }
            best
        })
        .collect()
}

/// `100 · correct / scored`, where unscored (`None`) predictions are left out.
pub fn accuracy(predictions: &[Option<usize>], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let scored: Vec<(usize, usize)> = predictions
        .iter()
        .zip(labels)
        .filter_map(|(p, &l)| p.map(|p| (p, l)))
        .collect();
    if scored.is_empty() {
        return Err(Error::arg("accuracy of an empty prediction set"));
    }
    let correct = scored.iter().filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / scored.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// Every neuron of the layer, every image.
    All,
    /// Each neuron only on images outside its top-Q by norm.
    SmallNorm,
    /// Each neuron only on its top-Q images by norm.
    LargeNormTopQ,
    /// Replace φ by its projection onto the neuron's rank-1 line.
    Pc1Reconstruction,
    /// Patch activations to their per-token means and re-run the network.
    Indirect,
    /// Mean-ablate the direct contribution of the attention block.
    FirstOrderMsa,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::All,
        AblationMode::SmallNorm,
        AblationMode::LargeNormTopQ,
        AblationMode::Pc1Reconstruction,
        AblationMode::Indirect,
        AblationMode::FirstOrderMsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::All => "all",
            AblationMode::SmallNorm => "small_norm",
            AblationMode::LargeNormTopQ => "large_norm_topQ",
            AblationMode::Pc1Reconstruction => "pc1_reconstruction",
            AblationMode::Indirect => "indirect",
            AblationMode::FirstOrderMsa => "first_order_msa",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationMode::ALL.iter().map(|m| m.name()).collect();
                Error::arg(format!(
                    "unknown ablation mode {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Ablated together.
    pub layers: Vec<usize>,
    pub mode: AblationMode,
    pub q: usize,
}

impl AblationConfig {
    pub fn new(layers: Vec<usize>, mode: AblationMode) -> Self {
        AblationConfig {
            layers,
            mode,
            q: DEFAULT_Q,
        }
    }
}

/// Everything an ablation may read. Each mode checks for what it needs.
///
/// The per-neuron mean each φ is replaced by is `field.mean`; to ablate
/// toward a separate reference set, overwrite it with that set's mean.
#[derive(Clone, Copy)]
pub struct AblationInputs<'a> {
    /// Trace of the evaluation images; its representations are the baseline.
    pub trace: &'a ActivationTrace,
    pub classes: &'a ClassSet,
    pub labels: &'a [usize],
    /// Second-order fields of the evaluation images (any layers).
    pub fields: &'a [SecondOrderField],
    pub directions: &'a [NeuronDirection],
    pub weights: Option<&'a WeightBundle>,
    /// Evaluation images, for the indirect mode.
    pub images: Option<ArrayView4<'a, f32>>,
    /// `L × (K+1) × N` reference means, for the indirect mode.
    pub per_token_means: Option<&'a Array3<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Ablated layers joined with `+`.
    pub layer: String,
    pub mode: String,
    pub baseline_acc: f64,
    pub ablated_acc: f64,
    pub n_images: usize,
    pub n_neurons: usize,
}

fn field_for(fields: &[SecondOrderField], layer: usize) -> Result<&SecondOrderField> {
    fields
        .iter()
        .find(|f| f.layer == layer)
        .ok_or_else(|| Error::arg(format!("no second-order field for layer {layer}")))
}

/// Images in each neuron's top-`q` by norm (one set per field column).
fn top_sets(field: &SecondOrderField, q: usize) -> Result<Vec<HashSet<usize>>> {
    (0..field.neurons.len())
        .map(|col| match &field.store {
            PhiStore::Full(_) => Ok(top_by_norm(&field.norms.column(col).to_vec(), q)
                .into_iter()
                .collect()),
            PhiStore::TopQ { index, .. } => {
                if index.ncols() < q.min(field.images()) {
                    return Err(Error::arg(format!(
                        "field for layer {} stores {} effects per neuron, Q = {q} needed",
                        field.layer,
                        index.ncols()
                    )));
                }
                Ok(index.row(col).iter().take(q).copied().collect())
            }
        })
        .collect()
}

fn stored_phi(field: &SecondOrderField, img: usize, col: usize) -> Result<Array1<f64>> {
    field
        .phi(img, col)
        .map(|v| v.mapv(f64::from))
        .ok_or_else(|| {
            Error::arg(format!(
                "effect of neuron {} on image {img} is not stored (layer {})",
                field.neurons[col], field.layer
            ))
        })
}

/// Per-image additive edits for the second-order modes.
fn second_order_deltas(
    config: &AblationConfig,
    inputs: &AblationInputs<'_>,
) -> Result<Array2<f64>> {
    let b = inputs.trace.images();
    let d = inputs.trace.representation.ncols();
    let mut delta = Array2::<f64>::zeros((b, d));
    for &layer in &config.layers {
        let field = field_for(inputs.fields, layer)?;
        if field.images() != b || field.d_out() != d {
            return Err(Error::arg(format!(
                "field for layer {layer} does not match the evaluation trace"
            )));
        }
        let mean = field.mean.mapv(f64::from);
        let n = field.neurons.len();
        match config.mode {
            AblationMode::All => {
                if n == 0 {
                    continue;
                }
                let mean_total = mean.sum_axis(Axis(0));
                for img in 0..b {
                    let mut row = delta.row_mut(img);
                    row -= &field.phi_sum.row(img).mapv(f64::from);
                    row += &mean_total;
                }
            }
            AblationMode::LargeNormTopQ => {
                let top = top_sets(field, config.q)?;
                for (col, set) in top.iter().enumerate() {
                    for &img in set {
                        let phi = stored_phi(field, img, col)?;
                        let mut row = delta.row_mut(img);
                        row -= &phi;
                        row += &mean.row(col);
                    }
                }
            }
            AblationMode::SmallNorm => {
                let top = top_sets(field, config.q)?;
                let full = matches!(field.store, PhiStore::Full(_));
                let mean_total = mean.sum_axis(Axis(0));
                for img in 0..b {
                    let outside: Vec<usize> = (0..n).filter(|&c| !top[c].contains(&img)).collect();
                    if outside.is_empty() {
                        continue;
                    }
                    let mut row = delta.row_mut(img);
                    if full {
                        for &col in &outside {
                            row -= &stored_phi(field, img, col)?;
                            row += &mean.row(col);
                        }
                    } else {
                        // only the top-Q vectors are kept: ablate everything,
                        // then restore the neurons for which `img` is top-Q
                        row -= &field.phi_sum.row(img).mapv(f64::from);
                        row += &mean_total;
                        for col in (0..n).filter(|&c| top[c].contains(&img)) {
                            row += &stored_phi(field, img, col)?;
                            row -= &mean.row(col);
                        }
                    }
                }
            }
            AblationMode::Pc1Reconstruction => {
                let dirs: HashMap<usize, &NeuronDirection> = inputs
                    .directions
                    .iter()
                    .filter(|dir| dir.layer == layer)
                    .map(|dir| (dir.neuron, dir))
                    .collect();
                for (col, neuron) in field.neurons.iter().enumerate() {
                    let dir = dirs.get(neuron).ok_or_else(|| {
                        Error::arg(format!("no direction for layer {layer} neuron {neuron}"))
                    })?;
                    for img in 0..b {
                        let phi = stored_phi(field, img, col)?;
                        let x = (&phi - &dir.b).dot(&dir.r);
                        let mut row = delta.row_mut(img);
                        row.scaled_add(x, &dir.r);
                        row += &dir.b;
                        row -= &phi;
                    }
                }
            }
            AblationMode::Indirect | AblationMode::FirstOrderMsa => {
                unreachable!("not a second-order mode")
            }
        }
    }
    Ok(delta)
}

/// Direct effect of each configured MSA block, mean-ablated over the
/// evaluation images.
fn msa_deltas(config: &AblationConfig, inputs: &AblationInputs<'_>) -> Result<Array2<f64>> {
    let w = inputs
        .weights
        .ok_or_else(|| Error::arg("first_order_msa ablation needs the model weights"))?;
    let trace = inputs.trace;
    let post = LnSite::Post.index(&w.spec);
    let b = trace.images();
    let mut delta = Array2::<f64>::zeros((b, w.spec.d_out));
    let gain = (&w.proj * &w.ln_post_gamma.view().insert_axis(Axis(0))).mapv(f64::from);
    for &layer in &config.layers {
        if layer >= w.spec.layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: w.spec.layers,
            });
        }
        let mut direct = Array2::<f64>::zeros((b, w.spec.d_out));
        for img in 0..b {
            let sd = trace.ln_sigma[[img, post, 0]] as f64;
            let out = trace
                .msa_class_out
                .slice(ndarray::s![img, layer, ..])
                .mapv(|v| v as f64 / sd);
            direct.row_mut(img).assign(&gain.dot(&out));
        }
        let mean = direct.mean_axis(Axis(0)).expect("non-empty trace");
        delta -= &direct;
        delta += &mean;
    }
    Ok(delta)
}

fn indirect_representations(
    config: &AblationConfig,
    inputs: &AblationInputs<'_>,
) -> Result<Array2<f32>> {
    let w = inputs
        .weights
        .ok_or_else(|| Error::arg("indirect ablation needs the model weights"))?;
    let images = inputs
        .images
        .ok_or_else(|| Error::arg("indirect ablation needs the evaluation images"))?;
    let means = inputs
        .per_token_means
        .ok_or_else(|| Error::arg("indirect ablation needs per-token mean activations"))?;
    let mut interventions = Vec::new();
    for &layer in &config.layers {
        let neurons: Vec<usize> = match inputs.fields.iter().find(|f| f.layer == layer) {
            Some(f) => f.neurons.clone(),
            None => (0..w.spec.mlp_width).collect(),
        };
        for n in neurons {
            interventions.push(Intervention {
                layer,
                neuron: n,
                replacement: means.slice(ndarray::s![layer, .., n]).to_vec(),
            });
        }
    }
    let rows: Vec<Array1<f32>> = images
        .outer_iter()
        .into_par_iter()
        .map(|img| forward_with_intervention(w, img, &interventions))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), w.spec.d_out));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Representations of the evaluation images after the configured ablation.
pub fn ablated_representations(
    config: &AblationConfig,
    inputs: &AblationInputs<'_>,
) -> Result<Array2<f32>> {
    let base = &inputs.trace.representation;
    let delta = match config.mode {
        AblationMode::Indirect => return indirect_representations(config, inputs),
        AblationMode::FirstOrderMsa => msa_deltas(config, inputs)?,
        _ => second_order_deltas(config, inputs)?,
    };
    let mut out = base.clone();
    out.zip_mut_with(&delta, |r, &dv| {
        if dv != 0.0 {
            *r = (*r as f64 + dv) as f32;
        }
    });
    Ok(out)
}

fn ablated_count(config: &AblationConfig, inputs: &AblationInputs<'_>) -> usize {
    config
        .layers
        .iter()
        .map(
            |&l| match (config.mode, inputs.fields.iter().find(|f| f.layer == l)) {
                (AblationMode::FirstOrderMsa, _) => 0,
                (_, Some(f)) => f.neurons.len(),
                (_, None) => inputs.weights.map_or(0, |w| w.spec.mlp_width),
            },
        )
        .sum()
}

pub fn run_ablation(
    config: &AblationConfig,
    inputs: &AblationInputs<'_>,
) -> Result<AblationReport> {
    if inputs.labels.len() != inputs.trace.images() {
        return Err(Error::arg(format!(
            "{} labels for {} images",
            inputs.labels.len(),
            inputs.trace.images()
        )));
    }
    let baseline = accuracy(
        &classify(inputs.trace.representation.view(), inputs.classes),
        inputs.labels,
    )?;
    let ablated = ablated_representations(config, inputs)?;
    let ablated_acc = accuracy(&classify(ablated.view(), inputs.classes), inputs.labels)?;
    Ok(AblationReport {
        layer: config
            .layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("+"),
        mode: config.mode.to_string(),
        baseline_acc: baseline,
        ablated_acc,
        n_images: inputs.trace.images(),
        n_neurons: ablated_count(config, inputs),
    })
}

pub fn write_reports_csv(path: &Path, reports: &[AblationReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in reports {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<AblationReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Mean variance explained per layer, keyed by layer.
pub fn variance_explained_report(directions: &[NeuronDirection]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for d in directions {
        let e = acc.entry(d.layer).or_insert((0.0, 0));
        e.0 += d.variance_explained;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(l, (s, n))| (l, s / n as f64))
        .collect()
}

/// Variance explained by the leading direction of arbitrary per-image effect
/// vectors of one neuron (e.g. indirect effects), with the same support-set
/// protocol as the second-order fit.
pub fn effect_variance_explained(effects: &[Array1<f64>], opts: &Rank1Options) -> Result<f64> {
    if effects.is_empty() {
        return Err(Error::arg("no effects"));
    }
    let d = effects[0].len();
    let mut mean = Array1::<f64>::zeros(d);
    for e in effects {
        mean += e;
    }
    mean /= effects.len() as f64;
    let norms: Vec<f32> = effects.iter().map(|e| e.dot(e).sqrt() as f32).collect();
    let support: Vec<Array1<f64>> = top_by_norm(&norms, opts.support_size.min(effects.len()))
        .into_iter()
        .map(|i| effects[i].clone())
        .collect();
    Ok(fit_rows(&support, &mean, 0, 0, opts)?.variance_explained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn classes() -> ClassSet {
        ClassSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn predicts_matching_class() {
        let c = classes();
        let reps = array![
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 10.0],
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0]
        ];
        assert_eq!(
            classify(reps.view(), &c),
            vec![Some(2), Some(2), None, Some(0)]
        );
    }

    #[test]
    fn accuracy_arithmetic() {
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let all: Vec<_> = labels.iter().map(|&l| Some(l)).collect();
        assert_eq!(accuracy(&all, &labels).unwrap(), 100.0);
        let none: Vec<_> = labels.iter().map(|&l| Some((l + 1) % 3)).collect();
        assert_eq!(accuracy(&none, &labels).unwrap(), 0.0);
        let mut three = none.clone();
        for i in [0, 3, 5] {
            three[i] = Some(labels[i]);
        }
        assert_eq!(accuracy(&three, &labels).unwrap(), 37.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[None], &[0]).is_err());
    }

    #[test]
    fn class_set_validation() {
        assert!(ClassSet::new(vec!["a".into()], array![[1.0f32]]).is_err());
        assert!(ClassSet::new(vec!["a".into(), "b".into()], array![[1.0f32], [0.0]]).is_err());
        let c = classes();
        assert_eq!(ClassSet::from_tensor_map(&c.to_tensor_map()).unwrap(), c);
        assert_eq!(c.index_of("b"), Some(1));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("everything".parse::<AblationMode>().is_err());
    }

    #[test]
    fn layer_means() {
        let mk = |layer, ve| NeuronDirection {
            layer,
            neuron: 0,
            r: array![1.0],
            b: array![0.0],
            variance_explained: ve,
            support_size: 2,
            degenerate: false,
        };
        let r = variance_explained_report(&[mk(1, 0.5), mk(1, 1.0), mk(3, 0.2)]);
        assert_eq!(r.into_iter().collect::<Vec<_>>(), vec![(1, 0.75), (3, 0.2)]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let reports = vec![AblationReport {
            layer: "9".into(),
            mode: "all".into(),
            baseline_acc: 50.0,
            ablated_acc: 12.5,
            n_images: 8,
            n_neurons: 64,
        }];
        write_reports_csv(&p, &reports).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("layer,mode,baseline_acc,ablated_acc,n_images,n_neurons\n"));
        assert_eq!(read_reports_csv(&p).unwrap(), reports);
    }
}
