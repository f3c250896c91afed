//! Concept discovery for a single image: which phrases describe the neurons
//! whose second-order effect is unusually large on it.

use std::collections::{BTreeMap, HashMap};

use super::{PhraseRanking, RankingContext};
use crate::effects::SecondOrderField;
use crate::error::{Error, Result};
use crate::sparse::SparseCode;

pub const DEFAULT_PERCENTILE: f64 = 98.0;
pub const DEFAULT_TOP: usize = 10;

/// Whether the activation threshold is computed per neuron or shared by all
/// neurons of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileMode {
    #[default]
    PerNeuron,
    Global,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f32], pct: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::arg("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::arg(format!("percentile {pct} outside [0, 100]")));
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok((sorted[lo] + (sorted[hi] - sorted[lo]) * frac) as f32)
}

/// Threshold per neuron column of `reference`, computed over its images.
pub fn percentile_table(
    reference: &SecondOrderField,
    pct: f64,
    mode: PercentileMode,
) -> Result<Vec<f32>> {
    let n = reference.neurons.len();
    match mode {
        PercentileMode::PerNeuron => (0..n)
            .map(|c| percentile(&reference.norms.column(c).to_vec(), pct))
            .collect(),
        PercentileMode::Global => {
            let all: Vec<f32> = reference.norms.iter().copied().collect();
            Ok(vec![percentile(&all, pct)?; n])
        }
    }
}

/// Neurons (columns) whose norm on `image` strictly exceeds their threshold.
pub fn activated(field: &SecondOrderField, thresholds: &[f32], image: usize) -> Result<Vec<usize>> {
    if thresholds.len() != field.neurons.len() {
        return Err(Error::arg(format!(
            "{} thresholds for {} neurons",
            thresholds.len(),
            field.neurons.len()
        )));
    }
    if image >= field.images() {
        return Err(Error::OutOfRange {
            what: "image",
            index: image,
            limit: field.images(),
        });
    }
    Ok((0..field.neurons.len())
        .filter(|&c| field.norms[[image, c]] > thresholds[c])
        .collect())
}

/// `w_j = Σ_{n activated} γ_j^n ‖φ_n(I)‖`, full ranking (truncate for top-k).
pub fn discover_concepts(
    field: &SecondOrderField,
    thresholds: &[f32],
    codes: &[SparseCode],
    image: usize,
) -> Result<PhraseRanking> {
    let mut scores = BTreeMap::new();
    accumulate(field, thresholds, codes, image, &mut scores)?;
    Ok(PhraseRanking::from_scores(
        scores,
        RankingContext::Image(image),
    ))
}

/// Same as [`discover_concepts`], summing phrase scores over several layers.
pub fn discover_concepts_layers(
    layers: &[(&SecondOrderField, &[f32], &[SparseCode])],
    image: usize,
) -> Result<PhraseRanking> {
    let mut scores = BTreeMap::new();
    for (field, thresholds, codes) in layers {
        accumulate(field, thresholds, codes, image, &mut scores)?;
    }
    Ok(PhraseRanking::from_scores(
        scores,
        RankingContext::Image(image),
    ))
}

fn accumulate(
    field: &SecondOrderField,
    thresholds: &[f32],
    codes: &[SparseCode],
    image: usize,
    scores: &mut BTreeMap<usize, f64>,
) -> Result<()> {
    let by_neuron: HashMap<usize, &SparseCode> = codes
        .iter()
        .filter(|c| c.layer == field.layer)
        .map(|c| (c.neuron, c))
        .collect();
    for col in activated(field, thresholds, image)? {
        let neuron = field.neurons[col];
        let code = by_neuron.get(&neuron).ok_or_else(|| {
            Error::arg(format!(
                "no sparse code for layer {} neuron {neuron}",
                field.layer
            ))
        })?;
        let norm = field.norms[[image, col]] as f64;
        for (&j, &g) in code.indices.iter().zip(&code.gamma) {
            *scores.entry(j).or_insert(0.0) += g * norm;
        }
    }
    Ok(())
}
