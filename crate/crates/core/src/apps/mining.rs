//! Mining phrases that push a classifier from one class toward another.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array1;

use super::{PhraseRanking, RankingContext};
use crate::error::{Error, Result};
use crate::rank1::NeuronDirection;
use crate::sparse::SparseCode;

/// A neuron picked by [`select_neurons_by_direction`] with its `|⟨v, r⟩|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedNeuron {
    pub layer: usize,
    pub neuron: usize,
    pub score: f64,
}

/// Top-`k` neurons by `|⟨v, r⟩|`; ties go to the lower (layer, neuron).
pub fn select_neurons_by_direction(
    directions: &[NeuronDirection],
    v: &Array1<f64>,
    k: usize,
) -> Result<Vec<SelectedNeuron>> {
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    if k > directions.len() {
        return Err(Error::arg(format!(
            "k = {k} exceeds the {} directions",
            directions.len()
        )));
    }
    let mut scored: Vec<SelectedNeuron> = directions
        .iter()
        .map(|d| SelectedNeuron {
            layer: d.layer,
            neuron: d.neuron,
            score: d.r.dot(v).abs(),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.neuron.cmp(&b.neuron))
    });
    scored.truncate(k);
    Ok(scored)
}

/// `w_j = Σ_{n∈N} γ_j^n ⟨v, r_n⟩` for every phrase used by some selected
/// neuron's code.
pub fn contribution_scores(
    selected: &[SelectedNeuron],
    directions: &[NeuronDirection],
    codes: &[SparseCode],
    v: &Array1<f64>,
) -> Result<PhraseRanking> {
    let dirs: HashMap<(usize, usize), &NeuronDirection> = directions
        .iter()
        .map(|d| ((d.layer, d.neuron), d))
        .collect();
    let codes: HashMap<(usize, usize), &SparseCode> =
        codes.iter().map(|c| ((c.layer, c.neuron), c)).collect();
    let mut scores = BTreeMap::new();
    for s in selected {
        let key = (s.layer, s.neuron);
        let dir = dirs.get(&key).ok_or_else(|| {
            Error::arg(format!(
                "no direction for layer {} neuron {}",
                s.layer, s.neuron
            ))
        })?;
        let code = codes.get(&key).ok_or_else(|| {
            Error::arg(format!(
                "no sparse code for layer {} neuron {}",
                s.layer, s.neuron
            ))
        })?;
        let weight = dir.r.dot(v);
        for (&j, &g) in code.indices.iter().zip(&code.gamma) {
            *scores.entry(j).or_insert(0.0) += g * weight;
        }
    }
    Ok(PhraseRanking::from_scores(
        scores,
        RankingContext::Direction(v.clone()),
    ))
}

/// `v = e_b − e_a`: the direction that moves a representation from class `a`
/// toward class `b`. The flag is set when `v` is zero.
pub fn classification_direction(
    class_a: &Array1<f64>,
    class_b: &Array1<f64>,
) -> (Array1<f64>, bool) {
    let v = class_b - class_a;
    let degenerate = v.iter().all(|&x| x == 0.0);
    (v, degenerate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dir(layer: usize, neuron: usize, r: Array1<f64>) -> NeuronDirection {
        NeuronDirection {
            layer,
            neuron,
            b: Array1::zeros(r.len()),
            r,
            variance_explained: 1.0,
            support_size: 2,
            degenerate: false,
        }
    }

    fn code(layer: usize, neuron: usize, indices: Vec<usize>, gamma: Vec<f64>) -> SparseCode {
        SparseCode {
            layer,
            neuron,
            indices,
            gamma,
            r_hat: Array1::zeros(2),
            residual_norm: 0.0,
            rank_deficient: false,
        }
    }

    #[test]
    fn orthogonal_v_uses_index_order() {
        let dirs = vec![
            dir(1, 4, array![1.0, 0.0]),
            dir(0, 9, array![1.0, 0.0]),
            dir(0, 2, array![-1.0, 0.0]),
        ];
        let sel = select_neurons_by_direction(&dirs, &array![0.0, 1.0], 2).unwrap();
        assert!(sel.iter().all(|s| s.score == 0.0));
        assert_eq!(
            sel.iter().map(|s| (s.layer, s.neuron)).collect::<Vec<_>>(),
            vec![(0, 2), (0, 9)]
        );
    }

    #[test]
    fn parallel_direction_selected() {
        let dirs = vec![dir(0, 0, array![0.0, 1.0]), dir(0, 1, array![1.0, 0.0])];
        let sel = select_neurons_by_direction(&dirs, &array![3.0, 0.0], 1).unwrap();
        assert_eq!(sel[0].neuron, 1);
        assert!(select_neurons_by_direction(&dirs, &array![3.0, 0.0], 0).is_err());
        assert!(select_neurons_by_direction(&dirs, &array![3.0, 0.0], 3).is_err());
    }

    #[test]
    fn hand_ranked_top_three() {
        let s = 0.5f64.sqrt();
        let dirs = vec![
            dir(0, 0, array![1.0, 0.0]),   // |<v,r>| = 0.6
            dir(0, 1, array![0.0, 1.0]),   // 0.8
            dir(0, 2, array![s, s]),       // 0.98995
            dir(0, 3, array![s, -s]),      // 0.14142
            dir(0, 4, array![-0.6, -0.8]), // 1.0
        ];
        let v = array![0.6, 0.8];
        let sel = select_neurons_by_direction(&dirs, &v, 3).unwrap();
        assert_eq!(
            sel.iter().map(|s| s.neuron).collect::<Vec<_>>(),
            vec![4, 2, 1]
        );
        let scaled = select_neurons_by_direction(&dirs, &(&v * 7.0), 3).unwrap();
        assert_eq!(
            scaled.iter().map(|s| s.neuron).collect::<Vec<_>>(),
            sel.iter().map(|s| s.neuron).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_selection_empty_ranking() {
        let r = contribution_scores(&[], &[], &[], &array![1.0, 0.0]).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn single_neuron_half_weight() {
        let d = dir(0, 0, array![0.5, 0.75f64.sqrt()]);
        let v = array![1.0, 0.0];
        let sel = vec![SelectedNeuron {
            layer: 0,
            neuron: 0,
            score: 0.5,
        }];
        let r = contribution_scores(&sel, &[d], &[code(0, 0, vec![3], vec![1.0])], &v).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].phrase, 3);
        assert!((r.entries[0].score - 0.5).abs() < 1e-15);
    }

    #[test]
    fn overlapping_supports_hand_computed() {
        let dirs = vec![
            dir(0, 0, array![1.0, 0.0]),
            dir(0, 1, array![0.5, 0.3]),
            dir(1, 0, array![-2.0, 1.0]),
        ];
        let codes = vec![
            code(0, 0, vec![0, 1], vec![1.0, 2.0]),
            code(0, 1, vec![1, 2], vec![-4.0, 1.0]),
            code(1, 0, vec![0, 2], vec![0.5, 0.25]),
        ];
        let sel: Vec<_> = dirs
            .iter()
            .map(|d| SelectedNeuron {
                layer: d.layer,
                neuron: d.neuron,
                score: 0.0,
            })
            .collect();
        // <v, r> = 1.0, 0.8, -1.0
        let v = array![1.0, 1.0];
        let r = contribution_scores(&sel, &dirs, &codes, &v).unwrap();
        let expect = [(0usize, 1.0 - 0.5), (1, 2.0 - 3.2), (2, 0.8 - 0.25)];
        for (j, w) in expect {
            assert!((r.score_of(j).unwrap() - w).abs() < 1e-12, "phrase {j}");
        }
        assert_eq!(
            r.entries.iter().map(|e| e.phrase).collect::<Vec<_>>(),
            vec![2, 0, 1]
        );
        let missing = contribution_scores(&sel, &dirs, &codes[..2], &v);
        assert!(missing.is_err());
    }

    #[test]
    fn class_direction_properties() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        let (v, degenerate) = classification_direction(&a, &b);
        assert!(!degenerate);
        assert!((v.dot(&v).sqrt() - 2f64.sqrt()).abs() < 1e-15);
        let (w, _) = classification_direction(&b, &a);
        assert_eq!(w, -&v);
        assert!(classification_direction(&a, &a).1);
    }
}
