//! Property tests for scale and threshold invariants of the applications.

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use neuronscope::apps::concepts::percentile;
use neuronscope::apps::metrics::average_precision;
use neuronscope::apps::mining::{contribution_scores, select_neurons_by_direction};
use neuronscope::apps::segment::Heatmap;
use neuronscope::eval::{classify, ClassSet};
use neuronscope::rank1::NeuronDirection;
use neuronscope::sparse::SparseCode;

const D: usize = 5;

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

fn direction(i: usize, r: Vec<f64>) -> NeuronDirection {
    NeuronDirection {
        layer: i % 2,
        neuron: i,
        r: Array1::from(r),
        b: Array1::zeros(D),
        variance_explained: 1.0,
        support_size: 2,
        degenerate: false,
    }
}

fn code(i: usize, indices: Vec<usize>, gamma: Vec<f64>) -> SparseCode {
    SparseCode {
        layer: i % 2,
        neuron: i,
        indices,
        gamma,
        r_hat: Array1::zeros(D),
        residual_norm: 0.0,
        rank_deficient: false,
    }
}

proptest! {
    #[test]
    fn classification_ignores_positive_scale(
        emb in vector(3 * D),
        reps in vector(4 * D),
        scale in 0.01f32..100.0,
    ) {
        let emb = Array2::from_shape_vec((3, D), emb.iter().map(|&v| v as f32 + 0.01).collect()).unwrap();
        let Ok(classes) = ClassSet::new(vec!["a".into(), "b".into(), "c".into()], emb) else {
            return Ok(());
        };
        let reps = Array2::from_shape_vec((4, D), reps.iter().map(|&v| v as f32).collect()).unwrap();
        let base = classify(reps.view(), &classes);
        let scaled = classify((&reps * scale).view(), &classes);
        // Cosine ties may flip under rounding; only compare clear winners.
        for (i, (a, b)) in base.iter().zip(&scaled).enumerate() {
            let sims: Vec<f64> = (0..3)
                .map(|c| {
                    let e = classes.embedding(c);
                    let r = reps.row(i).mapv(|v| v as f64);
                    r.dot(&e) / (e.dot(&e).sqrt() * r.dot(&r).sqrt().max(1e-300))
                })
                .collect();
            let mut sorted = sims.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted[2] - sorted[1] > 1e-5 {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn higher_threshold_shrinks_mask(raw in vector(16), lo in 0.0f32..1.0, hi in 0.0f32..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let raw = Array2::from_shape_vec((4, 4), raw.iter().map(|&v| v as f32).collect()).unwrap();
        let a = Heatmap::from_patch_map(&raw, 8, lo);
        let b = a.with_threshold(hi);
        prop_assert!(a.upsampled.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (&wide, &narrow) in a.mask.iter().zip(b.mask.iter()) {
            prop_assert!(wide || !narrow);
        }
    }

    #[test]
    fn percentile_is_monotone_and_bounded(values in vector(12), p in 0.0f64..100.0, q in 0.0f64..100.0) {
        let values: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        let (p, q) = if p <= q { (p, q) } else { (q, p) };
        let (a, b) = (percentile(&values, p).unwrap(), percentile(&values, q).unwrap());
        let min = values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(min <= a && a <= b && b <= max);
    }

    #[test]
    fn average_precision_is_a_fraction(
        scores in prop::collection::vec(-1.0f32..1.0, 20),
        labels in prop::collection::vec(any::<bool>(), 20),
    ) {
        match average_precision(&scores, &labels) {
            None => prop_assert!(labels.iter().all(|&l| !l)),
            Some(ap) => prop_assert!((0.0..=1.0 + 1e-12).contains(&ap)),
        }
        // Scores that rank every positive first give a perfect score.
        let perfect: Vec<f32> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        if let Some(ap) = average_precision(&perfect, &labels) {
            prop_assert!((ap - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mining_scales_with_the_class_direction(
        dirs in prop::collection::vec(vector(D), 6),
        gammas in prop::collection::vec(vector(2), 6),
        v in vector(D),
        k in 1usize..=6,
    ) {
        let directions: Vec<_> = dirs.into_iter().enumerate().map(|(i, r)| direction(i, r)).collect();
        let codes: Vec<_> = gammas
            .into_iter()
            .enumerate()
            .map(|(i, g)| code(i, vec![i % 3, 3 + i % 4], g))
            .collect();
        let v = Array1::from(v);
        let doubled = &v * 2.0;
        let a = select_neurons_by_direction(&directions, &v, k).unwrap();
        let b = select_neurons_by_direction(&directions, &doubled, k).unwrap();
        let ids = |s: &[neuronscope::apps::mining::SelectedNeuron]| {
            s.iter().map(|n| (n.layer, n.neuron)).collect::<Vec<_>>()
        };
        prop_assert_eq!(ids(&a), ids(&b));

        let ra = contribution_scores(&a, &directions, &codes, &v).unwrap();
        let rb = contribution_scores(&a, &directions, &codes, &doubled).unwrap();
        for e in &ra.entries {
            let other = rb.score_of(e.phrase).unwrap();
            prop_assert!((other - 2.0 * e.score).abs() <= 1e-9 * (1.0 + e.score.abs()));
        }
    }
}
