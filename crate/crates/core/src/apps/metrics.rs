//! Segmentation metrics: pixel accuracy, mean IoU and mean average precision,
//! each computed per image, averaged over images and reported in percent.

use ndarray::Array2;

use super::segment::Heatmap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub pixel_acc: f64,
    /// Mean of foreground and background IoU.
    pub miou: f64,
    /// `None` when no ground-truth mask has a foreground pixel.
    pub map: Option<f64>,
    pub images: usize,
    /// Images that entered the mAP average.
    pub ap_images: usize,
}

/// IoU of two binary masks; an empty union counts as a perfect match.
fn iou(pred: &Array2<bool>, gt: &Array2<bool>, positive: bool) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p == positive, g == positive);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Step-wise average precision `Σ (R_k − R_{k−1}) P_k`, with tied scores
/// forming a single threshold. `None` if there are no positives.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

pub fn segmentation_metrics(
    predicted: &[Heatmap],
    ground_truth: &[Array2<bool>],
) -> Result<SegMetrics> {
    if predicted.is_empty() {
        return Err(Error::arg("no predictions to score"));
    }
    if predicted.len() != ground_truth.len() {
        return Err(Error::arg(format!(
            "{} predictions but {} ground-truth masks",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let mut acc = 0.0;
    let mut miou = 0.0;
    let mut ap_sum = 0.0;
    let mut ap_images = 0;
    for (i, (hm, gt)) in predicted.iter().zip(ground_truth).enumerate() {
        if hm.mask.dim() != gt.dim() {
            return Err(Error::Shape {
                name: format!("ground truth {i}"),
                expected: vec![hm.mask.nrows(), hm.mask.ncols()],
                found: vec![gt.nrows(), gt.ncols()],
            });
        }
        let correct = hm
            .mask
            .iter()
            .zip(gt.iter())
            .filter(|(p, g)| p == g)
            .count();
        acc += correct as f64 / gt.len() as f64;
        miou += (iou(&hm.mask, gt, true) + iou(&hm.mask, gt, false)) / 2.0;
        let scores: Vec<f32> = hm.upsampled.iter().copied().collect();
        let labels: Vec<bool> = gt.iter().copied().collect();
        if let Some(ap) = average_precision(&scores, &labels) {
            ap_sum += ap;
            ap_images += 1;
        }
    }
    let n = predicted.len() as f64;
    Ok(SegMetrics {
        pixel_acc: 100.0 * acc / n,
        miou: 100.0 * miou / n,
        map: (ap_images > 0).then(|| 100.0 * ap_sum / ap_images as f64),
        images: predicted.len(),
        ap_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heatmap(scores: Array2<f32>, threshold: f32) -> Heatmap {
        Heatmap {
            grid: scores.clone(),
            mask: scores.mapv(|v| v >= threshold),
            upsampled: scores,
            threshold,
            degenerate: false,
        }
    }

    fn left_half() -> Array2<bool> {
        Array2::from_shape_fn((4, 4), |(_, x)| x < 2)
    }

    #[test]
    fn perfect_prediction() {
        let gt = left_half();
        let m = segmentation_metrics(&[heatmap(gt.mapv(|b| b as u8 as f32), 0.5)], &[gt]).unwrap();
        assert_eq!((m.pixel_acc, m.miou, m.map), (100.0, 100.0, Some(100.0)));
    }

    #[test]
    fn complement_prediction() {
        let gt = left_half();
        let m =
            segmentation_metrics(&[heatmap(gt.mapv(|b| (!b) as u8 as f32), 0.5)], &[gt]).unwrap();
        assert_eq!((m.pixel_acc, m.miou), (0.0, 0.0));
    }

    #[test]
    fn descending_columns() {
        let cols = [0.9f32, 0.6, 0.8, 0.1];
        let scores = Array2::from_shape_fn((4, 4), |(_, x)| cols[x]);
        let m = segmentation_metrics(&[heatmap(scores, 0.5)], &[left_half()]).unwrap();
        assert!((m.pixel_acc - 75.0).abs() < 1e-12);
        assert!((m.miou - 100.0 * (8.0 / 12.0 + 0.5) / 2.0).abs() < 1e-12);
        assert!((m.map.unwrap() - 100.0 * (0.5 + 0.5 * 8.0 / 12.0)).abs() < 1e-12);
    }

    #[test]
    fn errors_and_empty_ap() {
        assert!(segmentation_metrics(&[], &[]).is_err());
        let h = heatmap(Array2::zeros((4, 4)), 0.5);
        assert!(segmentation_metrics(std::slice::from_ref(&h), &[Array2::from_elem((2, 2), false)]).is_err());
        let m = segmentation_metrics(&[h], &[Array2::from_elem((4, 4), false)]).unwrap();
        assert_eq!(m.map, None);
        assert_eq!((m.pixel_acc, m.miou), (100.0, 100.0));
    }
}
