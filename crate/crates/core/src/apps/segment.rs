//! Zero-shot segmentation from the spatial activations of class-aligned
//! neurons.
//!
//! The patch map is the mean post-GELU activation of the selected neurons at
//! each patch token, min–max standardized per image and bilinearly upsampled
//! (pixel-centre sampling, edges clamped) to the input resolution.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mining::{select_neurons_by_direction, SelectedNeuron};
use crate::engine::ActivationTrace;
use crate::error::{Error, Result};
use crate::rank1::NeuronDirection;
use crate::spec::ModelSpec;

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

pub const ROLE_GRID: &str = "segment.grid";
pub const ROLE_UPSAMPLED: &str = "segment.upsampled";
pub const ROLE_MASK: &str = "segment.mask";

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Standardized patch scores, `g × g`.
    pub grid: Array2<f32>,
    /// `image_size × image_size`, values in [0, 1].
    pub upsampled: Array2<f32>,
    pub mask: Array2<bool>,
    pub threshold: f32,
    /// The raw patch map was constant; every score is 0.5.
    pub degenerate: bool,
}

impl Heatmap {
    /// Builds a heatmap from an unstandardized patch map.
    pub fn from_patch_map(raw: &Array2<f32>, image_size: usize, threshold: f32) -> Self {
        let (grid, degenerate) = standardize(raw);
        let upsampled = upsample_bilinear(&grid, image_size);
        let mask = upsampled.mapv(|v| v >= threshold);
        Heatmap {
            grid,
            upsampled,
            mask,
            threshold,
            degenerate,
        }
    }

    /// Same scores, binarized at a different threshold.
    pub fn with_threshold(&self, threshold: f32) -> Self {
        Heatmap {
            mask: self.upsampled.mapv(|v| v >= threshold),
            threshold,
            ..self.clone()
        }
    }
}

/// Min–max scaling to [0, 1]; a constant map becomes all 0.5 and is flagged.
pub fn standardize(raw: &Array2<f32>) -> (Array2<f32>, bool) {
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return (Array2::from_elem(raw.dim(), 0.5), true);
    }
    (raw.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0)), false)
}

pub fn upsample_bilinear(grid: &Array2<f32>, size: usize) -> Array2<f32> {
    let (gh, gw) = grid.dim();
    let coords = |n: usize, g: usize| -> Vec<(usize, usize, f32)> {
        let scale = g as f32 / n as f32;
        (0..n)
            .map(|i| {
                let src = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f32);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(g - 1);
                (lo, hi, src - lo as f32)
            })
            .collect()
    };
    let ys = coords(size, gh);
    let xs = coords(size, gw);
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

/// Mean activation of `neurons` at each patch token of `image`, as a grid.
pub fn patch_map(
    trace: &ActivationTrace,
    spec: &ModelSpec,
    image: usize,
    neurons: &[(usize, usize)],
) -> Result<Array2<f32>> {
    if neurons.is_empty() {
        return Err(Error::arg("no neurons selected for the patch map"));
    }
    if image >= trace.images() {
        return Err(Error::OutOfRange {
            what: "image",
            index: image,
            limit: trace.images(),
        });
    }
    let g = spec.grid();
    let mut map = Array2::<f64>::zeros((g, g));
    for &(layer, neuron) in neurons {
        if layer >= spec.layers || neuron >= spec.mlp_width {
            return Err(Error::arg(format!(
                "neuron ({layer}, {neuron}) outside the model"
            )));
        }
        let acts = trace.neuron_activations(image, layer, neuron);
        for (p, v) in map.iter_mut().enumerate() {
            *v += acts[p + 1] as f64;
        }
    }
    let count = neurons.len() as f64;
    Ok(map.mapv(|v| (v / count) as f32))
}

/// Heatmap for `image` from the `k` directions most aligned (in absolute
/// value) with `class_embedding`, or all of them if there are fewer than `k`.
/// `directions` should already be limited to the layers of interest.
pub fn segment(
    trace: &ActivationTrace,
    spec: &ModelSpec,
    image: usize,
    directions: &[NeuronDirection],
    class_embedding: &Array1<f64>,
    k: usize,
    threshold: f32,
) -> Result<Heatmap> {
    let selected =
        select_neurons_by_direction(directions, class_embedding, k.min(directions.len()))?;
    segment_with(trace, spec, image, &selected, threshold)
}

/// Heatmap from an explicit neuron selection.
pub fn segment_with(
    trace: &ActivationTrace,
    spec: &ModelSpec,
    image: usize,
    selected: &[SelectedNeuron],
    threshold: f32,
) -> Result<Heatmap> {
    let neurons: Vec<(usize, usize)> = selected.iter().map(|s| (s.layer, s.neuron)).collect();
    let raw = patch_map(trace, spec, image, &neurons)?;
    Ok(Heatmap::from_patch_map(&raw, spec.image_size, threshold))
}

/// Binary (P5) PGM with 8-bit gray levels.
pub fn write_heatmap_pgm(path: &Path, scores: &Array2<f32>) -> Result<()> {
    let bytes: Vec<u8> = scores
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(path, scores.dim(), 255, &bytes)
}

/// Binary PGM with a maximum gray value of 1: one bit of depth per pixel.
pub fn write_mask_pgm(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    write_pgm(path, mask.dim(), 1, &bytes)
}

fn write_pgm(path: &Path, (h, w): (usize, usize), maxval: u8, pixels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{w} {h}\n{maxval}\n").map_err(|e| Error::io(path, e))?;
    f.write_all(pixels).map_err(|e| Error::io(path, e))
}

/// Reads a PGM written by this module; nonzero pixels are foreground.
pub fn read_mask_pgm(path: &Path) -> Result<Array2<bool>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::container(path.display().to_string(), "not a binary PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(
            std::str::from_utf8(&data[start..pos])
                .map_err(|_| bad())?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = data.get(pos..pos + w * h).ok_or_else(bad)?;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        pixels[y * w + x] != 0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_patch_covers_its_cell() {
        let mut raw = Array2::zeros((4, 4));
        raw[[0, 0]] = 3.0;
        let hm = Heatmap::from_patch_map(&raw, 8, 0.5);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(hm.mask[[y, x]], y < 2 && x < 2, "pixel ({y}, {x})");
            }
        }
        assert!(!hm.degenerate);
    }

    #[test]
    fn hand_standardized_grid() {
        let raw = array![
            [1.0, 2.0, 3.0, 5.0],
            [1.0, 1.0, 1.0, 1.0],
            [2.0, 2.0, 3.0, 3.0],
            [4.0, 1.0, 1.0, 5.0]
        ];
        let (g, degenerate) = standardize(&raw);
        assert!(!degenerate);
        let expect = array![
            [0.0, 0.25, 0.5, 1.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.25, 0.25, 0.5, 0.5],
            [0.75, 0.0, 0.0, 1.0]
        ];
        assert_eq!(g, expect);
    }

    #[test]
    fn constant_map_is_flagged() {
        let hm = Heatmap::from_patch_map(&Array2::from_elem((4, 4), 2.0), 8, 0.5);
        assert!(hm.degenerate);
        assert!(hm.upsampled.iter().all(|&v| v == 0.5));
        assert!(hm.mask.iter().all(|&m| m));
    }

    #[test]
    fn upsample_identity_at_grid_resolution() {
        let g = array![[0.0, 0.3], [0.6, 1.0]];
        assert_eq!(upsample_bilinear(&g, 2), g);
    }

    #[test]
    fn higher_threshold_gives_subset() {
        let raw = array![[0.1, 0.9], [0.4, 0.7]];
        let hm = Heatmap::from_patch_map(&raw, 6, 0.3);
        let tighter = hm.with_threshold(0.6);
        for (a, b) in hm.mask.iter().zip(tighter.mask.iter()) {
            assert!(!*b || *a);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = array![[true, false, false], [false, true, true]];
        let p = dir.path().join("m.pgm");
        write_mask_pgm(&p, &mask).unwrap();
        assert_eq!(read_mask_pgm(&p).unwrap(), mask);
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n1\n"));
        let hp = dir.path().join("h.pgm");
        write_heatmap_pgm(&hp, &array![[0.0, 1.0]]).unwrap();
        assert_eq!(
            std::fs::read(&hp).unwrap(),
            b"P5\n2 1\n255\n\x00\xff".to_vec()
        );
    }
}
