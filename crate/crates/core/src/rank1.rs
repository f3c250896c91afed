//! Rank-1 model of a neuron's second-order effect: `φ(I) ≈ x(I)·r + b`.
//!
//! `b` is the neuron's mean effect over the reference set, `r` the leading
//! principal direction of its largest-norm effects, and `x` the signed
//! projection of the centered effect onto `r`.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::container::TensorMap;
use crate::effects::{top_by_norm, PhiStore, SecondOrderField};
use crate::error::{Error, Result};

pub const ROLE_R: &str = "rank1.r";
pub const ROLE_B: &str = "rank1.b";
pub const ROLE_VAR_EXPLAINED: &str = "rank1.var_explained";
pub const ROLE_SUPPORT_SIZE: &str = "rank1.support_size";
pub const ROLE_DEGENERATE: &str = "rank1.degenerate";
pub const ROLE_NEURONS: &str = "rank1.neurons";

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronDirection {
    pub layer: usize,
    pub neuron: usize,
    /// Unit direction.
    pub r: Array1<f64>,
    /// Mean effect over the reference set.
    pub b: Array1<f64>,
    /// Fraction of the support set's variance along `r`, in `[0, 1]`.
    pub variance_explained: f64,
    pub support_size: usize,
    /// Set when the support set has no spread and `r` is arbitrary.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rank1Options {
    pub support_size: usize,
    /// Center the support set on `b` (reference mean) before extracting the
    /// direction; otherwise on the support set's own mean.
    pub center_on_reference_mean: bool,
    /// Report variance explained around the support-set mean (standard PCA);
    /// otherwise around the same center used for the direction.
    pub variance_around_support_mean: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for Rank1Options {
    fn default() -> Self {
        Rank1Options {
            support_size: 128,
            center_on_reference_mean: true,
            variance_around_support_mean: true,
            max_iter: 20_000,
            tol: 1e-9,
        }
    }
}

/// Leading eigenvector of a symmetric positive semi-definite matrix by power
/// iteration from a fixed start. Returns `None` for the zero matrix.
pub fn leading_eigenvector(
    cov: &Array2<f64>,
    start: &Array1<f64>,
    max_iter: usize,
    tol: f64,
) -> Option<Array1<f64>> {
    let norm = |v: &Array1<f64>| v.dot(v).sqrt();
    let mut v = start.clone();
    let n0 = norm(&v);
    if n0 == 0.0 {
        return None;
    }
    v /= n0;
    for _ in 0..max_iter {
        let mut next = cov.dot(&v);
        let n = norm(&next);
        if n == 0.0 {
            return None;
        }
        next /= n;
        let delta = norm(&(&next - &v));
        v = next;
        if delta < tol {
            break;
        }
    }
    Some(v)
}

/// Fits a direction to explicit support rows.
///
/// `support` holds the effect vectors of the support set, `reference_mean`
/// the neuron's mean over the whole reference set.
pub fn fit_rows(
    support: &[Array1<f64>],
    reference_mean: &Array1<f64>,
    layer: usize,
    neuron: usize,
    opts: &Rank1Options,
) -> Result<NeuronDirection> {
    if support.len() < 2 {
        return Err(Error::arg(format!(
            "support set needs at least 2 effects, got {}",
            support.len()
        )));
    }
    let d = reference_mean.len();
    let k = support.len() as f64;
    let support_mean = support
        .iter()
        .fold(Array1::<f64>::zeros(d), |acc, v| acc + v)
        / k;
    let center = if opts.center_on_reference_mean {
        reference_mean
    } else {
        &support_mean
    };

    let centered: Vec<Array1<f64>> = support.iter().map(|v| v - center).collect();
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += row[i] * row[j];
            }
        }
    }
    let start = centered
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.dot(*a).total_cmp(&b.dot(*b)).then(ib.cmp(ia)))
        .map(|(_, v)| v.clone())
        .expect("non-empty support");
    let (mut r, mut degenerate) = match leading_eigenvector(&cov, &start, opts.max_iter, opts.tol) {
        Some(r) => (r, false),
        None => {
            let mut e = Array1::zeros(d);
            e[0] = 1.0;
            (e, true)
        }
    };

    // orient so the member with the largest |projection| projects positively
    let projections: Vec<f64> = centered.iter().map(|v| v.dot(&r)).collect();
    let extreme = projections
        .iter()
        .copied()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.abs().total_cmp(&b.abs()).then(ib.cmp(ia)))
        .map(|(_, p)| p)
        .unwrap_or(0.0);
    if extreme < 0.0 {
        r.mapv_inplace(|v| -v);
    }

    let ve_center = if opts.variance_around_support_mean {
        &support_mean
    } else {
        center
    };
    let mut along = 0.0;
    let mut total = 0.0;
    for v in support {
        let c = v - ve_center;
        along += c.dot(&r).powi(2);
        total += c.dot(&c);
    }
    let variance_explained = if total > 0.0 {
        (along / total).clamp(0.0, 1.0)
    } else {
        degenerate = true;
        1.0
    };

    Ok(NeuronDirection {
        layer,
        neuron,
        r,
        b: reference_mean.clone(),
        variance_explained,
        support_size: support.len(),
        degenerate,
    })
}

/// Fits the direction of one neuron (given by its id, not column) of `field`.
///
/// The support set is the `support_size` stored effects with the largest
/// norm; `b` is the field's mean over all of its images.
pub fn fit_direction(
    field: &SecondOrderField,
    neuron: usize,
    opts: &Rank1Options,
) -> Result<NeuronDirection> {
    if opts.support_size < 2 {
        return Err(Error::arg(format!(
            "support_size must be at least 2, got {}",
            opts.support_size
        )));
    }
    let col = field.position(neuron)?;
    let support: Vec<Array1<f64>> = match &field.store {
        PhiStore::Full(_) => {
            if field.images() < opts.support_size {
                return Err(Error::arg(format!(
                    "support_size {} exceeds the {} images in the field",
                    opts.support_size,
                    field.images()
                )));
            }
            top_by_norm(&field.norms.column(col).to_vec(), opts.support_size)
                .into_iter()
                .map(|img| field.phi(img, col).expect("full storage").mapv(f64::from))
                .collect()
        }
        PhiStore::TopQ { .. } => {
            let stored = field.stored_for(col);
            if stored.len() < opts.support_size {
                return Err(Error::arg(format!(
                    "support_size {} exceeds the {} stored effects per neuron",
                    opts.support_size,
                    stored.len()
                )));
            }
            stored
                .into_iter()
                .take(opts.support_size)
                .map(|(_, v)| v.mapv(f64::from))
                .collect()
        }
    };
    let b = field.mean.row(col).mapv(f64::from);
    fit_rows(&support, &b, field.layer, neuron, opts)
}

/// Fits every neuron of `field`, in field order.
pub fn fit_layer(field: &SecondOrderField, opts: &Rank1Options) -> Result<Vec<NeuronDirection>> {
    field
        .neurons
        .par_iter()
        .map(|&n| fit_direction(field, n, opts))
        .collect()
}

/// Signed projection `⟨φ − b, r⟩`.
pub fn coefficient(dir: &NeuronDirection, phi: &Array1<f64>) -> f64 {
    (phi - &dir.b).dot(&dir.r)
}

/// `x·r + b`.
pub fn reconstruct(dir: &NeuronDirection, x: f64) -> Array1<f64> {
    &dir.r * x + &dir.b
}

/// Saves the directions of one layer.
pub fn to_tensor_map(dirs: &[NeuronDirection]) -> Result<TensorMap> {
    let first = dirs
        .first()
        .ok_or_else(|| Error::arg("no directions to save"))?;
    let d = first.r.len();
    let n = dirs.len();
    let mut r = Array2::<f32>::zeros((n, d));
    let mut b = Array2::<f32>::zeros((n, d));
    for (i, dir) in dirs.iter().enumerate() {
        if dir.layer != first.layer {
            return Err(Error::arg("directions from different layers"));
        }
        r.row_mut(i).assign(&dir.r.mapv(|v| v as f32));
        b.row_mut(i).assign(&dir.b.mapv(|v| v as f32));
    }
    let mut m = TensorMap::new();
    m.insert(ROLE_R, r.into_dyn());
    m.insert(ROLE_B, b.into_dyn());
    let col =
        |f: &dyn Fn(&NeuronDirection) -> f32| Array1::from_iter(dirs.iter().map(f)).into_dyn();
    m.insert(ROLE_VAR_EXPLAINED, col(&|d| d.variance_explained as f32));
    m.insert(ROLE_SUPPORT_SIZE, col(&|d| d.support_size as f32));
    m.insert(
        ROLE_DEGENERATE,
        col(&|d| if d.degenerate { 1.0 } else { 0.0 }),
    );
    m.insert(ROLE_NEURONS, col(&|d| d.neuron as f32));
    m.metadata.insert("layer".into(), first.layer.into());
    Ok(m)
}

pub fn from_tensor_map(map: &TensorMap) -> Result<Vec<NeuronDirection>> {
    let layer = map
        .metadata
        .get("layer")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::container("metadata", "rank1 container has no `layer`"))?
        as usize;
    let two = |name: &str| -> Result<Array2<f32>> {
        map.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::container(name, e.to_string()))
    };
    let one = |name: &str| -> Result<Array1<f32>> {
        map.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::container(name, e.to_string()))
    };
    let (r, b) = (two(ROLE_R)?, two(ROLE_B)?);
    let (ve, ss, dg, ids) = (
        one(ROLE_VAR_EXPLAINED)?,
        one(ROLE_SUPPORT_SIZE)?,
        one(ROLE_DEGENERATE)?,
        one(ROLE_NEURONS)?,
    );
    let n = r.nrows();
    if b.dim() != r.dim()
        || [ve.len(), ss.len(), dg.len(), ids.len()]
            .iter()
            .any(|&l| l != n)
    {
        return Err(Error::container(
            ROLE_R,
            "rank1 tensors disagree on neuron count",
        ));
    }
    Ok((0..n)
        .map(|i| NeuronDirection {
            layer,
            neuron: ids[i] as usize,
            r: r.row(i).mapv(f64::from),
            b: b.row(i).mapv(f64::from),
            variance_explained: ve[i] as f64,
            support_size: ss[i] as usize,
            degenerate: dg[i] != 0.0,
        })
        .collect())
}
