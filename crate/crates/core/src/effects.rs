//! First-order, second-order and indirect effects of MLP neurons on the
//! output representation.
//!
//! The second-order effect of neuron `n` in layer `l` on image `I` follows
//! the neuron's residual write `p_i · w` through the value path of every
//! later attention head and on to the projection, with every layer norm
//! frozen at the statistics recorded in the reference trace:
//!
//! ```text
//! φ = Σ_{l'>l} Σ_h Σ_i p_i a_i^{l',h} · P( A ⊙ W_VO^{l',h} (A_i^{l'} ⊙ w + B_i^{l'}/c_{l'}) + B/c )
//! ```
//!
//! where `A_i^{l'} = γ^{l'}/σ_i^{l'}` and `B_i^{l'} = β^{l'} − μ_i^{l'} γ^{l'}/σ_i^{l'}` are the
//! per-token affine form of the pre-attention norm, `A`, `B` the same for the
//! final norm at the class token, `c = L·N` and `c_{l'} = l'·N`. The bias
//! shares are constant per image and drop out of any mean-ablation; set
//! [`EffectOptions::bias_shares`] to `false` to get the purely linear part.
//!
//! Only the attention value path is followed. Effects that pass through later
//! MLPs, or that move attention patterns, are not part of `φ`.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::container::TensorMap;
use crate::engine::{
    compute_vo, forward, forward_with_intervention, ActivationTrace, Intervention, LnSite,
};
use crate::error::{Error, Result};
use crate::weights::WeightBundle;

pub const ROLE_PHI: &str = "effects.phi";
pub const ROLE_NORMS: &str = "effects.norms";
pub const ROLE_MEAN: &str = "effects.mean";
pub const ROLE_PHI_SUM: &str = "effects.phi_sum";
pub const ROLE_TOP_INDEX: &str = "effects.top_index";
pub const ROLE_NEURONS: &str = "effects.neurons";

/// Upper bound on floats held for one neuron chunk (`images × chunk × d_out`).
const CHUNK_BUDGET: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectOptions {
    /// Include the equal-share layer-norm bias terms.
    pub bias_shares: bool,
    pub storage: Storage,
}

impl Default for EffectOptions {
    fn default() -> Self {
        EffectOptions {
            bias_shares: true,
            storage: Storage::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// Keep every φ vector.
    Full,
    /// Keep norms for every image but full vectors only for the `q` largest
    /// norms of each neuron.
    TopQ(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhiStore {
    /// `images × neurons × d_out`.
    Full(Array3<f32>),
    TopQ {
        /// `neurons × q` image indices, largest norm first.
        index: Array2<usize>,
        /// `neurons × q × d_out`.
        phi: Array3<f32>,
    },
}

/// Second-order effects of a set of neurons of one layer over a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderField {
    pub layer: usize,
    pub neurons: Vec<usize>,
    /// `images × neurons`.
    pub norms: Array2<f32>,
    /// `neurons × d_out`: mean of φ over the images the field was built on.
    pub mean: Array2<f32>,
    /// `images × d_out`: Σ over the field's neurons of φ, per image.
    pub phi_sum: Array2<f32>,
    pub store: PhiStore,
}

impl SecondOrderField {
    pub fn images(&self) -> usize {
        self.norms.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.mean.ncols()
    }

    /// Column of `neuron` within this field.
    pub fn position(&self, neuron: usize) -> Result<usize> {
        self.neurons
            .iter()
            .position(|&n| n == neuron)
            .ok_or_else(|| {
                Error::arg(format!(
                    "neuron {neuron} not in field for layer {}",
                    self.layer
                ))
            })
    }

    /// φ of one (image, neuron column), if stored.
    pub fn phi(&self, image: usize, column: usize) -> Option<Array1<f32>> {
        match &self.store {
            PhiStore::Full(phi) => Some(phi.slice(s![image, column, ..]).to_owned()),
            PhiStore::TopQ { index, phi } => index
                .row(column)
                .iter()
                .position(|&i| i == image)
                .map(|k| phi.slice(s![column, k, ..]).to_owned()),
        }
    }

    /// All stored (image, φ) pairs of one neuron column.
    pub fn stored_for(&self, column: usize) -> Vec<(usize, Array1<f32>)> {
        match &self.store {
            PhiStore::Full(phi) => (0..phi.len_of(Axis(0)))
                .map(|i| (i, phi.slice(s![i, column, ..]).to_owned()))
                .collect(),
            PhiStore::TopQ { index, phi } => index
                .row(column)
                .iter()
                .enumerate()
                .map(|(k, &i)| (i, phi.slice(s![column, k, ..]).to_owned()))
                .collect(),
        }
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(ROLE_NORMS, self.norms.clone().into_dyn());
        m.insert(ROLE_MEAN, self.mean.clone().into_dyn());
        m.insert(ROLE_PHI_SUM, self.phi_sum.clone().into_dyn());
        m.insert(
            ROLE_NEURONS,
            Array1::from_iter(self.neurons.iter().map(|&n| n as f32)).into_dyn(),
        );
        match &self.store {
            PhiStore::Full(phi) => m.insert(ROLE_PHI, phi.clone().into_dyn()),
            PhiStore::TopQ { index, phi } => {
                m.insert(ROLE_PHI, phi.clone().into_dyn());
                m.insert(ROLE_TOP_INDEX, index.mapv(|i| i as f32).into_dyn());
            }
        }
        m.metadata.insert("layer".into(), self.layer.into());
        m
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        fn get<D: ndarray::Dimension>(
            map: &TensorMap,
            name: &str,
        ) -> Result<ndarray::Array<f32, D>> {
            map.get(name)?
                .clone()
                .into_dimensionality::<D>()
                .map_err(|e| Error::container(name, e.to_string()))
        }
        let layer = map
            .metadata
            .get("layer")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::container("metadata", "effects container has no `layer`"))?
            as usize;
        let neurons: Array1<f32> = get(map, ROLE_NEURONS)?;
        let phi: Array3<f32> = get(map, ROLE_PHI)?;
        let store = match map.tensors.get(ROLE_TOP_INDEX) {
            Some(_) => {
                let index: Array2<f32> = get(map, ROLE_TOP_INDEX)?;
                PhiStore::TopQ {
                    index: index.mapv(|v| v as usize),
                    phi,
                }
            }
            None => PhiStore::Full(phi),
        };
        let field = SecondOrderField {
            layer,
            neurons: neurons.iter().map(|&v| v as usize).collect(),
            norms: get(map, ROLE_NORMS)?,
            mean: get(map, ROLE_MEAN)?,
            phi_sum: get(map, ROLE_PHI_SUM)?,
            store,
        };
        let (b, n) = field.norms.dim();
        if field.neurons.len() != n || field.mean.nrows() != n || field.phi_sum.nrows() != b {
            return Err(Error::container(
                ROLE_NORMS,
                "effects tensors disagree on image/neuron counts",
            ));
        }
        Ok(field)
    }
}

fn check_layer(w: &WeightBundle, layer: usize) -> Result<()> {
    if layer >= w.spec.layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: w.spec.layers,
        });
    }
    Ok(())
}

fn check_neuron(w: &WeightBundle, neuron: usize) -> Result<()> {
    if neuron >= w.spec.mlp_width {
        return Err(Error::OutOfRange {
            what: "neuron",
            index: neuron,
            limit: w.spec.mlp_width,
        });
    }
    Ok(())
}

/// `P diag(γ_post)`: projection with the final-norm gain folded in.
fn proj_gain(w: &WeightBundle) -> Array2<f32> {
    &w.proj * &w.ln_post_gamma.view().insert_axis(Axis(0))
}

/// Bias-share divisors `(c, c_{l'})`.
fn share_divisors(w: &WeightBundle, later: usize) -> (f32, f32) {
    let n = w.spec.mlp_width as f32;
    (w.spec.layers as f32 * n, later as f32 * n)
}

/// `P B` for the final norm at the class token of image `img`.
fn final_bias_projected(w: &WeightBundle, trace: &ActivationTrace, img: usize) -> Array1<f32> {
    let post = LnSite::Post.index(&w.spec);
    let mu = trace.ln_mu[[img, post, 0]];
    let sd = trace.ln_sigma[[img, post, 0]];
    let b = &w.ln_post_beta - &(&w.ln_post_gamma * (mu / sd));
    w.proj.dot(&b)
}

struct HeadPath {
    later: usize,
    head: usize,
    /// `neurons × d_out`: `P diag(γ_post) W_VO diag(γ^{l'}) w_n` per neuron.
    linear: Array2<f32>,
    /// `P diag(γ_post) W_VO β^{l'}`.
    via_beta: Array1<f32>,
    /// `P diag(γ_post) W_VO γ^{l'}`.
    via_gamma: Array1<f32>,
}

fn head_paths(w: &WeightBundle, layer: usize, neurons: &[usize]) -> Result<Vec<HeadPath>> {
    let pg = proj_gain(w);
    let w_out = w.layers[layer].w_out.select(Axis(1), neurons);
    let mut out = Vec::new();
    for later in layer + 1..w.spec.layers {
        let lw = &w.layers[later];
        // rows scaled by γ^{l'} == W_out pre-multiplied by diag(γ^{l'})
        let scaled = &w_out * &lw.ln1_gamma.view().insert_axis(Axis(1));
        for head in 0..w.spec.heads {
            let m = pg.dot(&compute_vo(w, later, head)?);
            out.push(HeadPath {
                later,
                head,
                linear: m.dot(&scaled).reversed_axes(),
                via_beta: m.dot(&lw.ln1_beta),
                via_gamma: m.dot(&lw.ln1_gamma),
            });
        }
    }
    Ok(out)
}

/// φ for one image and a chunk of neurons: `neurons × d_out`.
fn second_order_image(
    w: &WeightBundle,
    trace: &ActivationTrace,
    img: usize,
    layer: usize,
    neurons: &[usize],
    paths: &[HeadPath],
    opts: &EffectOptions,
) -> Array2<f32> {
    let spec = &w.spec;
    let post = LnSite::Post.index(spec);
    let inv_final = 1.0 / trace.ln_sigma[[img, post, 0]];
    let acts = trace
        .post_gelu
        .slice(s![img, layer, .., ..])
        .select(Axis(1), neurons);
    let mut phi = Array2::<f32>::zeros((neurons.len(), spec.d_out));
    let mut total_weight = Array1::<f32>::zeros(neurons.len());
    for path in paths {
        let site = LnSite::Attn(path.later).index(spec);
        let a = trace
            .attn_class_row
            .slice(s![img, path.later, path.head, ..]);
        let sd = trace.ln_sigma.slice(s![img, site, ..]);
        let scaled = &a / &sd;
        let coef = scaled.dot(&acts);
        for (mut row, (&c, lin)) in phi
            .rows_mut()
            .into_iter()
            .zip(coef.iter().zip(path.linear.rows()))
        {
            row.scaled_add(c * inv_final, &lin);
        }
        if opts.bias_shares {
            let mu = trace.ln_mu.slice(s![img, site, ..]);
            let t1 = a.dot(&acts);
            let t2 = (&scaled * &mu).dot(&acts);
            let (_, c_later) = share_divisors(w, path.later);
            for (n, mut row) in phi.rows_mut().into_iter().enumerate() {
                row.scaled_add(t1[n] * inv_final / c_later, &path.via_beta);
                row.scaled_add(-t2[n] * inv_final / c_later, &path.via_gamma);
            }
            total_weight += &t1;
        }
    }
    if opts.bias_shares && !paths.is_empty() {
        let (c, _) = share_divisors(w, 1);
        let pb = final_bias_projected(w, trace, img);
        for (n, mut row) in phi.rows_mut().into_iter().enumerate() {
            row.scaled_add(total_weight[n] / c, &pb);
        }
    }
    phi
}

fn check_trace(w: &WeightBundle, trace: &ActivationTrace) -> Result<()> {
    trace
        .check(&w.spec)
        .map_err(|e| Error::arg(format!("trace does not match weights: {e}")))
}

/// Computes the second-order field of `neurons` in `layer` over every image
/// of `trace`. The trace must come from a forward pass with the same weights.
///
/// For the last layer no attention block follows, so every φ is zero.
pub fn second_order(
    w: &WeightBundle,
    trace: &ActivationTrace,
    layer: usize,
    neurons: &[usize],
    opts: &EffectOptions,
) -> Result<SecondOrderField> {
    check_layer(w, layer)?;
    check_trace(w, trace)?;
    for &n in neurons {
        check_neuron(w, n)?;
    }
    let images = trace.images();
    let d_out = w.spec.d_out;
    let nn = neurons.len();
    let chunk = (CHUNK_BUDGET / (images.max(1) * d_out)).clamp(1, nn.max(1));

    let mut norms = Array2::<f32>::zeros((images, nn));
    let mut mean = Array2::<f32>::zeros((nn, d_out));
    let mut phi_sum64 = Array2::<f64>::zeros((images, d_out));
    let mut full = match opts.storage {
        Storage::Full => Some(Array3::<f32>::zeros((images, nn, d_out))),
        Storage::TopQ(_) => None,
    };
    let q = match opts.storage {
        Storage::TopQ(q) => q.min(images),
        Storage::Full => 0,
    };
    let mut top_index = Array2::<usize>::zeros((nn, q));
    let mut top_phi = Array3::<f32>::zeros((nn, q, d_out));

    for start in (0..nn).step_by(chunk) {
        let ids = &neurons[start..(start + chunk).min(nn)];
        let paths = head_paths(w, layer, ids)?;
        let per_image: Vec<Array2<f32>> = (0..images)
            .into_par_iter()
            .map(|img| second_order_image(w, trace, img, layer, ids, &paths, opts))
            .collect();

        for (local, col) in (start..start + ids.len()).enumerate() {
            let mut acc = vec![0.0f64; d_out];
            for (img, phi) in per_image.iter().enumerate() {
                let v = phi.row(local);
                norms[[img, col]] = v
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt() as f32;
                for (a, &x) in acc.iter_mut().zip(v.iter()) {
                    *a += x as f64;
                }
                for (a, &x) in phi_sum64.row_mut(img).iter_mut().zip(v.iter()) {
                    *a += x as f64;
                }
                if let Some(full) = full.as_mut() {
                    full.slice_mut(s![img, col, ..]).assign(&v);
                }
            }
            for (m, a) in mean.row_mut(col).iter_mut().zip(&acc) {
                *m = (*a / images.max(1) as f64) as f32;
            }
            if q > 0 {
                let order = top_by_norm(&norms.column(col).to_vec(), q);
                for (k, &img) in order.iter().enumerate() {
                    top_index[[col, k]] = img;
                    top_phi
                        .slice_mut(s![col, k, ..])
                        .assign(&per_image[img].row(local));
                }
            }
        }
    }

    let store = match full {
        Some(phi) => PhiStore::Full(phi),
        None => PhiStore::TopQ {
            index: top_index,
            phi: top_phi,
        },
    };
    Ok(SecondOrderField {
        layer,
        neurons: neurons.to_vec(),
        norms,
        mean,
        phi_sum: phi_sum64.mapv(|v| v as f32),
        store,
    })
}

/// Indices of the `q` largest values, largest first; ties go to the lower index.
pub fn top_by_norm(norms: &[f32], q: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(q);
    order
}

/// Direct (logit-lens) effect of one neuron for every image:
/// `P (A ⊙ p_0 w)`, plus the neuron's `B/c` share of the final-norm offset
/// when bias shares are on. Returns `images × d_out`.
pub fn first_order_neuron(
    w: &WeightBundle,
    trace: &ActivationTrace,
    layer: usize,
    neuron: usize,
    opts: &EffectOptions,
) -> Result<Array2<f32>> {
    check_layer(w, layer)?;
    check_neuron(w, neuron)?;
    check_trace(w, trace)?;
    let post = LnSite::Post.index(&w.spec);
    let dir = proj_gain(w).dot(&w.layers[layer].w_out.column(neuron));
    let (c, _) = share_divisors(w, 1);
    let mut out = Array2::zeros((trace.images(), w.spec.d_out));
    for (img, mut row) in out.rows_mut().into_iter().enumerate() {
        let p0 = trace.post_gelu[[img, layer, 0, neuron]];
        let sd = trace.ln_sigma[[img, post, 0]];
        row.scaled_add(p0 / sd, &dir);
        if opts.bias_shares {
            row.scaled_add(1.0 / c, &final_bias_projected(w, trace, img));
        }
    }
    Ok(out)
}

/// `forward(image) − forward(image with the neuron patched to per-token means)`.
pub fn indirect_effect(
    w: &WeightBundle,
    image: ndarray::ArrayView3<'_, f32>,
    layer: usize,
    neuron: usize,
    per_token_means: &[f32],
) -> Result<Array1<f32>> {
    check_layer(w, layer)?;
    check_neuron(w, neuron)?;
    if per_token_means.len() != w.spec.tokens() {
        return Err(Error::arg(format!(
            "per-token means have length {}, expected {}",
            per_token_means.len(),
            w.spec.tokens()
        )));
    }
    let base = forward(w, image)?.representation;
    let patched = forward_with_intervention(
        w,
        image,
        &[Intervention {
            layer,
            neuron,
            replacement: per_token_means.to_vec(),
        }],
    )?;
    Ok(base - patched)
}

/// Per-neuron mean of φ over the field's images (`neurons × d_out`).
///
/// With full storage the mean is recomputed from the stored vectors; with
/// top-Q storage the mean accumulated during the sweep is returned.
pub fn mean_over_reference(field: &SecondOrderField) -> Result<Array2<f32>> {
    if field.images() == 0 {
        return Err(Error::arg("mean over an empty image set"));
    }
    match &field.store {
        PhiStore::Full(phi) => Ok(mean_of(phi.view())),
        PhiStore::TopQ { .. } => Ok(field.mean.clone()),
    }
}

/// Mean over the leading (image) axis, accumulated in `f64`.
pub fn mean_of(phi: ArrayView3<'_, f32>) -> Array2<f32> {
    let (b, n, d) = phi.dim();
    let mut acc = Array2::<f64>::zeros((n, d));
    for img in phi.outer_iter() {
        acc.zip_mut_with(&img, |a, &x| *a += x as f64);
    }
    acc.mapv(|v| (v / b as f64) as f32)
}

/// Euclidean norms of stored φ vectors: `images × neurons`.
pub fn effect_norms(field: &SecondOrderField) -> Array2<f32> {
    field.norms.clone()
}

/// Euclidean norm of each row of the last axis.
pub fn norms_of(phi: ArrayView3<'_, f32>) -> Array2<f32> {
    phi.map_axis(Axis(2), |v| {
        v.iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt() as f32
    })
}

/// The frozen attention/norm paths of one image, used to push an arbitrary
/// layer-`l` residual contribution to the output.
#[derive(Debug, Clone)]
pub struct FrozenPathMap {
    /// `L × H × (K+1)`.
    pub attn: Array3<f32>,
    /// Pre-attention norm statistics `L × (K+1)`.
    pub attn_mu: Array2<f32>,
    pub attn_sigma: Array2<f32>,
    pub final_mu: f32,
    pub final_sigma: f32,
}

impl FrozenPathMap {
    pub fn from_trace(w: &WeightBundle, trace: &ActivationTrace, img: usize) -> Self {
        let spec = &w.spec;
        let sites: Vec<usize> = (0..spec.layers)
            .map(|l| LnSite::Attn(l).index(spec))
            .collect();
        let post = LnSite::Post.index(spec);
        FrozenPathMap {
            attn: trace.attn_class_row.slice(s![img, .., .., ..]).to_owned(),
            attn_mu: trace.ln_mu.slice(s![img, .., ..]).select(Axis(0), &sites),
            attn_sigma: trace
                .ln_sigma
                .slice(s![img, .., ..])
                .select(Axis(0), &sites),
            final_mu: trace.ln_mu[[img, post, 0]],
            final_sigma: trace.ln_sigma[[img, post, 0]],
        }
    }

    /// Output reached by a per-token contribution `x` (`(K+1) × d_model`)
    /// written at `layer`, through every later head's value path:
    ///
    /// `Σ_{l'>l,h,i} a_i P(A ⊙ W_VO (A_i ⊙ x_i + s B_i/c_{l'}) + s B/c)` with `s = 1`
    /// when bias shares are on and `0` otherwise. Affine in `x`.
    pub fn path(
        &self,
        w: &WeightBundle,
        layer: usize,
        x: ArrayView2<'_, f32>,
        bias_shares: bool,
    ) -> Array1<f32> {
        let spec = &w.spec;
        let a_final = &w.ln_post_gamma / self.final_sigma;
        let b_final = &w.ln_post_beta - &(&w.ln_post_gamma * (self.final_mu / self.final_sigma));
        let mut total = Array1::<f32>::zeros(spec.d_model);
        for later in layer + 1..spec.layers {
            let lw = &w.layers[later];
            let (c, c_later) = share_divisors(w, later);
            for h in 0..spec.heads {
                let vo = compute_vo(w, later, h).expect("indices in range");
                let mut mixed = Array1::<f32>::zeros(spec.d_model);
                for i in 0..spec.tokens() {
                    let sd = self.attn_sigma[[later, i]];
                    let mut tok = &x.row(i) * &lw.ln1_gamma / sd;
                    if bias_shares {
                        let b = &lw.ln1_beta - &(&lw.ln1_gamma * (self.attn_mu[[later, i]] / sd));
                        tok.scaled_add(1.0 / c_later, &b);
                    }
                    mixed.scaled_add(self.attn[[later, h, i]], &tok);
                }
                let mut head_out = &vo.dot(&mixed) * &a_final;
                if bias_shares {
                    head_out.scaled_add(1.0 / c, &b_final);
                }
                total += &head_out;
            }
        }
        w.proj.dot(&total)
    }
}
