//! Forward pass of the CLIP image encoder with tracing and activation
//! patching.
//!
//! ```text
//! image → conv patch embed → [class | patches] + pos → LN_pre
//!   → for each layer l:
//!       z += MSA(LN_1(z))
//!       z += W_out · GELU(W_in · LN_2(z) + b_in) + b_out
//!   → LN_post(z_0) → P → representation
//! ```
//!
//! All arithmetic is `f32`. Matrix products go through `ndarray::dot`;
//! reductions (layer-norm moments, softmax denominators) sum in token-
//! then-channel index order. No step depends on thread count, so the same
//! inputs produce bitwise-identical traces.

use ndarray::{
    s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Zip,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::container::TensorMap;
use crate::error::{Error, Result};
use crate::spec::ModelSpec;
use crate::weights::{LayerWeights, WeightBundle};

pub const ROLE_POST_GELU: &str = "trace.post_gelu";
pub const ROLE_ATTN_CLASS_ROW: &str = "trace.attn_class_row";
pub const ROLE_LN_MU: &str = "trace.ln_mu";
pub const ROLE_LN_SIGMA: &str = "trace.ln_sigma";
pub const ROLE_CLASS_PRELNPOST: &str = "trace.class_token_prelnpost";
pub const ROLE_MSA_CLASS_OUT: &str = "trace.msa_class_out";
pub const ROLE_REPRESENTATION: &str = "trace.representation";

/// Index of a layer norm inside the `ln_mu`/`ln_sigma` tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LnSite {
    Pre,
    /// Before the MSA of the given layer.
    Attn(usize),
    /// Before the MLP of the given layer.
    Mlp(usize),
    Post,
}

impl LnSite {
    pub fn index(self, spec: &ModelSpec) -> usize {
        match self {
            LnSite::Pre => 0,
            LnSite::Attn(l) => 1 + 2 * l,
            LnSite::Mlp(l) => 2 + 2 * l,
            LnSite::Post => 2 * spec.layers + 1,
        }
    }
}

/// Replace one neuron's post-GELU activations with a per-token vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub layer: usize,
    pub neuron: usize,
    /// One value per token (K + 1), class token first.
    pub replacement: Vec<f32>,
}

/// Everything recorded while running one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTrace {
    /// `L × (K+1) × N`.
    pub post_gelu: Array3<f32>,
    /// `L × H × (K+1)`: attention of the class token over all tokens.
    pub attn_class_row: Array3<f32>,
    /// `n_ln × (K+1)`, indexed by [`LnSite::index`].
    pub ln_mu: Array2<f32>,
    /// Includes epsilon: `sqrt(var + eps)`.
    pub ln_sigma: Array2<f32>,
    /// Residual stream at the class token before each layer, plus the final
    /// state: `(L+1) × d_model`.
    pub class_stream: Array2<f32>,
    /// Class-token output of each MSA block (biases included): `L × d_model`.
    pub msa_class_out: Array2<f32>,
    /// Class-token output of each MLP block: `L × d_model`.
    pub mlp_class_out: Array2<f32>,
    pub representation: Array1<f32>,
}

impl ImageTrace {
    pub fn class_token_prelnpost(&self) -> ArrayView1<'_, f32> {
        self.class_stream.row(self.class_stream.nrows() - 1)
    }
}

/// Batched trace; the image index always leads.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `B × L × (K+1) × N`.
    pub post_gelu: Array4<f32>,
    /// `B × L × H × (K+1)`.
    pub attn_class_row: Array4<f32>,
    /// `B × n_ln × (K+1)`.
    pub ln_mu: Array3<f32>,
    pub ln_sigma: Array3<f32>,
    /// `B × d_model`.
    pub class_token_prelnpost: Array2<f32>,
    /// `B × L × d_model`.
    pub msa_class_out: Array3<f32>,
    /// `B × d_out`.
    pub representation: Array2<f32>,
}

impl ActivationTrace {
    pub fn from_images(spec: &ModelSpec, images: &[ImageTrace]) -> Self {
        let b = images.len();
        let (l, t, n, h) = (spec.layers, spec.tokens(), spec.mlp_width, spec.heads);
        let mut out = ActivationTrace {
            post_gelu: Array4::zeros((b, l, t, n)),
            attn_class_row: Array4::zeros((b, l, h, t)),
            ln_mu: Array3::zeros((b, spec.ln_count(), t)),
            ln_sigma: Array3::zeros((b, spec.ln_count(), t)),
            class_token_prelnpost: Array2::zeros((b, spec.d_model)),
            msa_class_out: Array3::zeros((b, l, spec.d_model)),
            representation: Array2::zeros((b, spec.d_out)),
        };
        for (i, tr) in images.iter().enumerate() {
            out.post_gelu
                .slice_mut(s![i, .., .., ..])
                .assign(&tr.post_gelu);
            out.attn_class_row
                .slice_mut(s![i, .., .., ..])
                .assign(&tr.attn_class_row);
            out.ln_mu.slice_mut(s![i, .., ..]).assign(&tr.ln_mu);
            out.ln_sigma.slice_mut(s![i, .., ..]).assign(&tr.ln_sigma);
            out.class_token_prelnpost
                .row_mut(i)
                .assign(&tr.class_token_prelnpost());
            out.msa_class_out
                .slice_mut(s![i, .., ..])
                .assign(&tr.msa_class_out);
            out.representation.row_mut(i).assign(&tr.representation);
        }
        out
    }

    pub fn images(&self) -> usize {
        self.representation.nrows()
    }

    /// Checks tensor shapes against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let b = self.images();
        let (l, t, n, h) = (spec.layers, spec.tokens(), spec.mlp_width, spec.heads);
        let want: [(&str, Vec<usize>, &[usize]); 7] = [
            (ROLE_POST_GELU, vec![b, l, t, n], self.post_gelu.shape()),
            (
                ROLE_ATTN_CLASS_ROW,
                vec![b, l, h, t],
                self.attn_class_row.shape(),
            ),
            (ROLE_LN_MU, vec![b, spec.ln_count(), t], self.ln_mu.shape()),
            (
                ROLE_LN_SIGMA,
                vec![b, spec.ln_count(), t],
                self.ln_sigma.shape(),
            ),
            (
                ROLE_CLASS_PRELNPOST,
                vec![b, spec.d_model],
                self.class_token_prelnpost.shape(),
            ),
            (
                ROLE_MSA_CLASS_OUT,
                vec![b, l, spec.d_model],
                self.msa_class_out.shape(),
            ),
            (
                ROLE_REPRESENTATION,
                vec![b, spec.d_out],
                self.representation.shape(),
            ),
        ];
        for (name, expected, found) in want {
            if expected.as_slice() != found {
                return Err(Error::Shape {
                    name: name.into(),
                    expected,
                    found: found.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Post-GELU activations of one neuron for one image, per token.
    pub fn neuron_activations(
        &self,
        image: usize,
        layer: usize,
        neuron: usize,
    ) -> ArrayView1<'_, f32> {
        self.post_gelu.slice(s![image, layer, .., neuron])
    }

    /// Per-token mean activation over all images: `L × (K+1) × N`.
    pub fn per_token_means(&self) -> Array3<f32> {
        self.post_gelu
            .mean_axis(Axis(0))
            .expect("trace has at least one image")
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(ROLE_POST_GELU, self.post_gelu.clone().into_dyn());
        m.insert(ROLE_ATTN_CLASS_ROW, self.attn_class_row.clone().into_dyn());
        m.insert(ROLE_LN_MU, self.ln_mu.clone().into_dyn());
        m.insert(ROLE_LN_SIGMA, self.ln_sigma.clone().into_dyn());
        m.insert(
            ROLE_CLASS_PRELNPOST,
            self.class_token_prelnpost.clone().into_dyn(),
        );
        m.insert(ROLE_MSA_CLASS_OUT, self.msa_class_out.clone().into_dyn());
        m.insert(ROLE_REPRESENTATION, self.representation.clone().into_dyn());
        m
    }

    pub fn from_tensor_map(map: &TensorMap, spec: &ModelSpec) -> Result<Self> {
        fn get<D: ndarray::Dimension>(
            map: &TensorMap,
            name: &str,
        ) -> Result<ndarray::Array<f32, D>> {
            map.get(name)?
                .clone()
                .into_dimensionality::<D>()
                .map_err(|e| Error::container(name, e.to_string()))
        }
        let trace = ActivationTrace {
            post_gelu: get(map, ROLE_POST_GELU)?,
            attn_class_row: get(map, ROLE_ATTN_CLASS_ROW)?,
            ln_mu: get(map, ROLE_LN_MU)?,
            ln_sigma: get(map, ROLE_LN_SIGMA)?,
            class_token_prelnpost: get(map, ROLE_CLASS_PRELNPOST)?,
            msa_class_out: get(map, ROLE_MSA_CLASS_OUT)?,
            representation: get(map, ROLE_REPRESENTATION)?,
        };
        trace.check(spec)?;
        Ok(trace)
    }
}

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

/// Layer norm over the last axis. Returns the normalized tokens together
/// with per-token mean and `sqrt(var + eps)`.
pub fn layer_norm(
    x: ArrayView2<'_, f32>,
    gamma: ArrayView1<'_, f32>,
    beta: ArrayView1<'_, f32>,
    eps: f32,
) -> (Array2<f32>, Array1<f32>, Array1<f32>) {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    let mut mu = Array1::zeros(t);
    let mut sigma = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let sd = (var + eps).sqrt();
        mu[i] = mean;
        sigma[i] = sd;
        Zip::from(out.row_mut(i))
            .and(row)
            .and(gamma)
            .and(beta)
            .for_each(|o, &v, &g, &b| *o = g * (v - mean) / sd + b);
    }
    (out, mu, sigma)
}

fn softmax_in_place(mut row: ndarray::ArrayViewMut1<'_, f32>) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    row.mapv_inplace(|v| (v - max).exp());
    let sum: f32 = row.iter().sum();
    row.mapv_inplace(|v| v / sum);
}

fn check_image(spec: &ModelSpec, image: &ArrayView3<'_, f32>) -> Result<()> {
    let want = [3, spec.image_size, spec.image_size];
    if image.shape() != want {
        return Err(Error::Shape {
            name: "image".into(),
            expected: want.to_vec(),
            found: image.shape().to_vec(),
        });
    }
    Ok(())
}

/// Patch tokens: `K × d_model`, row-major over the patch grid.
fn embed_patches(w: &WeightBundle, image: &ArrayView3<'_, f32>) -> Array2<f32> {
    let spec = &w.spec;
    let (g, p) = (spec.grid(), spec.patch_size);
    let flat = 3 * p * p;
    let mut patches = Array2::<f32>::zeros((spec.patches(), flat));
    for r in 0..g {
        for c in 0..g {
            let block = image.slice(s![.., r * p..(r + 1) * p, c * p..(c + 1) * p]);
            patches
                .row_mut(r * g + c)
                .iter_mut()
                .zip(block.iter())
                .for_each(|(dst, &v)| *dst = v);
        }
    }
    let kernel = w
        .patch_embed
        .view()
        .into_shape_with_order((spec.d_model, flat))
        .expect("patch kernel is contiguous");
    patches.dot(&kernel.t())
}

fn check_finite(x: &Array2<f32>, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

fn check_interventions(spec: &ModelSpec, interventions: &[Intervention]) -> Result<()> {
    for iv in interventions {
        if iv.layer >= spec.layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: iv.layer,
                limit: spec.layers,
            });
        }
        if iv.neuron >= spec.mlp_width {
            return Err(Error::OutOfRange {
                what: "neuron",
                index: iv.neuron,
                limit: spec.mlp_width,
            });
        }
        if iv.replacement.len() != spec.tokens() {
            return Err(Error::arg(format!(
                "intervention on layer {} neuron {} has {} values, expected {}",
                iv.layer,
                iv.neuron,
                iv.replacement.len(),
                spec.tokens()
            )));
        }
    }
    Ok(())
}

struct MsaOut {
    out: Array2<f32>,
    class_rows: Array2<f32>,
}

fn attention(lw: &LayerWeights, x: &Array2<f32>, spec: &ModelSpec) -> MsaOut {
    let t = x.nrows();
    let dh = spec.head_dim();
    let q = x.dot(&lw.w_q.t()) + &lw.b_q;
    let k = x.dot(&lw.w_k.t()) + &lw.b_k;
    let v = x.dot(&lw.w_v.t()) + &lw.b_v;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut concat = Array2::<f32>::zeros((t, spec.d_model));
    let mut class_rows = Array2::<f32>::zeros((spec.heads, t));
    for h in 0..spec.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for row in scores.rows_mut() {
            softmax_in_place(row);
        }
        class_rows.row_mut(h).assign(&scores.row(0));
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    MsaOut {
        out: concat.dot(&lw.w_o.t()) + &lw.b_o,
        class_rows,
    }
}

fn run(
    w: &WeightBundle,
    image: ArrayView3<'_, f32>,
    interventions: &[Intervention],
) -> Result<ImageTrace> {
    let spec = &w.spec;
    check_image(spec, &image)?;
    check_interventions(spec, interventions)?;
    let (l_count, t, n) = (spec.layers, spec.tokens(), spec.mlp_width);
    let eps = spec.ln_eps;

    let mut tokens = Array2::<f32>::zeros((t, spec.d_model));
    tokens.row_mut(0).assign(&w.class_embed);
    tokens
        .slice_mut(s![1.., ..])
        .assign(&embed_patches(w, &image));
    tokens += &w.pos_embed;
    check_finite(&tokens, 0)?;

    let mut ln_mu = Array2::zeros((spec.ln_count(), t));
    let mut ln_sigma = Array2::zeros((spec.ln_count(), t));
    let mut post_gelu = Array3::zeros((l_count, t, n));
    let mut attn_class_row = Array3::zeros((l_count, spec.heads, t));
    let mut class_stream = Array2::zeros((l_count + 1, spec.d_model));
    let mut msa_class_out = Array2::zeros((l_count, spec.d_model));
    let mut mlp_class_out = Array2::zeros((l_count, spec.d_model));

    let (mut z, mu, sd) = layer_norm(
        tokens.view(),
        w.ln_pre_gamma.view(),
        w.ln_pre_beta.view(),
        eps,
    );
    ln_mu.row_mut(LnSite::Pre.index(spec)).assign(&mu);
    ln_sigma.row_mut(LnSite::Pre.index(spec)).assign(&sd);

    for (l, lw) in w.layers.iter().enumerate() {
        class_stream.row_mut(l).assign(&z.row(0));

        let (x, mu, sd) = layer_norm(z.view(), lw.ln1_gamma.view(), lw.ln1_beta.view(), eps);
        ln_mu.row_mut(LnSite::Attn(l).index(spec)).assign(&mu);
        ln_sigma.row_mut(LnSite::Attn(l).index(spec)).assign(&sd);
        let msa = attention(lw, &x, spec);
        attn_class_row
            .slice_mut(s![l, .., ..])
            .assign(&msa.class_rows);
        msa_class_out.row_mut(l).assign(&msa.out.row(0));
        z += &msa.out;

        let (x, mu, sd) = layer_norm(z.view(), lw.ln2_gamma.view(), lw.ln2_beta.view(), eps);
        ln_mu.row_mut(LnSite::Mlp(l).index(spec)).assign(&mu);
        ln_sigma.row_mut(LnSite::Mlp(l).index(spec)).assign(&sd);
        let mut hidden = (x.dot(&lw.w_in.t()) + &lw.b_in).mapv_into(gelu);
        for iv in interventions.iter().filter(|iv| iv.layer == l) {
            hidden
                .column_mut(iv.neuron)
                .iter_mut()
                .zip(&iv.replacement)
                .for_each(|(dst, &v)| *dst = v);
        }
        let mlp = hidden.dot(&lw.w_out.t()) + &lw.b_out;
        post_gelu.slice_mut(s![l, .., ..]).assign(&hidden);
        mlp_class_out.row_mut(l).assign(&mlp.row(0));
        z += &mlp;
        check_finite(&z, l)?;
    }
    class_stream.row_mut(l_count).assign(&z.row(0));

    let (fin, mu, sd) = layer_norm(z.view(), w.ln_post_gamma.view(), w.ln_post_beta.view(), eps);
    ln_mu.row_mut(LnSite::Post.index(spec)).assign(&mu);
    ln_sigma.row_mut(LnSite::Post.index(spec)).assign(&sd);
    let representation = w.proj.dot(&fin.row(0));
    if !representation.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { layer: l_count });
    }

    Ok(ImageTrace {
        post_gelu,
        attn_class_row,
        ln_mu,
        ln_sigma,
        class_stream,
        msa_class_out,
        mlp_class_out,
        representation,
    })
}

/// Runs one preprocessed image (`3 × S × S`).
pub fn forward(w: &WeightBundle, image: ArrayView3<'_, f32>) -> Result<ImageTrace> {
    run(w, image, &[])
}

/// Runs one image with the listed neurons' activations overwritten before
/// their MLP output projection; every later layer sees the patched stream.
pub fn forward_with_intervention(
    w: &WeightBundle,
    image: ArrayView3<'_, f32>,
    interventions: &[Intervention],
) -> Result<Array1<f32>> {
    run(w, image, interventions).map(|t| t.representation)
}

/// Traces a batch `B × 3 × S × S` in parallel on the current rayon pool.
pub fn forward_batch(w: &WeightBundle, images: ArrayView4<'_, f32>) -> Result<ActivationTrace> {
    let traces = (0..images.len_of(Axis(0)))
        .into_par_iter()
        .map(|i| forward(w, images.index_axis(Axis(0), i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationTrace::from_images(&w.spec, &traces))
}

/// Head-restricted value–output composition `W_O[:, h] · W_V[h, :]`.
pub fn compute_vo(w: &WeightBundle, layer: usize, head: usize) -> Result<Array2<f32>> {
    let spec = &w.spec;
    if layer >= spec.layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: spec.layers,
        });
    }
    if head >= spec.heads {
        return Err(Error::OutOfRange {
            what: "head",
            index: head,
            limit: spec.heads,
        });
    }
    let dh = spec.head_dim();
    let lw = &w.layers[layer];
    let rows = h_range(head, dh);
    Ok(lw
        .w_o
        .slice(s![.., rows.clone()])
        .dot(&lw.w_v.slice(s![rows, ..])))
}

/// Constant class-token output of one MSA block that does not depend on its
/// input: `Σ_h W_O[:, h] b_V[h] + b_O` (attention rows sum to one).
pub fn msa_bias(w: &WeightBundle, layer: usize) -> Array1<f32> {
    let lw = &w.layers[layer];
    lw.w_o.dot(&lw.b_v) + &lw.b_o
}

fn h_range(head: usize, dh: usize) -> std::ops::Range<usize> {
    head * dh..(head + 1) * dh
}

/// Deterministic pseudo-random weights for tests and demos.
///
/// Generator: ChaCha8 seeded with `seed`, drawing standard normals in the
/// canonical [`crate::weights::schema`] order. Scales:
/// matrices `1/sqrt(fan_in)`; class and positional embeddings `0.5`;
/// LN gains `1 + 0.1·z`; LN shifts `0.1·z`; biases `0.02·z`.
pub fn generate_toy(seed: u64, spec: &ModelSpec) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut map = TensorMap::new();
    for (name, shape) in crate::weights::schema(spec) {
        let count: usize = shape.iter().product();
        let leaf = name
            .trim_end_matches(|c: char| c.is_ascii_digit())
            .trim_end_matches('.');
        let (offset, scale) = if leaf.ends_with(".gamma") {
            (1.0, 0.1)
        } else if leaf.ends_with(".beta") {
            (0.0, 0.1)
        } else if leaf.contains(".b_") {
            (0.0, 0.02)
        } else if leaf == crate::weights::CLASS_EMBED || leaf == crate::weights::POS_EMBED {
            (0.0, 0.5)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            (0.0, 1.0 / (fan_in as f32).sqrt())
        };
        let data: Vec<f32> = (0..count)
            .map(|_| offset + scale * normal.sample(&mut rng))
            .collect();
        map.insert(
            name,
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data).expect("schema shape"),
        );
    }
    WeightBundle::from_tensor_map(&map, spec).expect("generated bundle matches schema")
}

/// Deterministic synthetic images `count × 3 × S × S` with unit-normal pixels.
pub fn random_images(seed: u64, spec: &ModelSpec, count: usize) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let s = spec.image_size;
    Array4::from_shape_simple_fn((count, 3, s, s), || normal.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_bundle(spec: &ModelSpec) -> WeightBundle {
        let mut w = generate_toy(0, spec);
        let zero = |a: &mut Array2<f32>| a.fill(0.0);
        w.patch_embed.fill(0.0);
        w.class_embed.fill(0.0);
        zero(&mut w.pos_embed);
        w.ln_pre_beta.fill(0.0);
        for lw in &mut w.layers {
            for m in [
                &mut lw.w_q,
                &mut lw.w_k,
                &mut lw.w_v,
                &mut lw.w_o,
                &mut lw.w_in,
                &mut lw.w_out,
            ] {
                zero(m);
            }
            for b in [
                &mut lw.b_q,
                &mut lw.b_k,
                &mut lw.b_v,
                &mut lw.b_o,
                &mut lw.b_in,
                &mut lw.b_out,
                &mut lw.ln1_beta,
                &mut lw.ln2_beta,
            ] {
                b.fill(0.0);
            }
        }
        w.ln_post_beta.fill(0.0);
        w
    }

    #[test]
    fn zero_image_zero_weights_identity_projection() {
        let spec = ModelSpec {
            d_out: 32,
            ..ModelSpec::toy()
        };
        let mut w = zero_bundle(&spec);
        w.proj = Array2::eye(32);
        let img = Array3::<f32>::zeros((3, 8, 8));
        let tr = forward(&w, img.view()).unwrap();
        assert!(tr.representation.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generate_toy_is_reproducible() {
        let spec = ModelSpec::toy();
        assert_eq!(generate_toy(42, &spec), generate_toy(42, &spec));
        assert_ne!(generate_toy(42, &spec), generate_toy(43, &spec));
    }

    #[test]
    fn zero_image_forward_is_finite() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let tr = forward(&w, Array3::zeros((3, 8, 8)).view()).unwrap();
        assert!(tr.representation.iter().all(|v| v.is_finite()));
        assert!(tr.ln_sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let imgs = random_images(5, &spec, 3);
        let tr = forward_batch(&w, imgs.view()).unwrap();
        for row in tr.attn_class_row.lanes(Axis(3)) {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_intervention_is_identity() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let img = random_images(1, &spec, 1);
        let img = img.index_axis(Axis(0), 0);
        let base = forward(&w, img).unwrap();
        let patched = forward_with_intervention(&w, img, &[]).unwrap();
        assert_eq!(base.representation, patched);
    }

    #[test]
    fn own_activations_as_replacement_is_identity() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let img = random_images(2, &spec, 1);
        let img = img.index_axis(Axis(0), 0);
        let base = forward(&w, img).unwrap();
        let ivs: Vec<_> = (0..spec.mlp_width)
            .step_by(7)
            .map(|n| Intervention {
                layer: 1,
                neuron: n,
                replacement: base.post_gelu.slice(s![1, .., n]).to_vec(),
            })
            .collect();
        let patched = forward_with_intervention(&w, img, &ivs).unwrap();
        let diff = (&base.representation - &patched)
            .mapv(f32::abs)
            .fold(0.0f32, |a, &b| a.max(b));
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn residual_additivity_at_class_token() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let img = random_images(3, &spec, 1);
        let tr = forward(&w, img.index_axis(Axis(0), 0)).unwrap();
        for l in 0..spec.layers {
            let rebuilt =
                &tr.class_stream.row(l) + &tr.msa_class_out.row(l) + tr.mlp_class_out.row(l);
            let diff = (&rebuilt - &tr.class_stream.row(l + 1))
                .mapv(f32::abs)
                .fold(0.0f32, |a, &b| a.max(b));
            assert!(diff < 1e-5, "layer {l}: {diff}");
        }
    }

    #[test]
    fn compute_vo_identity_and_zero() {
        let spec = ModelSpec {
            heads: 1,
            ..ModelSpec::toy()
        };
        let mut w = generate_toy(0, &spec);
        w.layers[0].w_v = Array2::eye(spec.d_model);
        w.layers[0].w_o = Array2::eye(spec.d_model);
        assert_eq!(
            compute_vo(&w, 0, 0).unwrap(),
            Array2::<f32>::eye(spec.d_model)
        );
        w.layers[1].w_v.fill(0.0);
        assert!(compute_vo(&w, 1, 0).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(
            compute_vo(&w, 9, 0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            compute_vo(&w, 0, 1),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_input_fails() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let mut img = Array3::<f32>::zeros((3, 8, 8));
        img[[0, 0, 0]] = f32::NAN;
        assert!(matches!(
            forward(&w, img.view()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn bad_intervention_rejected() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let img = Array3::<f32>::zeros((3, 8, 8));
        let iv = Intervention {
            layer: 4,
            neuron: 0,
            replacement: vec![0.0; 17],
        };
        assert!(forward_with_intervention(&w, img.view(), &[iv]).is_err());
    }

    #[test]
    fn trace_container_round_trip() {
        let spec = ModelSpec::toy();
        let w = generate_toy(42, &spec);
        let tr = forward_batch(&w, random_images(9, &spec, 2).view()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tr.to_tensor_map().write(dir.path()).unwrap();
        let back =
            ActivationTrace::from_tensor_map(&TensorMap::read(dir.path()).unwrap(), &spec).unwrap();
        assert_eq!(tr, back);
    }
}
