//! Typed view over the encoder parameters and the shape schema used to
//! validate a raw tensor map.
//!
//! Matrices follow the `y = W x` convention: `W_out` of layer `l` is
//! `d_model × N`, so column `n` is the neuron's write direction.

use std::fmt;

use ndarray::{Array1, Array2, Array4, ArrayD, Ix1, Ix2, Ix4};

use crate::container::TensorMap;
use crate::error::{Error, Result};
use crate::spec::ModelSpec;

pub const PATCH_EMBED: &str = "weights.patch_embed";
pub const CLASS_EMBED: &str = "weights.class_embed";
pub const POS_EMBED: &str = "weights.pos_embed";
pub const LN_PRE_GAMMA: &str = "weights.ln_pre.gamma";
pub const LN_PRE_BETA: &str = "weights.ln_pre.beta";
pub const LN_POST_GAMMA: &str = "weights.ln_post.gamma";
pub const LN_POST_BETA: &str = "weights.ln_post.beta";
pub const PROJ: &str = "weights.proj";

/// Per-layer tensor stems; the full name appends `.{layer}`.
pub const LAYER_TENSORS: [&str; 16] = [
    "weights.ln_1.gamma",
    "weights.ln_1.beta",
    "weights.attn.W_q",
    "weights.attn.b_q",
    "weights.attn.W_k",
    "weights.attn.b_k",
    "weights.attn.W_v",
    "weights.attn.b_v",
    "weights.attn.W_o",
    "weights.attn.b_o",
    "weights.ln_2.gamma",
    "weights.ln_2.beta",
    "weights.mlp.W_in",
    "weights.mlp.b_in",
    "weights.mlp.W_out",
    "weights.mlp.b_out",
];

pub fn layer_tensor(stem: &str, layer: usize) -> String {
    format!("{stem}.{layer}")
}

fn layer_shape(stem: &str, spec: &ModelSpec) -> Vec<usize> {
    let d = spec.d_model;
    let n = spec.mlp_width;
    match stem {
        "weights.attn.W_q" | "weights.attn.W_k" | "weights.attn.W_v" | "weights.attn.W_o" => {
            vec![d, d]
        }
        "weights.mlp.W_in" => vec![n, d],
        "weights.mlp.b_in" => vec![n],
        "weights.mlp.W_out" => vec![d, n],
        _ => vec![d],
    }
}

/// Every parameter name with its required shape, in canonical order.
pub fn schema(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let d = spec.d_model;
    let p = spec.patch_size;
    let mut out = vec![
        (PATCH_EMBED.to_string(), vec![d, 3, p, p]),
        (CLASS_EMBED.to_string(), vec![d]),
        (POS_EMBED.to_string(), vec![spec.tokens(), d]),
        (LN_PRE_GAMMA.to_string(), vec![d]),
        (LN_PRE_BETA.to_string(), vec![d]),
    ];
    for l in 0..spec.layers {
        for stem in LAYER_TENSORS {
            out.push((layer_tensor(stem, l), layer_shape(stem, spec)));
        }
    }
    out.push((LN_POST_GAMMA.to_string(), vec![d]));
    out.push((LN_POST_BETA.to_string(), vec![d]));
    out.push((PROJ.to_string(), vec![spec.d_out, d]));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BundleIssue {
    Missing {
        name: String,
    },
    Shape {
        name: String,
        layer: Option<usize>,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl fmt::Display for BundleIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BundleIssue::Missing { name } => write!(f, "missing tensor `{name}`"),
            BundleIssue::Shape {
                name,
                layer,
                expected,
                found,
            } => {
                write!(f, "`{name}`")?;
                if let Some(l) = layer {
                    write!(f, " (layer {l})")?;
                }
                write!(f, ": expected shape {expected:?}, found {found:?}")
            }
        }
    }
}

/// Result of [`validate_bundle`]; empty means the bundle is usable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<BundleIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "{issue}")?;
        }
        Ok(())
    }
}

fn layer_of(name: &str) -> Option<usize> {
    name.rsplit('.').next().and_then(|s| s.parse().ok())
}

/// Checks a raw tensor map against the shape schema implied by `spec`.
/// Extra tensors are ignored.
pub fn validate_bundle(tensors: &TensorMap, spec: &ModelSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (name, expected) in schema(spec) {
        match tensors.tensors.get(&name) {
            None => report.issues.push(BundleIssue::Missing { name }),
            Some(t) if t.shape() != expected.as_slice() => report.issues.push(BundleIssue::Shape {
                layer: layer_of(&name),
                found: t.shape().to_vec(),
                name,
                expected,
            }),
            Some(_) => {}
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Array1<f32>,
    pub ln1_beta: Array1<f32>,
    pub w_q: Array2<f32>,
    pub b_q: Array1<f32>,
    pub w_k: Array2<f32>,
    pub b_k: Array1<f32>,
    pub w_v: Array2<f32>,
    pub b_v: Array1<f32>,
    pub w_o: Array2<f32>,
    pub b_o: Array1<f32>,
    pub ln2_gamma: Array1<f32>,
    pub ln2_beta: Array1<f32>,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

/// All encoder parameters. Immutable once built; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub spec: ModelSpec,
    /// `d_model × 3 × patch × patch` convolution kernel (stride = patch, no bias).
    pub patch_embed: Array4<f32>,
    pub class_embed: Array1<f32>,
    /// `(K+1) × d_model`.
    pub pos_embed: Array2<f32>,
    pub ln_pre_gamma: Array1<f32>,
    pub ln_pre_beta: Array1<f32>,
    pub layers: Vec<LayerWeights>,
    pub ln_post_gamma: Array1<f32>,
    pub ln_post_beta: Array1<f32>,
    /// `d_out × d_model`.
    pub proj: Array2<f32>,
}

fn take1(map: &mut TensorMap, name: &str) -> Result<Array1<f32>> {
    map.take(name)?
        .into_dimensionality::<Ix1>()
        .map_err(|e| Error::container(name, e.to_string()))
}

fn take2(map: &mut TensorMap, name: &str) -> Result<Array2<f32>> {
    map.take(name)?
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::container(name, e.to_string()))
}

impl WeightBundle {
    /// Builds a bundle from a tensor map after validating every shape.
    pub fn from_tensor_map(map: &TensorMap, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let report = validate_bundle(map, spec);
        if let Some(issue) = report.issues.first() {
            return Err(match issue {
                BundleIssue::Missing { name } => Error::MissingTensor(name.clone()),
                BundleIssue::Shape {
                    name,
                    expected,
                    found,
                    ..
                } => Error::Shape {
                    name: name.clone(),
                    expected: expected.clone(),
                    found: found.clone(),
                },
            });
        }
        // clone only the schema tensors, leave extras behind
        let mut m = TensorMap::new();
        for (name, _) in schema(spec) {
            m.insert(name.clone(), map.get(&name)?.clone());
        }
        let patch_embed = m
            .take(PATCH_EMBED)?
            .into_dimensionality::<Ix4>()
            .map_err(|e| Error::container(PATCH_EMBED, e.to_string()))?;
        let class_embed = take1(&mut m, CLASS_EMBED)?;
        let pos_embed = take2(&mut m, POS_EMBED)?;
        let ln_pre_gamma = take1(&mut m, LN_PRE_GAMMA)?;
        let ln_pre_beta = take1(&mut m, LN_PRE_BETA)?;
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let n = |stem: &str| layer_tensor(stem, l);
            layers.push(LayerWeights {
                ln1_gamma: take1(&mut m, &n("weights.ln_1.gamma"))?,
                ln1_beta: take1(&mut m, &n("weights.ln_1.beta"))?,
                w_q: take2(&mut m, &n("weights.attn.W_q"))?,
                b_q: take1(&mut m, &n("weights.attn.b_q"))?,
                w_k: take2(&mut m, &n("weights.attn.W_k"))?,
                b_k: take1(&mut m, &n("weights.attn.b_k"))?,
                w_v: take2(&mut m, &n("weights.attn.W_v"))?,
                b_v: take1(&mut m, &n("weights.attn.b_v"))?,
                w_o: take2(&mut m, &n("weights.attn.W_o"))?,
                b_o: take1(&mut m, &n("weights.attn.b_o"))?,
                ln2_gamma: take1(&mut m, &n("weights.ln_2.gamma"))?,
                ln2_beta: take1(&mut m, &n("weights.ln_2.beta"))?,
                w_in: take2(&mut m, &n("weights.mlp.W_in"))?,
                b_in: take1(&mut m, &n("weights.mlp.b_in"))?,
                w_out: take2(&mut m, &n("weights.mlp.W_out"))?,
                b_out: take1(&mut m, &n("weights.mlp.b_out"))?,
            });
        }
        Ok(WeightBundle {
            spec: *spec,
            patch_embed,
            class_embed,
            pos_embed,
            ln_pre_gamma,
            ln_pre_beta,
            layers,
            ln_post_gamma: take1(&mut m, LN_POST_GAMMA)?,
            ln_post_beta: take1(&mut m, LN_POST_BETA)?,
            proj: take2(&mut m, PROJ)?,
        })
    }

    /// Loads a weights container; the model spec comes from `spec` if given,
    /// otherwise from the manifest's `model` metadata.
    pub fn load(dir: &std::path::Path, spec: Option<&ModelSpec>) -> Result<Self> {
        let map = TensorMap::read(dir)?;
        let spec = match spec {
            Some(s) => *s,
            None => ModelSpec::from_metadata(&map.metadata)?,
        };
        Self::from_tensor_map(&map, &spec)
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        let mut put = |name: String, t: ArrayD<f32>| m.insert(name, t);
        put(PATCH_EMBED.into(), self.patch_embed.clone().into_dyn());
        put(CLASS_EMBED.into(), self.class_embed.clone().into_dyn());
        put(POS_EMBED.into(), self.pos_embed.clone().into_dyn());
        put(LN_PRE_GAMMA.into(), self.ln_pre_gamma.clone().into_dyn());
        put(LN_PRE_BETA.into(), self.ln_pre_beta.clone().into_dyn());
        for (l, lw) in self.layers.iter().enumerate() {
            let tensors: [ArrayD<f32>; 16] = [
                lw.ln1_gamma.clone().into_dyn(),
                lw.ln1_beta.clone().into_dyn(),
                lw.w_q.clone().into_dyn(),
                lw.b_q.clone().into_dyn(),
                lw.w_k.clone().into_dyn(),
                lw.b_k.clone().into_dyn(),
                lw.w_v.clone().into_dyn(),
                lw.b_v.clone().into_dyn(),
                lw.w_o.clone().into_dyn(),
                lw.b_o.clone().into_dyn(),
                lw.ln2_gamma.clone().into_dyn(),
                lw.ln2_beta.clone().into_dyn(),
                lw.w_in.clone().into_dyn(),
                lw.b_in.clone().into_dyn(),
                lw.w_out.clone().into_dyn(),
                lw.b_out.clone().into_dyn(),
            ];
            for (stem, t) in LAYER_TENSORS.iter().zip(tensors) {
                put(layer_tensor(stem, l), t);
            }
        }
        put(LN_POST_GAMMA.into(), self.ln_post_gamma.clone().into_dyn());
        put(LN_POST_BETA.into(), self.ln_post_beta.clone().into_dyn());
        put(PROJ.into(), self.proj.clone().into_dyn());
        m.metadata.insert("model".into(), self.spec.to_json());
        m
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        self.to_tensor_map().write(dir)
    }
}
