use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a CLIP-style ViT image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Residual layers (each one MSA followed by one MLP).
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width, i.e. neurons per layer.
    pub mlp_width: usize,
    pub d_model: usize,
    /// Joint image/text embedding dimension.
    pub d_out: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
}

fn default_ln_eps() -> f32 {
    1e-5
}

impl ModelSpec {
    /// The toy configuration used throughout the tests: 4 layers, 4 heads,
    /// 64 neurons, width 32, 16-d output, 4×4 patches of 2×2 pixels.
    pub const fn toy() -> Self {
        ModelSpec {
            layers: 4,
            heads: 4,
            mlp_width: 64,
            d_model: 32,
            d_out: 16,
            patch_size: 2,
            image_size: 8,
            ln_eps: 1e-5,
        }
    }

    /// ViT-B/32 as shipped with OpenAI CLIP.
    pub const fn vit_b_32() -> Self {
        ModelSpec {
            layers: 12,
            heads: 12,
            mlp_width: 3072,
            d_model: 768,
            d_out: 512,
            patch_size: 32,
            image_size: 224,
            ln_eps: 1e-5,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count K.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens including the class token (K + 1).
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Layer norms in the trace: pre, (ln_1, ln_2) per layer, post.
    pub fn ln_count(&self) -> usize {
        2 * self.layers + 2
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_width", self.mlp_width),
            ("d_model", self.d_model),
            ("d_out", self.d_out),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidSpec(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidSpec(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::InvalidSpec("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("spec serializes")
    }

    pub fn from_metadata(meta: &serde_json::Map<String, serde_json::Value>) -> Result<Self> {
        let v = meta
            .get("model")
            .ok_or_else(|| Error::InvalidSpec("container metadata has no `model` entry".into()))?;
        let spec: ModelSpec = serde_json::from_value(v.clone())
            .map_err(|e| Error::InvalidSpec(format!("bad `model` metadata: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}
