//! Run configuration shared by every pipeline stage.
//!
//! A config file is a JSON object; every key is optional and unknown keys are
//! rejected. Paths default to fixed subdirectories of `out`, so a pipeline
//! can run stage after stage against one output directory:
//!
//! | key          | default            | written by   |
//! |--------------|--------------------|--------------|
//! | `weights`    | `<out>/weights`    | `gen-toy`    |
//! | `images`     | `<out>/images`     | `gen-toy`    |
//! | `classes`    | `<out>/classes`    | `gen-toy`    |
//! | `pool`       | `<out>/pool`       | `gen-toy`    |
//! | `masks`      | `<out>/masks`      | `gen-toy`    |
//! | `traces`     | `<out>/trace`      | `trace`      |
//! | `effects`    | `<out>/effects`    | `effects`    |
//! | `directions` | `<out>/rank1`      | `rank1`      |
//! | `codes`      | `<out>/codes`      | `decompose`  |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apps::concepts::{PercentileMode, DEFAULT_PERCENTILE, DEFAULT_TOP};
use crate::error::{Error, Result};
use crate::spec::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub effects: Option<PathBuf>,
    pub directions: Option<PathBuf>,
    pub codes: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    /// Overrides the spec recorded in the weights container.
    pub model: Option<ModelSpec>,

    pub layers: Vec<usize>,
    /// Atoms per sparse code.
    pub m: usize,
    pub support_size: usize,
    /// Neurons selected for spurious-cue mining.
    pub k: usize,
    /// Images per neuron in the large-norm ablation set.
    pub q: usize,
    pub threshold: f32,
    pub seed: u64,

    /// Keep only the top-`n` effect vectors per neuron instead of all.
    pub top_q_storage: Option<usize>,
    pub bias_shares: bool,
    pub ablation_mode: String,
    pub percentile: f64,
    pub percentile_mode: PercentileMode,
    /// Phrases reported per discovered image.
    pub discover_top: usize,
    /// Images to run discovery on; all when empty.
    pub discover_images: Vec<usize>,
    /// Phrases exported per class pair.
    pub spurious_top: usize,
    /// Class names for spurious-cue mining: from `class_a` toward `class_b`.
    pub class_a: Option<String>,
    pub class_b: Option<String>,
    /// Neurons averaged for segmentation.
    pub segment_k: usize,
    /// Class used to segment every image; each image's label when unset.
    pub segment_class: Option<String>,

    /// Sizes used by `gen-toy`.
    pub toy_images: usize,
    pub toy_classes: usize,
    pub toy_pool: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            weights: None,
            images: None,
            traces: None,
            effects: None,
            directions: None,
            codes: None,
            pool: None,
            classes: None,
            masks: None,
            model: None,
            layers: vec![8, 9, 10],
            m: 128,
            support_size: 128,
            k: 100,
            q: 100,
            threshold: 0.5,
            seed: 0,
            top_q_storage: None,
            bias_shares: true,
            ablation_mode: "all".into(),
            percentile: DEFAULT_PERCENTILE,
            percentile_mode: PercentileMode::PerNeuron,
            discover_top: DEFAULT_TOP,
            discover_images: Vec::new(),
            spurious_top: 25,
            class_a: None,
            class_b: None,
            segment_k: 200,
            segment_class: None,
            toy_images: 32,
            toy_classes: 4,
            toy_pool: 200,
        }
    }
}

impl RunConfig {
    /// Parses a config file. Syntax errors carry line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks that do not depend on the model.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("support_size", self.support_size),
            ("k", self.k),
            ("q", self.q),
            ("segment_k", self.segment_k),
            ("discover_top", self.discover_top),
            ("spurious_top", self.spurious_top),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.support_size < 2 {
            return Err(Error::Config("`support_size` must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "`threshold` {} outside [0, 1]",
                self.threshold
            )));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::Config(format!(
                "`percentile` {} outside [0, 100]",
                self.percentile
            )));
        }
        if self.top_q_storage == Some(0) {
            return Err(Error::Config("`top_q_storage` must be positive".into()));
        }
        if self.toy_classes < 2 || self.toy_images == 0 || self.toy_pool == 0 {
            return Err(Error::Config(
                "toy sizes need at least 2 classes, 1 image and 1 phrase".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.layers.iter().find(|l| !seen.insert(**l)) {
            return Err(Error::Config(format!("layer {dup} listed twice")));
        }
        self.ablation_mode
            .parse::<crate::eval::AblationMode>()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn under(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.under(&self.weights, "weights")
    }
    pub fn images_dir(&self) -> PathBuf {
        self.under(&self.images, "images")
    }
    pub fn traces_dir(&self) -> PathBuf {
        self.under(&self.traces, "trace")
    }
    pub fn effects_dir(&self) -> PathBuf {
        self.under(&self.effects, "effects")
    }
    pub fn directions_dir(&self) -> PathBuf {
        self.under(&self.directions, "rank1")
    }
    pub fn codes_dir(&self) -> PathBuf {
        self.under(&self.codes, "codes")
    }
    pub fn pool_dir(&self) -> PathBuf {
        self.under(&self.pool, "pool")
    }
    pub fn classes_dir(&self) -> PathBuf {
        self.under(&self.classes, "classes")
    }
    pub fn masks_dir(&self) -> PathBuf {
        self.under(&self.masks, "masks")
    }
}

/// Subdirectory for one layer's results.
pub fn layer_dir(base: &Path, layer: usize) -> PathBuf {
    base.join(format!("layer_{layer:02}"))
}
