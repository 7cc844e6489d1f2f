use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backbone::checkpoint::Container;
use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::synth::TaskId;
use crate::tensor::{Tape, Tensor, Var};
use crate::{CoreError, Result};

const PHI: &str = "phi";
const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptVariant {
    /// Additive pixel values on a border `width` pixels wide.
    PixelBorder { width: usize },
    /// Learned vectors inserted after `[CLS]`.
    VisualToken { tokens: usize },
}

impl PromptVariant {
    pub fn label(&self) -> String {
        match self {
            PromptVariant::PixelBorder { width } => format!("VP(PS={width})"),
            PromptVariant::VisualToken { tokens } => format!("ViTP(m={tokens})"),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(
            self,
            PromptVariant::PixelBorder { width: 0 } | PromptVariant::VisualToken { tokens: 0 }
        )
    }

    fn shape(&self, cfg: &BackboneConfig) -> Result<Option<Vec<usize>>> {
        Ok(match *self {
            _ if self.is_null() => None,
            PromptVariant::PixelBorder { width } => {
                if 2 * width >= cfg.image_size {
                    return Err(CoreError::Config(format!(
                        "border width {width} must be below half the image size {}",
                        cfg.image_size
                    )));
                }
                Some(vec![border_positions(cfg.image_size, width).len(), 3])
            }
            PromptVariant::VisualToken { tokens } => Some(vec![tokens, cfg.embed_width]),
        })
    }
}

/// Pixel positions within `width` of any edge, row-major.
pub fn border_positions(size: usize, width: usize) -> Vec<(usize, usize)> {
    let on_border = |r: usize, c: usize| r < width || c < width || r + width >= size || c + width >= size;
    (0..size)
        .flat_map(|r| (0..size).map(move |c| (r, c)))
        .filter(|&(r, c)| on_border(r, c))
        .collect()
}

/// For every element of a `[size, size, 3]` image, the index into the
/// flattened border parameters, or -1 inside the border.
fn border_index(size: usize, width: usize) -> Vec<isize> {
    let mut idx = vec![-1isize; size * size * 3];
    for (k, (r, c)) in border_positions(size, width).into_iter().enumerate() {
        for ch in 0..3 {
            idx[(r * size + c) * 3 + ch] = (k * 3 + ch) as isize;
        }
    }
    idx
}

/// An image-independent prompt tuned against one particular backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    pub variant: PromptVariant,
    /// Absent for the null prompt.
    pub values: Option<Tensor>,
    pub backbone_hash: String,
    pub task: Option<TaskId>,
}

/// A prompt placed on a tape ahead of the vision tower.
pub struct Attached<'t> {
    pub images: Var<'t>,
    pub tokens: Option<Var<'t>>,
    /// The prompt parameters themselves, when present.
    pub phi: Option<Var<'t>>,
}

impl PromptParams {
    /// Pixel prompts start at zero, token prompts at small random values.
    pub fn init(variant: PromptVariant, weights: &BackboneWeights, task: Option<TaskId>, seed: u64) -> Result<Self> {
        let values = variant.shape(weights.config())?.map(|shape| match variant {
            PromptVariant::PixelBorder { .. } => Tensor::zeros(shape),
            PromptVariant::VisualToken { .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, TOKEN_INIT_STD).expect("positive std");
                Tensor::from_fn(shape, |_| dist.sample(&mut rng))
            }
        });
        Ok(Self {
            variant,
            values,
            backbone_hash: weights.fingerprint(),
            task,
        })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.variant).expect("variant serializes"));
        if let Some(v) = &self.values {
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_backbone(&self, weights: &BackboneWeights) -> Result<()> {
        let got = weights.fingerprint();
        if got != self.backbone_hash {
            return Err(CoreError::BackboneMismatch {
                expected: self.backbone_hash.clone(),
                got,
            });
        }
        Ok(())
    }

    /// Applies the prompt to `[B, size, size, 3]` images on `tape`.
    pub fn attach<'t>(&self, tape: &'t Tape, images: Var<'t>, cfg: &BackboneConfig, trainable: bool) -> Result<Attached<'t>> {
        let expected = self.variant.shape(cfg)?;
        let got = self.values.as_ref().map(|v| v.shape().to_vec());
        if expected != got {
            return Err(CoreError::ShapeMismatch {
                name: PHI.into(),
                expected: expected.unwrap_or_default(),
                got: got.unwrap_or_default(),
            });
        }
        let Some(values) = &self.values else {
            return Ok(Attached {
                images,
                tokens: None,
                phi: None,
            });
        };
        let phi = if trainable {
            tape.param(values.clone())
        } else {
            tape.constant(values.clone())
        };
        Ok(match self.variant {
            PromptVariant::PixelBorder { width } => {
                let shape = images.shape();
                let per = border_index(cfg.image_size, width);
                let idx: Vec<isize> = (0..shape[0]).flat_map(|_| per.iter().copied()).collect();
                let border = phi.gather(idx, shape);
                Attached {
                    images: (images + border).clamp(0.0, 1.0),
                    tokens: None,
                    phi: Some(phi),
                }
            }
            PromptVariant::VisualToken { .. } => Attached {
                images,
                tokens: Some(phi),
                phi: Some(phi),
            },
        })
    }

    pub fn to_container(&self) -> Container {
        Container {
            meta: json!({
                "kind": "prompt",
                "variant": self.variant,
                "backbone_hash": self.backbone_hash,
                "task": self.task,
            }),
            tensors: self.values.iter().map(|v| (PHI.to_string(), v.clone())).collect(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind() != "prompt" {
            return Err(CoreError::WrongKind {
                expected: "prompt",
                got: c.kind().to_string(),
            });
        }
        let field = |k: &str| c.meta.get(k).cloned().unwrap_or_default();
        let bad = |e: serde_json::Error| CoreError::Format(format!("prompt metadata: {e}"));
        let variant: PromptVariant = serde_json::from_value(field("variant")).map_err(bad)?;
        let backbone_hash: String = serde_json::from_value(field("backbone_hash")).map_err(bad)?;
        let task: Option<TaskId> = serde_json::from_value(field("task")).map_err(bad)?;
        let values = c.get(PHI).cloned();
        if values.is_none() && !variant.is_null() {
            return Err(CoreError::MissingTensor { name: PHI.into() });
        }
        Ok(Self {
            variant,
            values,
            backbone_hash,
            task,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Adds border parameters `[border, 3]` to one `[size, size, 3]` image and clamps to `[0,1]`.
pub fn apply_pixel_prompt(image: &Tensor, width: usize, values: Option<&Tensor>) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != shape[1] || shape[2] != 3 {
        return Err(CoreError::Config(format!("expected a square RGB image, got {shape:?}")));
    }
    let size = shape[0];
    if 2 * width >= size {
        return Err(CoreError::Config(format!(
            "border width {width} must be below half the image size {size}"
        )));
    }
    let Some(values) = values.filter(|_| width > 0) else {
        return Ok(image.clone());
    };
    let positions = border_positions(size, width);
    if values.shape() != [positions.len(), 3] {
        return Err(CoreError::ShapeMismatch {
            name: PHI.into(),
            expected: vec![positions.len(), 3],
            got: values.shape().to_vec(),
        });
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for (k, (r, c)) in positions.into_iter().enumerate() {
        for ch in 0..3 {
            let i = (r * size + c) * 3 + ch;
            data[i] = (data[i] + values.data()[k * 3 + ch]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Inserts prompt vectors `[m, W]` right after the first row of `[S, W]` tokens.
pub fn apply_token_prompt(tokens: &Tensor, values: Option<&Tensor>) -> Result<Tensor> {
    let Some(values) = values else {
        return Ok(tokens.clone());
    };
    let w = tokens.last_dim();
    if values.ndim() != 2 || values.shape()[1] != w || tokens.ndim() != 2 {
        return Err(CoreError::ShapeMismatch {
            name: PHI.into(),
            expected: vec![values.shape()[0], w],
            got: values.shape().to_vec(),
        });
    }
    let mut data = tokens.row(0).to_vec();
    data.extend_from_slice(values.data());
    data.extend_from_slice(&tokens.data()[w..]);
    Ok(Tensor::new(vec![tokens.shape()[0] + values.shape()[0], w], data)?)
}
