use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::checkpoint::Container;
use super::config::{BackboneConfig, MAX_LOGIT_SCALE};
use crate::tensor::{Tape, Tensor, Var};
use crate::{CoreError, Result};

pub const LOGIT_SCALE: &str = "logit_scale";

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    LogitScale,
}

fn layout(c: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let w = c.embed_width;
    let h = c.hidden_width();
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    let attn_std = (w as f64).powf(-0.5);
    let proj_std = attn_std / ((2 * c.depth) as f64).sqrt();
    for tower in ["vision", "text"] {
        if tower == "vision" {
            push("vision.patch.w".into(), vec![c.patch_dim(), w], Init::Normal((c.patch_dim() as f64).powf(-0.5)));
            push("vision.patch.b".into(), vec![w], Init::Zeros);
            push("vision.cls".into(), vec![w], Init::Normal(0.02));
            push("vision.pos".into(), vec![1 + c.num_patches(), w], Init::Normal(0.02));
        } else {
            push("text.token_embedding".into(), vec![c.vocab_size, w], Init::Normal(0.02));
            push("text.pos".into(), vec![c.max_text_len, w], Init::Normal(0.01));
        }
        for l in 0..c.depth {
            let p = format!("{tower}.blocks.{l}");
            push(format!("{p}.ln1.g"), vec![w], Init::Ones);
            push(format!("{p}.ln1.b"), vec![w], Init::Zeros);
            push(format!("{p}.attn.qkv.w"), vec![w, 3 * w], Init::Normal(attn_std));
            push(format!("{p}.attn.qkv.b"), vec![3 * w], Init::Zeros);
            push(format!("{p}.attn.out.w"), vec![w, w], Init::Normal(proj_std));
            push(format!("{p}.attn.out.b"), vec![w], Init::Zeros);
            push(format!("{p}.ln2.g"), vec![w], Init::Ones);
            push(format!("{p}.ln2.b"), vec![w], Init::Zeros);
            push(format!("{p}.mlp.fc1.w"), vec![w, h], Init::Normal(attn_std));
            push(format!("{p}.mlp.fc1.b"), vec![h], Init::Zeros);
            push(format!("{p}.mlp.fc2.w"), vec![h, w], Init::Normal(proj_std));
            push(format!("{p}.mlp.fc2.b"), vec![w], Init::Zeros);
        }
        push(format!("{tower}.ln_post.g"), vec![w], Init::Ones);
        push(format!("{tower}.ln_post.b"), vec![w], Init::Zeros);
        push(format!("{tower}.proj"), vec![w, c.shared_dim], Init::Normal(attn_std));
    }
    push(LOGIT_SCALE.into(), vec![], Init::LogitScale);
    out
}

/// All backbone parameters, in a fixed canonical order.
///
/// The logit scale is stored as its logarithm.
#[derive(Debug, Clone)]
pub struct BackboneWeights {
    config: BackboneConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl BackboneWeights {
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let t = match init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::LogitScale => Tensor::scalar(config.logit_scale_init.ln()),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    fn assemble(config: BackboneConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            tensors,
            index,
            frozen: false,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access for an optimizer; refused once frozen.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.frozen {
            return Err(CoreError::Frozen);
        }
        Ok(self.tensors.iter_mut().collect())
    }

    pub fn logit_scale(&self) -> f64 {
        self.tensors[self.index[LOGIT_SCALE]].data()[0].exp()
    }

    /// Clamps the stored log-scale so the effective scale stays at or below its cap.
    pub fn clamp_logit_scale(&mut self) -> Result<()> {
        if self.frozen {
            return Err(CoreError::Frozen);
        }
        let i = self.index[LOGIT_SCALE];
        let v = &mut self.tensors[i].data_mut()[0];
        *v = v.min(MAX_LOGIT_SCALE.ln());
        Ok(())
    }

    /// Content hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    pub fn to_container(&self) -> Container {
        Container {
            meta: json!({"kind": "backbone", "config": self.config}),
            tensors: self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind() != "backbone" {
            return Err(CoreError::WrongKind {
                expected: "backbone",
                got: c.kind().to_string(),
            });
        }
        let config: BackboneConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| CoreError::Format(format!("backbone config: {e}")))?;
        config.validate()?;
        let mut stored: HashMap<String, Tensor> = c.tensors.into_iter().collect();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in layout(&config) {
            let t = stored
                .remove(&name)
                .ok_or_else(|| CoreError::MissingTensor { name: name.clone() })?;
            if t.shape() != shape.as_slice() {
                return Err(CoreError::ShapeMismatch {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(CoreError::Numerical(format!("tensor `{name}` holds non-finite values")));
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = stored.keys().min() {
            return Err(CoreError::Format(format!("unexpected tensor `{extra}` in checkpoint")));
        }
        Ok(Self::assemble(config, names, tensors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'_, 't> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars { weights: self, vars }
    }
}

/// Backbone parameters recorded on one tape.
pub struct ParamVars<'w, 't> {
    weights: &'w BackboneWeights,
    pub vars: Vec<Var<'t>>,
}

impl<'w, 't> ParamVars<'w, 't> {
    pub fn config(&self) -> &'w BackboneConfig {
        &self.weights.config
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        let i = self
            .weights
            .index_of(name)
            .unwrap_or_else(|| panic!("no backbone tensor named `{name}`"));
        self.vars[i]
    }
}
