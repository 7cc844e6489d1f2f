use serde::{Deserialize, Serialize};

use super::tokenizer::VOCAB_SIZE;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_width: usize,
    pub depth: usize,
    pub heads: usize,
    pub shared_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub logit_scale_init: f64,
    /// Hidden width of each feed-forward block, as a multiple of `embed_width`.
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_width: 64,
            depth: 3,
            heads: 4,
            shared_dim: 64,
            vocab_size: VOCAB_SIZE,
            max_text_len: 48,
            logit_scale_init: 1.0 / 0.07,
            mlp_ratio: 4,
        }
    }
}

/// Upper bound on the logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        let sizes = [
            self.image_size,
            self.patch_size,
            self.embed_width,
            self.depth,
            self.heads,
            self.shared_dim,
            self.max_text_len,
            self.mlp_ratio,
        ];
        if sizes.contains(&0) {
            return bad("backbone sizes must all be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_width % self.heads != 0 {
            return bad(format!(
                "embed_width {} is not divisible by heads {}",
                self.embed_width, self.heads
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must leave room for the begin and end markers".into());
        }
        if !(self.logit_scale_init > 0.0 && self.logit_scale_init <= MAX_LOGIT_SCALE) {
            return bad(format!("logit_scale_init must lie in (0, {MAX_LOGIT_SCALE}]"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_width / self.heads
    }

    pub fn hidden_width(&self) -> usize {
        self.embed_width * self.mlp_ratio
    }
}
