use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{stream, CAPTION_STREAM};
use super::{TaskId, TaskLabels};
use crate::{CoreError, Result};

/// Standard zero-shot prefix; also wraps every pretraining caption.
pub const STANDARD_PREFIX: &str = "This is a photo of a";

/// Which task's answer a pretraining caption names.
///
/// This is the lever that induces task bias in the toy backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CaptionPolicy {
    Uniform,
    Skewed { object: f64, action: f64, scene_text: f64 },
    /// Task chosen by hashing the image id: deterministic per image but
    /// unrelated to its content.
    ContentHashed,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl CaptionPolicy {
    fn validate(&self) -> Result<()> {
        if let CaptionPolicy::Skewed {
            object,
            action,
            scene_text,
        } = *self
        {
            let probs = [object, action, scene_text];
            let total: f64 = probs.iter().sum();
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
                return Err(CoreError::InvalidPolicy(format!(
                    "skewed probabilities {probs:?} must lie in [0,1] and sum to 1"
                )));
            }
        }
        Ok(())
    }

    /// Task whose answer becomes the caption.
    pub fn pick_task(&self, image_id: u64, seed: u64) -> Result<TaskId> {
        self.validate()?;
        let mut rng = stream(seed, CAPTION_STREAM);
        Ok(match *self {
            CaptionPolicy::Uniform => TaskId::ALL[rng.gen_range(0..3)],
            CaptionPolicy::Skewed {
                object, action, ..
            } => {
                let u: f64 = rng.gen();
                if u < object {
                    TaskId::Object
                } else if u < object + action {
                    TaskId::Action
                } else {
                    TaskId::SceneText
                }
            }
            CaptionPolicy::ContentHashed => TaskId::ALL[(splitmix64(image_id) % 3) as usize],
        })
    }
}

/// The answer of the task selected by `policy`.
pub fn sample_caption(labels: &TaskLabels, policy: &CaptionPolicy, image_id: u64, seed: u64) -> Result<String> {
    let task = policy.pick_task(image_id, seed)?;
    Ok(labels.get(task).to_string())
}

/// Pretraining caption for a bare answer.
pub fn wrap_caption(label: &str) -> String {
    format!("{} {}", STANDARD_PREFIX.to_lowercase(), label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> TaskLabels {
        TaskLabels {
            object: "circle".into(),
            action: "lift".into(),
            scene_text: "kiwi".into(),
        }
    }

    #[test]
    fn uniform_is_roughly_even() {
        let mut counts = [0usize; 3];
        for s in 0..10_000u64 {
            counts[CaptionPolicy::Uniform.pick_task(s, s).unwrap().index()] += 1;
        }
        for c in counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn degenerate_skew_always_objects() {
        let p = CaptionPolicy::Skewed {
            object: 1.0,
            action: 0.0,
            scene_text: 0.0,
        };
        for s in 0..500 {
            assert_eq!(sample_caption(&labels(), &p, s, s * 31).unwrap(), "circle");
        }
    }

    #[test]
    fn content_hashed_depends_only_on_id() {
        let p = CaptionPolicy::ContentHashed;
        for id in 0..200 {
            let a = sample_caption(&labels(), &p, id, 1).unwrap();
            let b = sample_caption(&labels(), &p, id, 999).unwrap();
            assert_eq!(a, b);
        }
        let mut counts = [0usize; 3];
        for id in 0..3000 {
            counts[p.pick_task(id, 0).unwrap().index()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 900), "{counts:?}");
    }

    #[test]
    fn bad_probabilities_rejected() {
        let p = CaptionPolicy::Skewed {
            object: 0.5,
            action: 0.2,
            scene_text: 0.2,
        };
        assert!(matches!(p.pick_task(0, 0), Err(CoreError::InvalidPolicy(_))));
    }

    #[test]
    fn caption_is_lowercase_prefix_plus_label() {
        assert_eq!(wrap_caption("lift"), "this is a photo of a lift");
    }
}
