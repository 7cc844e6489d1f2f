//! Deterministic multi-task image generator.
//!
//! Every image composes three independently legible parts, each confined to
//! its own region of the canvas:
//!
//! * a scene-text word in a band across the top,
//! * an object glyph in the central column,
//! * an action motif (oriented stroke texture) in the two side strips.
//!
//! The regions line up with the backbone's default 8-pixel patch grid, so
//! attention claims can be checked against known ground truth.

mod caption;
pub mod font;
mod manifest;
mod pairwise;
pub mod ppm;
mod render;

pub use caption::{sample_caption, wrap_caption, CaptionPolicy};
pub use manifest::{generate_corpus, CorpusConfig, Manifest, ManifestEntry, MultiTaskExample, MANIFEST_FILE};
pub use pairwise::{build_pairwise_dataset, split_ids, PairwiseDataset, DEFAULT_TRAIN_FRACTION};
pub use render::{render_example, render_image, Image, Region, RegionLayout};

use serde::{Deserialize, Serialize};

/// The three recognition tasks every example is labelled for.
///
/// The declaration order is the canonical order; pairs are written with the
/// smaller task first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Object,
    Action,
    SceneText,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Object, TaskId::Action, TaskId::SceneText];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Object => "object",
            TaskId::Action => "action",
            TaskId::SceneText => "scene_text",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Correct answer for each task on one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLabels {
    pub object: String,
    pub action: String,
    pub scene_text: String,
}

impl TaskLabels {
    pub fn get(&self, task: TaskId) -> &str {
        match task {
            TaskId::Object => &self.object,
            TaskId::Action => &self.action,
            TaskId::SceneText => &self.scene_text,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, &str)> {
        TaskId::ALL.into_iter().map(move |t| (t, self.get(t)))
    }
}

/// Label vocabularies of the three tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub scene_texts: Vec<String>,
}

const OBJECTS: [&str; 12] = [
    "circle", "ring", "square", "frame", "triangle", "diamond", "plus", "hourglass", "crescent",
    "arrow", "bowtie", "pillar",
];
const ACTIONS: [&str; 8] = ["lift", "run", "throw", "fall", "jump", "wave", "spin", "swing"];
const SCENE_TEXTS: [&str; 20] = [
    "kiwi", "zebra", "pluto", "jazz", "ocean", "tokyo", "lemon", "delta", "omega", "piano",
    "radio", "quiz", "vivid", "nova", "echo", "taxi", "yoga", "mango", "polka", "fjord",
];

impl Default for Vocabulary {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            objects: own(&OBJECTS),
            actions: own(&ACTIONS),
            scene_texts: own(&SCENE_TEXTS),
        }
    }
}

impl Vocabulary {
    pub fn labels(&self, task: TaskId) -> &[String] {
        match task {
            TaskId::Object => &self.objects,
            TaskId::Action => &self.actions,
            TaskId::SceneText => &self.scene_texts,
        }
    }

    /// Task that owns `label`, if any.
    pub fn task_of(&self, label: &str) -> Option<TaskId> {
        TaskId::ALL
            .into_iter()
            .find(|&t| self.labels(t).iter().any(|l| l == label))
    }

    pub(crate) fn validate(&self) -> crate::Result<()> {
        for t in TaskId::ALL {
            if self.labels(t).is_empty() {
                return Err(crate::CoreError::EmptyVocabulary(t));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_vocabulary_sizes() {
        let v = Vocabulary::default();
        assert_eq!(v.objects.len(), 12);
        assert_eq!(v.actions.len(), 8);
        assert_eq!(v.scene_texts.len(), 20);
    }

    #[test]
    fn labels_never_collide_across_tasks() {
        let v = Vocabulary::default();
        let mut seen = HashSet::new();
        for t in TaskId::ALL {
            for l in v.labels(t) {
                assert!(seen.insert(l.clone()), "{l} appears twice");
                assert_eq!(v.task_of(l), Some(t));
            }
        }
    }

    #[test]
    fn scene_text_fits_the_band() {
        for w in SCENE_TEXTS {
            assert!(w.len() <= 5, "{w}");
            assert!(w.chars().all(|c| font::glyph(c).is_some()));
        }
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(TaskId::parse(t.name()), Some(t));
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.name()));
        }
    }
}
