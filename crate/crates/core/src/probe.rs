//! Zero-shot classification and per-image task-bias probing.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{embed_images, embed_texts, similarity, BackboneWeights};
use crate::prompt::PromptParams;
use crate::synth::{Image, Manifest, PairwiseDataset, TaskId, TaskLabels};
use crate::tensor::{functional, Tensor};
use crate::{CoreError, Result};

/// The prefix placed in front of every option when no task is favoured.
pub const UNIFORM_PREFIX: &str = "This is a photo of a";
const ARTICLE: &str = "{a}";

/// Text prefix per task. `{a}` expands to "a" or "an" for the label that follows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefixTable {
    pub object: String,
    pub action: String,
    pub scene_text: String,
}

impl Default for PrefixTable {
    fn default() -> Self {
        Self::directed()
    }
}

impl PrefixTable {
    pub fn directed() -> Self {
        Self {
            object: format!("This is a photo of {ARTICLE}"),
            action: "This is a photo of someone who is".into(),
            scene_text: "This is a photo of text which reads".into(),
        }
    }

    pub fn uniform() -> Self {
        Self {
            object: UNIFORM_PREFIX.into(),
            action: UNIFORM_PREFIX.into(),
            scene_text: UNIFORM_PREFIX.into(),
        }
    }

    pub fn get(&self, task: TaskId) -> &str {
        match task {
            TaskId::Object => &self.object,
            TaskId::Action => &self.action,
            TaskId::SceneText => &self.scene_text,
        }
    }

    /// Full option text for `label` under `task`'s prefix.
    pub fn text(&self, task: TaskId, label: &str) -> String {
        option_text(self.get(task), label)
    }
}

fn article(label: &str) -> &'static str {
    match label.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u' | 'A' | 'E' | 'I' | 'O' | 'U') => "an",
        _ => "a",
    }
}

/// `prefix` and `label` joined by a space, with `{a}` resolved against `label`.
pub fn option_text(prefix: &str, label: &str) -> String {
    let prefix = prefix.trim_end().replace(ARTICLE, article(label));
    if prefix.is_empty() {
        label.to_string()
    } else {
        format!("{prefix} {label}")
    }
}

/// Embeddings of `prefix + label` for every label, keyed by label.
pub fn label_embeddings(weights: &BackboneWeights, prefix: &str, labels: &[String]) -> Result<HashMap<String, Vec<f64>>> {
    let texts: Vec<String> = labels.iter().map(|l| option_text(prefix, l)).collect();
    let e = embed_texts(weights, &texts)?;
    Ok(labels.iter().cloned().zip(e.rows().map(<[f64]>::to_vec)).collect())
}

/// Options ranked by zero-shot probability, ties kept in option order.
pub fn zero_shot_classify(
    weights: &BackboneWeights,
    image: &Image,
    options: &[String],
    prefix: &str,
    prompt: Option<&PromptParams>,
) -> Result<Vec<(String, f64)>> {
    if options.is_empty() {
        return Err(CoreError::Config("zero-shot classification needs at least one option".into()));
    }
    let (img, _) = embed_images(weights, &[image], prompt, false)?;
    let texts: Vec<String> = options.iter().map(|o| option_text(prefix, o)).collect();
    let txt = embed_texts(weights, &texts)?;
    Ok(rank(img.row(0), &txt, options, weights.logit_scale()))
}

fn rank(img: &[f64], txt: &Tensor, options: &[String], scale: f64) -> Vec<(String, f64)> {
    let logits: Vec<f64> = txt.rows().map(|t| similarity(img, t, scale)).collect();
    let probs = functional::softmax(&Tensor::from_vec(logits)).expect("non-empty options");
    let mut ranked: Vec<(usize, f64)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(i, p)| (options[i].clone(), p)).collect()
}

/// Two-way preference of one image between two tasks' correct answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScore {
    pub image_id: u64,
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub p_b: f64,
    pub chosen: TaskId,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tie: bool,
}

impl BiasScore {
    /// From the raw scaled similarities to answer A and answer B.
    pub fn from_logits(image_id: u64, task_a: TaskId, task_b: TaskId, s_a: f64, s_b: f64) -> Self {
        let p = functional::softmax(&Tensor::from_vec(vec![s_a, s_b])).expect("two logits");
        let tie = s_a == s_b;
        Self {
            image_id,
            task_a,
            task_b,
            p_b: p.data()[1],
            chosen: if s_b > s_a { task_b } else { task_a },
            tie,
        }
    }

    pub fn p_a(&self) -> f64 {
        1.0 - self.p_b
    }
}

/// Probes one image between `label_a` and `label_b` under the uniform prefix.
pub fn probe_pair(
    weights: &BackboneWeights,
    image_id: u64,
    image: &Image,
    (task_a, label_a): (TaskId, &str),
    (task_b, label_b): (TaskId, &str),
) -> Result<BiasScore> {
    let (img, _) = embed_images(weights, &[image], None, false)?;
    let txt = embed_texts(weights, &[option_text(UNIFORM_PREFIX, label_a), option_text(UNIFORM_PREFIX, label_b)])?;
    let s = weights.logit_scale();
    Ok(BiasScore::from_logits(
        image_id,
        task_a,
        task_b,
        similarity(img.row(0), txt.row(0), s),
        similarity(img.row(0), txt.row(1), s),
    ))
}

fn all_labels(manifest: &Manifest, task: TaskId) -> Vec<String> {
    let mut v: Vec<String> = manifest.entries.iter().map(|e| e.labels.get(task).to_string()).collect();
    v.sort();
    v.dedup();
    v
}

/// Image embeddings of `ids`, in order.
pub fn image_embeddings(weights: &BackboneWeights, manifest: &Manifest, ids: &[u64], prompt: Option<&PromptParams>) -> Result<Tensor> {
    let images = ids.iter().map(|&id| manifest.image(id)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    Ok(embed_images(weights, &refs, prompt, false)?.0)
}

/// Probes every image in `ids` for the `(task_a, task_b)` pair, with answer A
/// written under `prefixes.0` and answer B under `prefixes.1`.
pub fn probe_embeddings(
    weights: &BackboneWeights,
    manifest: &Manifest,
    ids: &[u64],
    img: &Tensor,
    (task_a, task_b): (TaskId, TaskId),
    prefixes: (&str, &str),
) -> Result<Vec<BiasScore>> {
    let emb_a = label_embeddings(weights, prefixes.0, &all_labels(manifest, task_a))?;
    let emb_b = label_embeddings(weights, prefixes.1, &all_labels(manifest, task_b))?;
    let s = weights.logit_scale();
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let labels = &manifest.entry(id)?.labels;
            let e = img.row(i);
            let s_a = similarity(e, &emb_a[labels.get(task_a)], s);
            let s_b = similarity(e, &emb_b[labels.get(task_b)], s);
            Ok(BiasScore::from_logits(id, task_a, task_b, s_a, s_b))
        })
        .collect()
}

/// Uniform-prefix probes over `ids`.
pub fn probe_ids(weights: &BackboneWeights, manifest: &Manifest, ids: &[u64], pair: (TaskId, TaskId)) -> Result<Vec<BiasScore>> {
    let img = image_embeddings(weights, manifest, ids, None)?;
    probe_embeddings(weights, manifest, ids, &img, pair, (UNIFORM_PREFIX, UNIFORM_PREFIX))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
    pub total: usize,
}

pub const DEFAULT_BINS: usize = 20;

/// Histogram of `p_b` values over `[0,1]`; a value of exactly 1 lands in the last bin.
pub fn bias_histogram(scores: &[BiasScore], bins: usize) -> Result<BiasHistogram> {
    if bins < 2 {
        return Err(CoreError::Config("a histogram needs at least 2 bins".into()));
    }
    if scores.is_empty() {
        return Err(CoreError::Config("no scores to histogram".into()));
    }
    let mut counts = vec![0usize; bins];
    for s in scores {
        let b = ((s.p_b * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let total = scores.len();
    let width = 1.0 / bins as f64;
    Ok(BiasHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        density: counts.iter().map(|&c| c as f64 / (total as f64 * width)).collect(),
        counts,
        total,
    })
}

impl BiasHistogram {
    /// Fraction of the mass in the outermost `k` bins on each side.
    pub fn tail_mass(&self, k: usize) -> f64 {
        let n = self.counts.len();
        let k = k.min(n / 2);
        let tails: usize = self.counts[..k].iter().chain(&self.counts[n - k..]).sum();
        tails as f64 / self.total as f64
    }

    /// Horizontal bar chart, one line per bin.
    pub fn render(&self, task_a: TaskId, task_b: TaskId) -> String {
        const BAR: usize = 50;
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = format!("p({task_b}): 0 means {task_a}, 1 means {task_b}\n");
        for (i, &c) in self.counts.iter().enumerate() {
            let len = (c * BAR).div_ceil(max);
            let _ = writeln!(
                out,
                "[{:.2}, {:.2}{} {:>6} {}",
                self.edges[i],
                self.edges[i + 1],
                if i + 1 == self.counts.len() { ']' } else { ')' },
                c,
                "#".repeat(len)
            );
        }
        let _ = write!(out, "total {}", self.total);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeEntry {
    pub image_id: u64,
    pub p_b: f64,
    pub labels: TaskLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeReport {
    pub task_a: TaskId,
    pub task_b: TaskId,
    /// Most biased toward task A, smallest `p_b` first.
    pub toward_a: Vec<ExtremeEntry>,
    /// Most biased toward task B, largest `p_b` first.
    pub toward_b: Vec<ExtremeEntry>,
}

pub fn extreme_bias_report(scores: &[BiasScore], manifest: &Manifest, k: usize) -> Result<ExtremeReport> {
    if scores.is_empty() || k > scores.len() {
        return Err(CoreError::Config(format!("cannot take {k} extremes from {} scores", scores.len())));
    }
    let mut sorted: Vec<&BiasScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.p_b.total_cmp(&b.p_b).then(a.image_id.cmp(&b.image_id)));
    let entry = |s: &BiasScore| -> Result<ExtremeEntry> {
        Ok(ExtremeEntry {
            image_id: s.image_id,
            p_b: s.p_b,
            labels: manifest.entry(s.image_id)?.labels.clone(),
        })
    };
    let toward_a = sorted[..k].iter().map(|s| entry(s)).collect::<Result<_>>()?;
    let toward_b = sorted.iter().rev().take(k).map(|s| entry(s)).collect::<Result<_>>()?;
    Ok(ExtremeReport {
        task_a: scores[0].task_a,
        task_b: scores[0].task_b,
        toward_a,
        toward_b,
    })
}

/// Selection rate of one task in the uniform and the task-directed pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixDelta {
    pub task: TaskId,
    pub rate_uniform_pct: f64,
    pub rate_directed_pct: f64,
    pub delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixReport {
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub images: usize,
    pub deltas: Vec<PrefixDelta>,
}

fn rate(scores: &[BiasScore], task: TaskId) -> f64 {
    100.0 * scores.iter().filter(|s| s.chosen == task).count() as f64 / scores.len() as f64
}

/// For each task X of the pair, how much writing both options under X's
/// directed prefix changes how often X's answer is chosen, relative to
/// writing both under the baseline table's prefixes.
pub fn text_prefix_delta(
    weights: &BackboneWeights,
    manifest: &Manifest,
    dataset: &PairwiseDataset,
    baseline: &PrefixTable,
    directed: &PrefixTable,
) -> Result<PrefixReport> {
    let ids = &dataset.test;
    if ids.is_empty() {
        return Err(CoreError::Config("empty test split".into()));
    }
    let pair = (dataset.task_a, dataset.task_b);
    let img = image_embeddings(weights, manifest, ids, None)?;
    let pass = |table: &PrefixTable, task: TaskId| {
        let p = table.get(task);
        probe_embeddings(weights, manifest, ids, &img, pair, (p, p))
    };
    let mut deltas = Vec::with_capacity(2);
    for task in dataset.tasks() {
        let uniform = rate(&pass(baseline, task)?, task);
        let steered = rate(&pass(directed, task)?, task);
        deltas.push(PrefixDelta {
            task,
            rate_uniform_pct: uniform,
            rate_directed_pct: steered,
            delta_pct: steered - uniform,
        });
    }
    Ok(PrefixReport {
        task_a: pair.0,
        task_b: pair.1,
        images: ids.len(),
        deltas,
    })
}
