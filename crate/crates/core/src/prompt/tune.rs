use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PromptParams, PromptVariant};
use crate::backbone::{model, stack_images, BackboneWeights, ParamVars};
use crate::probe::{image_embeddings, label_embeddings, UNIFORM_PREFIX};
use crate::synth::{Image, Manifest, PairwiseDataset, TaskId};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub target: TaskId,
    pub variant: PromptVariant,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            target: TaskId::Object,
            variant: PromptVariant::VisualToken { tokens: 1 },
            epochs: 1,
            lr: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Prompt loss of one batch, recorded on a tape.
pub struct PromptLoss<'t> {
    pub loss: Var<'t>,
    /// `[B, n]` scaled similarities to each image's candidate answers.
    pub logits: Var<'t>,
    pub phi: Option<Var<'t>>,
}

/// Cross-entropy toward answer `target` among each image's `n` candidate
/// answers. `answers` holds the `B·n` answer embeddings, row-major per image.
pub fn prompt_loss_var<'t>(
    tape: &'t Tape,
    params: &ParamVars<'_, 't>,
    prompt: &PromptParams,
    trainable: bool,
    images: &[&Image],
    answers: &Tensor,
    target: usize,
) -> Result<PromptLoss<'t>> {
    let cfg = params.config();
    let b = images.len();
    let n = answers.shape()[0] / b.max(1);
    if b == 0 || n * b != answers.shape()[0] {
        return Err(CoreError::Config("answer embeddings do not match the image batch".into()));
    }
    if n < 2 {
        return Err(CoreError::Config("the prompt objective needs at least 2 answers per image".into()));
    }
    if target >= n {
        return Err(CoreError::Config(format!("target index {target} out of range for {n} answers")));
    }
    let x = tape.constant(stack_images(images, cfg.image_size)?);
    let a = prompt.attach(tape, x, cfg, trainable)?;
    let img = model::encode_images(params, a.images, a.tokens, false).embeddings;
    let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(n)).collect();
    let d = cfg.shared_dim;
    let ones = tape.constant(Tensor::full(vec![d, 1], 1.0));
    let logits = (img.gather_rows(&rows) * tape.constant(answers.clone()))
        .matmul(ones)
        .reshape(vec![b, n])
        .scale_by(model::logit_scale(params));
    let loss = logits.cross_entropy(&vec![target; b])?;
    Ok(PromptLoss { loss, logits, phi: a.phi })
}

fn answer_rows(emb: &HashMap<String, Vec<f64>>, label_sets: &[Vec<String>]) -> Result<Tensor> {
    let d = emb.values().next().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(label_sets.len() * 2 * d);
    for set in label_sets {
        for l in set {
            data.extend_from_slice(&emb[l]);
        }
    }
    let n = label_sets.first().map_or(0, Vec::len);
    if label_sets.iter().any(|s| s.len() != n) {
        return Err(CoreError::Config("every image needs the same number of answers".into()));
    }
    Ok(Tensor::new(vec![label_sets.len() * n, d], data)?)
}

/// Loss and gradient with respect to the prompt parameters for a batch of
/// images, each with its own answer set under the uniform prefix.
pub fn prompt_loss_and_grad(
    weights: &BackboneWeights,
    images: &[&Image],
    label_sets: &[Vec<String>],
    target: usize,
    prompt: &PromptParams,
) -> Result<(f64, Option<Tensor>)> {
    let mut labels: Vec<String> = label_sets.iter().flatten().cloned().collect();
    labels.sort();
    labels.dedup();
    if labels.is_empty() {
        return Err(CoreError::Config("no answers given".into()));
    }
    let emb = label_embeddings(weights, UNIFORM_PREFIX, &labels)?;
    let answers = answer_rows(&emb, label_sets)?;
    let tape = Tape::new();
    let p = weights.on_tape(&tape, false);
    let out = prompt_loss_var(&tape, &p, prompt, true, images, &answers, target)?;
    let loss = out.loss.item()?;
    let grad = match out.phi {
        Some(phi) => Some(tape.gradient_of(out.loss, &[phi])?.remove(0)),
        None => None,
    };
    if let Some(e) = tape.poisoned() {
        return Err(CoreError::Numerical(e.to_string()));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneStep {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TuneOutcome {
    pub prompt: PromptParams,
    pub log: Vec<TuneStep>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

fn pair_labels(manifest: &Manifest, id: u64, dataset: &PairwiseDataset) -> Result<Vec<String>> {
    let e = manifest.entry(id)?;
    Ok(dataset.tasks().iter().map(|&t| e.labels.get(t).to_string()).collect())
}

/// Learns a prompt steering the frozen backbone toward `config.target` on the
/// training split of `dataset`.
pub fn tune_prompt(weights: &BackboneWeights, manifest: &Manifest, dataset: &PairwiseDataset, config: &TuneConfig) -> Result<TuneOutcome> {
    let target = dataset
        .tasks()
        .iter()
        .position(|&t| t == config.target)
        .ok_or_else(|| CoreError::Config(format!("target {} is not part of the pair", config.target)))?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(CoreError::Config("epochs and batch_size must be at least 1".into()));
    }
    if dataset.train.is_empty() {
        return Err(CoreError::Config("empty training split".into()));
    }
    let before = weights.fingerprint();
    let mut prompt = PromptParams::init(config.variant, weights, Some(config.target), config.seed)?;
    let mut log = Vec::new();
    if let Some(mut values) = prompt.values.take() {
        let images: HashMap<u64, Image> = dataset
            .train
            .iter()
            .map(|&id| Ok((id, manifest.image(id)?)))
            .collect::<Result<_>>()?;
        let mut labels: Vec<String> = Vec::new();
        let mut sets = HashMap::new();
        for &id in &dataset.train {
            let s = pair_labels(manifest, id, dataset)?;
            labels.extend(s.iter().cloned());
            sets.insert(id, s);
        }
        labels.sort();
        labels.dedup();
        let emb = label_embeddings(weights, UNIFORM_PREFIX, &labels)?;
        let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &[&values]);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut step = 0;
        for epoch in 1..=config.epochs {
            let mut ids = dataset.train.clone();
            ids.shuffle(&mut rng);
            for chunk in ids.chunks(config.batch_size) {
                let batch_sets: Vec<Vec<String>> = chunk.iter().map(|id| sets[id].clone()).collect();
                let answers = answer_rows(&emb, &batch_sets)?;
                let refs: Vec<&Image> = chunk.iter().map(|id| &images[id]).collect();
                let current = PromptParams {
                    values: Some(values.clone()),
                    ..prompt.clone()
                };
                let tape = Tape::new();
                let p = weights.on_tape(&tape, false);
                let out = prompt_loss_var(&tape, &p, &current, true, &refs, &answers, target)?;
                let loss = out.loss.item()?;
                if let Some(e) = tape.poisoned() {
                    return Err(CoreError::Numerical(format!("prompt tuning step {step}: {e}")));
                }
                if !loss.is_finite() {
                    return Err(CoreError::Numerical(format!("prompt tuning step {step}: loss {loss}")));
                }
                let phi = out.phi.expect("non-null prompt sits on the tape");
                let grad = tape.gradient_of(out.loss, &[phi])?;
                adam.step(&mut [&mut values], &grad)?;
                log.push(TuneStep { epoch, step, loss });
                step += 1;
            }
        }
        prompt.values = Some(values);
    }
    prompt.task = Some(config.target);
    let after = weights.fingerprint();
    if before != after {
        return Err(CoreError::Numerical("backbone weights changed during prompt tuning".into()));
    }
    Ok(TuneOutcome {
        prompt,
        log,
        backbone_hash_before: before,
        backbone_hash_after: after,
    })
}

/// Percentage of `ids` whose two-way choice under the uniform prefix is
/// `intended`'s answer.
pub fn eval_disambiguation(
    weights: &BackboneWeights,
    manifest: &Manifest,
    dataset: &PairwiseDataset,
    ids: &[u64],
    prompt: Option<&PromptParams>,
    intended: TaskId,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(CoreError::Config("empty test split".into()));
    }
    if dataset.other(intended).is_none() {
        return Err(CoreError::Config(format!("{intended} is not part of the pair")));
    }
    if let Some(p) = prompt {
        p.check_backbone(weights)?;
    }
    let img = image_embeddings(weights, manifest, ids, prompt)?;
    let scores = crate::probe::probe_embeddings(
        weights,
        manifest,
        ids,
        &img,
        (dataset.task_a, dataset.task_b),
        (UNIFORM_PREFIX, UNIFORM_PREFIX),
    )?;
    let hits = scores.iter().filter(|s| s.chosen == intended).count();
    Ok(100.0 * hits as f64 / ids.len() as f64)
}

/// Zero-shot accuracy (percent) over the full `vocabulary` of object labels.
pub fn eval_downstream(
    weights: &BackboneWeights,
    manifest: &Manifest,
    ids: &[u64],
    vocabulary: &[String],
    prompt: Option<&PromptParams>,
) -> Result<f64> {
    if vocabulary.is_empty() {
        return Err(CoreError::Config("empty category vocabulary".into()));
    }
    if ids.is_empty() {
        return Err(CoreError::Config("empty test split".into()));
    }
    if let Some(p) = prompt {
        p.check_backbone(weights)?;
    }
    let img = image_embeddings(weights, manifest, ids, prompt)?;
    let emb = label_embeddings(weights, UNIFORM_PREFIX, vocabulary)?;
    let s = weights.logit_scale();
    let mut hits = 0;
    for (i, &id) in ids.iter().enumerate() {
        let e = img.row(i);
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (j, label) in vocabulary.iter().enumerate() {
            let v = crate::backbone::similarity(e, &emb[label], s);
            if v > best_s {
                best = j;
                best_s = v;
            }
        }
        if vocabulary[best] == manifest.entry(id)?.labels.object {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / ids.len() as f64)
}

/// One row of the disambiguation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationRow {
    pub pair: String,
    pub direction: TaskId,
    pub method: String,
    pub selection_pct: f64,
}
