//! Symmetric batch-contrastive pretraining of the backbone.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{model, tokenize_all, stack_images, BackboneConfig, BackboneWeights};
use crate::synth::{sample_caption, split_ids, wrap_caption, CaptionPolicy, Image, Manifest, ManifestEntry};
use crate::tensor::{functional, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Overrides the manifest's captions when set.
    pub policy: Option<CaptionPolicy>,
    pub holdout_fraction: f64,
    pub backbone: BackboneConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr: 3e-4,
            seed: 0,
            policy: None,
            holdout_fraction: 0.1,
            backbone: BackboneConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CoreError::Config("contrastive batches need at least 2 pairs".into()));
        }
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(CoreError::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        self.backbone.validate()
    }

    /// `(train, holdout)` ids; everything downstream evaluates on the holdout.
    pub fn split(&self, manifest: &Manifest) -> (Vec<u64>, Vec<u64>) {
        split_ids(&manifest.ids(), 1.0 - self.holdout_fraction, self.seed)
    }
}

/// One line of the metrics log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub holdout_top1: f64,
}

/// Mean of the row-wise and column-wise cross-entropies of an `[N, N]` logit matrix.
pub fn infonce_var<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
        return Err(CoreError::Config(format!(
            "contrastive loss needs an N×N logit matrix with N ≥ 2, got {shape:?}"
        )));
    }
    let n = shape[0];
    let targets: Vec<usize> = (0..n).collect();
    let transpose: Vec<isize> = (0..n)
        .flat_map(|r| (0..n).map(move |c| (c * n + r) as isize))
        .collect();
    let rows = logits.cross_entropy(&targets)?;
    let cols = logits.gather(transpose, vec![n, n]).cross_entropy(&targets)?;
    Ok((rows + cols).scale(0.5))
}

/// Contrastive loss of unit-norm embedding rows `[N, d]` at a fixed scale.
pub fn infonce_loss(img: &Tensor, txt: &Tensor, logit_scale: f64) -> Result<f64> {
    if img.shape() != txt.shape() || img.ndim() != 2 {
        return Err(CoreError::Config(format!(
            "embedding batches differ: {:?} vs {:?}",
            img.shape(),
            txt.shape()
        )));
    }
    let n = img.shape()[0];
    if n < 2 {
        return Err(CoreError::Config("contrastive loss needs at least 2 pairs".into()));
    }
    let sims = functional::matmul(img, &transpose(txt))?;
    let logits = sims.map(|s| s * logit_scale);
    let mut total = 0.0;
    for i in 0..n {
        total += functional::cross_entropy(&Tensor::from_vec(logits.row(i).to_vec()), i)?.item()?;
        let col: Vec<f64> = (0..n).map(|r| logits.row(r)[i]).collect();
        total += functional::cross_entropy(&Tensor::from_vec(col), i)?.item()?;
    }
    Ok(total / (2 * n) as f64)
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| t.data()[(i % r) * c + i / r])
}

/// Caption of every manifest entry under the run's policy.
pub fn captions(manifest: &Manifest, policy: Option<&CaptionPolicy>) -> Result<HashMap<u64, String>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let c = match policy {
                Some(p) => wrap_caption(&sample_caption(&e.labels, p, e.id, e.seed)?),
                None => e.caption.clone(),
            };
            Ok((e.id, c))
        })
        .collect()
}

struct Corpus<'m> {
    entries: HashMap<u64, &'m ManifestEntry>,
    images: HashMap<u64, Image>,
    captions: HashMap<u64, String>,
}

impl<'m> Corpus<'m> {
    fn load(manifest: &'m Manifest, policy: Option<&CaptionPolicy>) -> Result<Self> {
        let mut images = HashMap::with_capacity(manifest.len());
        for e in &manifest.entries {
            images.insert(e.id, manifest.image(e.id)?);
        }
        Ok(Self {
            entries: manifest.entries.iter().map(|e| (e.id, e)).collect(),
            images,
            captions: captions(manifest, policy)?,
        })
    }

    fn batch_images(&self, ids: &[u64], size: usize) -> Result<Tensor> {
        let refs: Vec<&Image> = ids.iter().map(|id| &self.images[id]).collect();
        stack_images(&refs, size)
    }

    /// Distinct captions of a batch plus, per example, its row among them.
    fn batch_captions(&self, ids: &[u64]) -> (Vec<String>, Vec<usize>) {
        let mut uniq: Vec<String> = Vec::new();
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            let c = &self.captions[id];
            let r = match uniq.iter().position(|u| u == c) {
                Some(r) => r,
                None => {
                    uniq.push(c.clone());
                    uniq.len() - 1
                }
            };
            rows.push(r);
        }
        (uniq, rows)
    }
}

/// Forward pass of one batch; returns the loss node and the logit matrix.
fn batch_loss<'t>(
    tape: &'t Tape,
    params: &crate::backbone::ParamVars<'_, 't>,
    corpus: &Corpus<'_>,
    ids: &[u64],
) -> Result<(Var<'t>, Var<'t>)> {
    let cfg = params.config();
    let images = tape.constant(corpus.batch_images(ids, cfg.image_size)?);
    let img = model::encode_images(params, images, None, false).embeddings;
    let (uniq, rows) = corpus.batch_captions(ids);
    let txt = model::encode_texts(params, &tokenize_all(&uniq, cfg)?).gather_rows(&rows);
    let logits = model::similarity_logits(img, txt, model::logit_scale(params));
    Ok((infonce_var(logits)?, logits))
}

fn check(tape: &Tape, loss: f64, what: &str) -> Result<()> {
    if let Some(e) = tape.poisoned() {
        return Err(CoreError::Numerical(format!("{what}: {e}")));
    }
    if !loss.is_finite() {
        return Err(CoreError::Numerical(format!("{what}: loss became {loss}")));
    }
    Ok(())
}

fn batches(ids: &[u64], size: usize) -> impl Iterator<Item = &[u64]> {
    ids.chunks(size).filter(|c| c.len() >= 2)
}

/// Mean loss over `ids` without updating anything.
fn eval_loss(weights: &BackboneWeights, corpus: &Corpus<'_>, ids: &[u64], batch: usize) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0);
    for chunk in batches(ids, batch) {
        let tape = Tape::new();
        let p = weights.on_tape(&tape, false);
        let (loss, _) = batch_loss(&tape, &p, corpus, chunk)?;
        let v = loss.item()?;
        check(&tape, v, "evaluation")?;
        total += v;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Fraction of held-out images whose best-scoring caption in their batch names
/// one of the image's own labels.
pub fn holdout_top1(weights: &BackboneWeights, manifest: &Manifest, captions: &HashMap<u64, String>, ids: &[u64], batch: usize) -> Result<f64> {
    let corpus = Corpus {
        entries: manifest.entries.iter().map(|e| (e.id, e)).collect(),
        images: HashMap::new(),
        captions: captions.clone(),
    };
    let mut images = HashMap::new();
    for id in ids {
        images.insert(*id, manifest.image(*id)?);
    }
    let corpus = Corpus { images, ..corpus };
    top1(weights, &corpus, ids, batch)
}

fn top1(weights: &BackboneWeights, corpus: &Corpus<'_>, ids: &[u64], batch: usize) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in batches(ids, batch) {
        let tape = Tape::new();
        let p = weights.on_tape(&tape, false);
        let (_, logits) = batch_loss(&tape, &p, corpus, chunk)?;
        let logits = logits.value();
        for (i, id) in chunk.iter().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let retrieved = &corpus.captions[&chunk[best]];
            let labels = &corpus.entries[id].labels;
            if labels.iter().any(|(_, l)| *retrieved == wrap_caption(l)) {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

pub struct PretrainOutcome {
    pub weights: BackboneWeights,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a fresh backbone on the manifest, writing the checkpoint and the
/// metrics log. `progress` sees every metrics line as it is produced.
pub fn train_backbone(
    manifest: &Manifest,
    config: &PretrainConfig,
    checkpoint: &Path,
    metrics_log: &Path,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<PretrainOutcome> {
    config.validate()?;
    if manifest.len() < config.batch_size {
        return Err(CoreError::TooFewExamples {
            need: config.batch_size,
            got: manifest.len(),
        });
    }
    let corpus = Corpus::load(manifest, config.policy.as_ref())?;
    let (train, holdout) = config.split(manifest);
    let mut weights = BackboneWeights::init(&config.backbone, config.seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &weights.tensors().iter().collect::<Vec<_>>());

    if let Some(dir) = metrics_log.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut log = fs::File::create(metrics_log).map_err(|e| CoreError::io(metrics_log, e))?;
    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let mut emit = |m: EpochMetrics, metrics: &mut Vec<EpochMetrics>| -> Result<()> {
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|e| CoreError::io(metrics_log, e))?;
        progress(&m);
        metrics.push(m);
        Ok(())
    };

    let order = |epoch: usize| {
        let mut ids = train.clone();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
        ids
    };
    let initial = eval_loss(&weights, &corpus, &order(1), config.batch_size)?;
    let top = top1(&weights, &corpus, &holdout, config.batch_size)?;
    emit(
        EpochMetrics {
            epoch: 0,
            loss: initial,
            holdout_top1: top,
        },
        &mut metrics,
    )?;

    for epoch in 1..=config.epochs {
        let ids = order(epoch);
        let (mut total, mut count) = (0.0, 0);
        for chunk in batches(&ids, config.batch_size) {
            let tape = Tape::new();
            let p = weights.on_tape(&tape, true);
            let (loss, _) = batch_loss(&tape, &p, &corpus, chunk)?;
            let v = loss.item()?;
            check(&tape, v, &format!("epoch {epoch}"))?;
            let grads = tape.gradient_of(loss, &p.vars)?;
            drop(p);
            let mut params = weights.tensors_mut()?;
            adam.step(&mut params, &grads)?;
            weights.clamp_logit_scale()?;
            total += v;
            count += 1;
        }
        let top = top1(&weights, &corpus, &holdout, config.batch_size)?;
        emit(
            EpochMetrics {
                epoch,
                loss: total / count.max(1) as f64,
                holdout_top1: top,
            },
            &mut metrics,
        )?;
    }
    weights.freeze();
    weights.save(checkpoint)?;
    Ok(PretrainOutcome { weights, metrics })
}

/// Loads a checkpoint and marks it frozen.
pub fn load_checkpoint(path: &Path) -> Result<BackboneWeights> {
    let mut w = BackboneWeights::load(path)?;
    w.freeze();
    Ok(w)
}
