//! Dual-encoder backbone: a small vision transformer over image patches and a
//! small text transformer over characters, both projected onto a shared
//! unit sphere.

pub mod checkpoint;
mod config;
pub mod model;
pub mod tokenizer;
mod weights;

pub use config::{BackboneConfig, MAX_LOGIT_SCALE};
pub use model::{AttentionRecord, SequenceLayout};
pub use tokenizer::{tokenize, TokenSequence};
pub use weights::{BackboneWeights, ParamVars, LOGIT_SCALE};

use crate::prompt::PromptParams;
use crate::synth::Image;
use crate::tensor::{Tape, Tensor};
use crate::{CoreError, Result};

/// Images per forward pass during inference.
pub const INFERENCE_BATCH: usize = 64;

/// Stacks images into a `[B, size, size, 3]` tensor with values in `[0,1]`.
pub fn stack_images(images: &[&Image], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size * 3);
    for img in images {
        if img.size() != size {
            return Err(CoreError::Dimension {
                what: "image size",
                expected: size,
                got: img.size(),
            });
        }
        data.extend(img.pixels().iter().map(|&p| p as f64 / 255.0));
    }
    Ok(Tensor::new(vec![images.len(), size, size, 3], data)?)
}

pub fn tokenize_all(texts: &[impl AsRef<str>], config: &BackboneConfig) -> Result<Vec<TokenSequence>> {
    texts
        .iter()
        .map(|t| tokenize(t.as_ref(), config.max_text_len))
        .collect()
}

fn check_tape(tape: &Tape) -> Result<()> {
    match tape.poisoned() {
        Some(e) => Err(CoreError::Numerical(e.to_string())),
        None => Ok(()),
    }
}

/// Image embeddings `[n, d]`, optionally with per-image attention records.
pub fn embed_images(
    weights: &BackboneWeights,
    images: &[&Image],
    prompt: Option<&PromptParams>,
    record: bool,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    if images.is_empty() {
        return Err(CoreError::Config("no images to embed".into()));
    }
    let cfg = weights.config();
    let d = cfg.shared_dim;
    let mut out = Vec::with_capacity(images.len() * d);
    let mut records = Vec::new();
    for chunk in images.chunks(INFERENCE_BATCH) {
        let tape = Tape::new();
        let p = weights.on_tape(&tape, false);
        let x = tape.constant(stack_images(chunk, cfg.image_size)?);
        let (x, tokens) = match prompt {
            Some(pp) => {
                let a = pp.attach(&tape, x, cfg, false)?;
                (a.images, a.tokens)
            }
            None => (x, None),
        };
        let v = model::encode_images(&p, x, tokens, record);
        check_tape(&tape)?;
        out.extend_from_slice(v.embeddings.value().data());
        records.extend(v.attention);
    }
    Ok((Tensor::new(vec![images.len(), d], out)?, records))
}

/// Text embeddings `[n, d]`.
pub fn embed_texts(weights: &BackboneWeights, texts: &[impl AsRef<str>]) -> Result<Tensor> {
    if texts.is_empty() {
        return Err(CoreError::Config("no texts to embed".into()));
    }
    let seqs = tokenize_all(texts, weights.config())?;
    let d = weights.config().shared_dim;
    let mut out = Vec::with_capacity(texts.len() * d);
    for chunk in seqs.chunks(INFERENCE_BATCH) {
        let tape = Tape::new();
        let p = weights.on_tape(&tape, false);
        let e = model::encode_texts(&p, chunk);
        check_tape(&tape)?;
        out.extend_from_slice(e.value().data());
    }
    Ok(Tensor::new(vec![texts.len(), d], out)?)
}

/// `logit_scale · ⟨a, b⟩` for unit vectors.
pub fn similarity(a: &[f64], b: &[f64], logit_scale: f64) -> f64 {
    logit_scale * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_image, TaskLabels};

    fn tiny() -> BackboneWeights {
        BackboneWeights::init(&BackboneConfig::default(), 5).unwrap()
    }

    fn image(o: &str) -> Image {
        let labels = TaskLabels {
            object: o.into(),
            action: "run".into(),
            scene_text: "kiwi".into(),
        };
        render_image(&labels, 1, 32)
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let w = tiny();
        let imgs = [image("ring"), image("plus")];
        let refs: Vec<_> = imgs.iter().collect();
        let (e, recs) = embed_images(&w, &refs, None, true).unwrap();
        for r in e.rows() {
            let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let (again, _) = embed_images(&w, &refs, None, false).unwrap();
        assert!(e.bit_eq(&again));
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].layout.len(), 17);
        assert_eq!(recs[0].layers.len(), 3);
        for layer in &recs[0].layers {
            for row in layer.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        let t = embed_texts(&w, &["lift", "this is a photo of a lift"]).unwrap();
        for r in t.rows() {
            let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batching_and_padding_do_not_change_results() {
        let w = tiny();
        let texts = ["a", "this is a photo of text which reads zebra"];
        let both = embed_texts(&w, &texts).unwrap();
        let alone = embed_texts(&w, &texts[..1]).unwrap();
        for (x, y) in both.row(0).iter().zip(alone.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
        let imgs = [image("ring"), image("plus")];
        let (pair, _) = embed_images(&w, &[&imgs[0], &imgs[1]], None, false).unwrap();
        let (one, _) = embed_images(&w, &[&imgs[1]], None, false).unwrap();
        for (x, y) in pair.row(1).iter().zip(one.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_limits() {
        let e = [0.6, 0.8];
        assert!((similarity(&e, &e, 10.0) - 10.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], 7.0), 0.0);
        assert!((similarity(&e, &[-0.6, -0.8], 3.0) + 3.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let w = tiny();
        let small = Image::filled(16, [0, 0, 0]);
        assert!(matches!(
            embed_images(&w, &[&small], None, false),
            Err(CoreError::Dimension { .. })
        ));
    }
}
