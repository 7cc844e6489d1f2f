//! Forward passes of both towers, recorded on a tape.

use crate::tensor::{concat, Tape, Tensor, Var};

use super::config::BackboneConfig;
use super::tokenizer::TokenSequence;
use super::weights::{ParamVars, LOGIT_SCALE};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Where each kind of token sits in a vision sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prompt_tokens: usize,
    pub patches: usize,
}

impl SequenceLayout {
    pub const CLS: usize = 0;

    pub fn len(&self) -> usize {
        1 + self.prompt_tokens + self.patches
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prompt_range(&self) -> std::ops::Range<usize> {
        1..1 + self.prompt_tokens
    }

    pub fn patch_range(&self) -> std::ops::Range<usize> {
        1 + self.prompt_tokens..self.len()
    }
}

/// Per-layer attention of one image, each layer shaped `[heads, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Tensor>,
    pub layout: SequenceLayout,
}

pub struct VisionOutput<'t> {
    /// Unit-norm embeddings, `[B, d]`.
    pub embeddings: Var<'t>,
    /// One record per image when recording was requested.
    pub attention: Vec<AttentionRecord>,
}

fn affine_ln<'t>(p: &ParamVars<'_, 't>, x: Var<'t>, prefix: &str) -> Var<'t> {
    x.layer_norm(LN_EPS)
        .mul_row(p.get(&format!("{prefix}.g")))
        .add_row(p.get(&format!("{prefix}.b")))
}

fn linear<'t>(p: &ParamVars<'_, 't>, x: Var<'t>, prefix: &str) -> Var<'t> {
    x.matmul(p.get(&format!("{prefix}.w")))
        .add_row(p.get(&format!("{prefix}.b")))
}

/// Gather indices splitting `[B·S, 3W]` into `[B·H, S, dh]` for one of q, k, v.
fn head_split_index(b: usize, s: usize, heads: usize, width: usize, part: usize) -> Vec<isize> {
    let dh = width / heads;
    let mut idx = Vec::with_capacity(b * s * width);
    for bi in 0..b {
        for h in 0..heads {
            for si in 0..s {
                let base = (bi * s + si) * 3 * width + part * width + h * dh;
                idx.extend((base..base + dh).map(|i| i as isize));
            }
        }
    }
    idx
}

/// Gather indices merging `[B·H, S, dh]` back into `[B·S, W]`.
fn head_merge_index(b: usize, s: usize, heads: usize, width: usize) -> Vec<isize> {
    let dh = width / heads;
    let mut idx = Vec::with_capacity(b * s * width);
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let base = ((bi * heads + h) * s + si) * dh;
                idx.extend((base..base + dh).map(|i| i as isize));
            }
        }
    }
    idx
}

/// One pre-norm transformer block over `[B·S, W]`. Returns the new stream and
/// the attention probabilities `[B·H, S, S]`.
fn block<'t>(
    p: &ParamVars<'_, 't>,
    x: Var<'t>,
    prefix: &str,
    (b, s): (usize, usize),
    mask: Option<Var<'t>>,
) -> (Var<'t>, Var<'t>) {
    let cfg = p.config();
    let (w, heads) = (cfg.embed_width, cfg.heads);
    let dh = cfg.head_dim();

    let h = affine_ln(p, x, &format!("{prefix}.ln1"));
    let qkv = linear(p, h, &format!("{prefix}.attn.qkv"));
    let split = |part| qkv.gather(head_split_index(b, s, heads, w, part), vec![b * heads, s, dh]);
    let (q, k, v) = (split(0), split(1), split(2));
    let mut scores = q.bmm(k, true).scale(1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = scores + m;
    }
    let attn = scores.softmax();
    let ctx = attn
        .bmm(v, false)
        .gather(head_merge_index(b, s, heads, w), vec![b * s, w]);
    let x = x + linear(p, ctx, &format!("{prefix}.attn.out"));

    let h = affine_ln(p, x, &format!("{prefix}.ln2"));
    let h = linear(p, h, &format!("{prefix}.mlp.fc1")).gelu();
    let x = x + linear(p, h, &format!("{prefix}.mlp.fc2"));
    (x, attn)
}

/// Gather indices cutting `[B, S, S, 3]` images into `[B·P, patch·patch·3]` rows.
fn patchify_index(cfg: &BackboneConfig, b: usize) -> Vec<isize> {
    let (size, ps, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut idx = Vec::with_capacity(b * size * size * 3);
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..ps {
                    let row = gy * ps + py;
                    let base = ((bi * size + row) * size + gx * ps) * 3;
                    idx.extend((base..base + ps * 3).map(|i| i as isize));
                }
            }
        }
    }
    idx
}

/// Encodes `images` (`[B, size, size, 3]`, values in `[0,1]`).
///
/// `prompt`, when given, is an `[m, W]` block inserted right after `[CLS]`;
/// it carries its own positional component.
pub fn encode_images<'t>(
    p: &ParamVars<'_, 't>,
    images: Var<'t>,
    prompt: Option<Var<'t>>,
    record: bool,
) -> VisionOutput<'t> {
    let cfg = p.config();
    let shape = images.shape();
    assert!(
        shape.len() == 4 && shape[1] == cfg.image_size && shape[2] == cfg.image_size && shape[3] == 3,
        "images must be [B, {0}, {0}, 3], got {shape:?}",
        cfg.image_size
    );
    let b = shape[0];
    let (w, np) = (cfg.embed_width, cfg.num_patches());
    let m = prompt.map_or(0, |v| v.shape()[0]);
    let layout = SequenceLayout {
        prompt_tokens: m,
        patches: np,
    };
    let s = layout.len();

    let patches = images.gather(patchify_index(cfg, b), vec![b * np, cfg.patch_dim()]);
    let tokens = linear(p, patches, "vision.patch");
    let pos = p.get("vision.pos");
    let patch_pos_idx: Vec<isize> = (0..b)
        .flat_map(|_| (w..(1 + np) * w).map(|i| i as isize))
        .collect();
    let tokens = tokens + pos.gather(patch_pos_idx, vec![b * np, w]);
    let cls = p.get("vision.cls") + pos.gather((0..w as isize).collect(), vec![w]);

    let mut parts = vec![cls.reshape(vec![1, w])];
    parts.extend(prompt);
    parts.push(tokens);
    let stacked = concat(&parts);
    let rows: Vec<usize> = (0..b)
        .flat_map(|bi| {
            (0..s).map(move |si| match si {
                0 => 0,
                _ if si <= m => si,
                _ => 1 + m + bi * np + (si - 1 - m),
            })
        })
        .collect();
    let mut x = stacked.gather_rows(&rows);

    let mut attn_layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let (next, attn) = block(p, x, &format!("vision.blocks.{l}"), (b, s), None);
        x = next;
        if record {
            attn_layers.push(attn.value());
        }
    }
    let cls_rows: Vec<usize> = (0..b).map(|bi| bi * s).collect();
    let pooled = affine_ln(p, x.gather_rows(&cls_rows), "vision.ln_post");
    let embeddings = pooled.matmul(p.get("vision.proj")).l2_normalize();

    let attention = if record {
        split_records(&attn_layers, b, cfg.heads, layout)
    } else {
        Vec::new()
    };
    VisionOutput {
        embeddings,
        attention,
    }
}

fn split_records(layers: &[Tensor], b: usize, heads: usize, layout: SequenceLayout) -> Vec<AttentionRecord> {
    let s = layout.len();
    let per = heads * s * s;
    (0..b)
        .map(|bi| AttentionRecord {
            layers: layers
                .iter()
                .map(|t| {
                    Tensor::new(vec![heads, s, s], t.data()[bi * per..(bi + 1) * per].to_vec())
                        .expect("attention slice has consistent extents")
                })
                .collect(),
            layout,
        })
        .collect()
}

/// Encodes token sequences, padding dynamically to the longest one and
/// pooling at the begin marker.
pub fn encode_texts<'t>(p: &ParamVars<'_, 't>, texts: &[TokenSequence]) -> Var<'t> {
    let cfg = p.config();
    let tape: &'t Tape = p.get(LOGIT_SCALE).tape();
    let b = texts.len();
    assert!(b > 0, "no texts to encode");
    let (w, heads) = (cfg.embed_width, cfg.heads);
    let l = texts.iter().map(|t| t.len).max().unwrap();
    assert!(l <= cfg.max_text_len, "token sequence longer than max_text_len");

    let ids: Vec<usize> = texts.iter().flat_map(|t| t.ids[..l].iter().copied()).collect();
    let tok = p.get("text.token_embedding").gather_rows(&ids);
    let pos_idx: Vec<isize> = (0..b).flat_map(|_| (0..l * w).map(|i| i as isize)).collect();
    let mut x = tok + p.get("text.pos").gather(pos_idx, vec![b * l, w]);

    let mut mask = vec![0.0; b * heads * l * l];
    for (bi, t) in texts.iter().enumerate() {
        for h in 0..heads {
            let base = (bi * heads + h) * l * l;
            for q in 0..l {
                for k in t.len..l {
                    mask[base + q * l + k] = MASKED;
                }
            }
        }
    }
    let mask = tape.constant(Tensor::new(vec![b * heads, l, l], mask).expect("mask extents"));

    for layer in 0..cfg.depth {
        x = block(p, x, &format!("text.blocks.{layer}"), (b, l), Some(mask)).0;
    }
    let rows: Vec<usize> = (0..b).map(|bi| bi * l).collect();
    let pooled = affine_ln(p, x.gather_rows(&rows), "text.ln_post");
    pooled.matmul(p.get("text.proj")).l2_normalize()
}

/// `exp` of the stored log-scale, as a tape scalar.
pub fn logit_scale<'t>(p: &ParamVars<'_, 't>) -> Var<'t> {
    p.get(LOGIT_SCALE).exp()
}

/// Scaled cosine similarities `[B_img, B_txt]` between unit-norm rows.
pub fn similarity_logits<'t>(img: Var<'t>, txt: Var<'t>, scale: Var<'t>) -> Var<'t> {
    let (bi, d) = (img.shape()[0], img.shape()[1]);
    let bt = txt.shape()[0];
    img.reshape(vec![1, bi, d])
        .bmm(txt.reshape(vec![1, bt, d]), true)
        .reshape(vec![bi, bt])
        .scale_by(scale)
}
