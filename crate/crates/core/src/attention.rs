//! Attention rollout over the vision tower and task-directed difference maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{embed_images, AttentionRecord, BackboneWeights};
use crate::prompt::PromptParams;
use crate::synth::{ppm, Image, Region, RegionLayout, TaskId};
use crate::tensor::Tensor;
use crate::{CoreError, Result};

pub const DEFAULT_RESIDUAL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RolloutMode {
    /// Product of identity-mixed, head-averaged attention over all layers.
    Rollout { residual: f64 },
    /// Head-averaged attention of the last layer only.
    FinalLayer,
}

impl Default for RolloutMode {
    fn default() -> Self {
        RolloutMode::Rollout {
            residual: DEFAULT_RESIDUAL,
        }
    }
}

/// Non-negative patch grid with its maximum scaled to exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Signed patch grid, positive where `toward` attends more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub toward: TaskId,
    pub away_from: TaskId,
}

fn head_average(layer: &Tensor) -> Vec<f64> {
    let (h, s) = (layer.shape()[0], layer.shape()[1]);
    let mut avg = vec![0.0; s * s];
    for head in layer.data().chunks_exact(s * s) {
        avg.iter_mut().zip(head).for_each(|(a, x)| *a += x);
    }
    avg.iter_mut().for_each(|a| *a /= h as f64);
    avg
}

fn mix_identity(avg: &mut [f64], s: usize, residual: f64) {
    for r in 0..s {
        let row = &mut avg[r * s..(r + 1) * s];
        row.iter_mut().for_each(|x| *x *= 1.0 - residual);
        row[r] += residual;
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
}

fn matmul_sq(a: &[f64], b: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for k in 0..s {
            let aik = a[i * s + k];
            for j in 0..s {
                out[i * s + j] += aik * b[k * s + j];
            }
        }
    }
    out
}

/// The running rollout product after each layer, `[S, S]` row-stochastic.
pub fn rollout_intermediates(rec: &AttentionRecord, residual: f64) -> Result<Vec<Tensor>> {
    if rec.layers.is_empty() {
        return Err(CoreError::Config("empty attention record".into()));
    }
    let s = rec.layout.len();
    let mut joint: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(rec.layers.len());
    for layer in &rec.layers {
        if layer.shape()[1..] != [s, s] {
            return Err(CoreError::Dimension {
                what: "attention sequence length",
                expected: s,
                got: layer.shape()[1],
            });
        }
        let mut a = head_average(layer);
        mix_identity(&mut a, s, residual);
        let next = match joint {
            None => a,
            Some(j) => matmul_sq(&a, &j, s),
        };
        out.push(Tensor::new(vec![s, s], next.clone())?);
        joint = Some(next);
    }
    Ok(out)
}

fn max_normalize(values: Vec<f64>) -> Result<Vec<f64>> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(CoreError::Numerical("attention map is all zero".into()));
    }
    Ok(values.into_iter().map(|v| if v == max { 1.0 } else { v / max }).collect())
}

pub fn attention_rollout(rec: &AttentionRecord, mode: RolloutMode) -> Result<RolloutMap> {
    let s = rec.layout.len();
    let cls_row = match mode {
        RolloutMode::Rollout { residual } => {
            let joint = rollout_intermediates(rec, residual)?.pop().expect("non-empty record");
            joint.row(0).to_vec()
        }
        RolloutMode::FinalLayer => {
            let last = rec
                .layers
                .last()
                .ok_or_else(|| CoreError::Config("empty attention record".into()))?;
            head_average(last)[..s].to_vec()
        }
    };
    let patches: Vec<f64> = cls_row[rec.layout.patch_range()].to_vec();
    let side = (patches.len() as f64).sqrt().round() as usize;
    Ok(RolloutMap {
        width: side,
        height: side,
        values: max_normalize(patches)?,
    })
}

/// Rollout under `prompt_a` minus rollout under `prompt_b`, both normalized first.
pub fn directed_diff_map(
    weights: &BackboneWeights,
    image: &Image,
    prompt_a: &PromptParams,
    prompt_b: &PromptParams,
    mode: RolloutMode,
) -> Result<DiffMap> {
    if prompt_a.backbone_hash != prompt_b.backbone_hash {
        return Err(CoreError::BackboneMismatch {
            expected: prompt_a.backbone_hash.clone(),
            got: prompt_b.backbone_hash.clone(),
        });
    }
    prompt_a.check_backbone(weights)?;
    let map = |p: &PromptParams| -> Result<RolloutMap> {
        let (_, recs) = embed_images(weights, &[image], Some(p), true)?;
        attention_rollout(&recs[0], mode)
    };
    let (a, b) = (map(prompt_a)?, map(prompt_b)?);
    Ok(DiffMap {
        width: a.width,
        height: a.height,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect(),
        toward: prompt_a.task.unwrap_or(TaskId::Object),
        away_from: prompt_b.task.unwrap_or(TaskId::Object),
    })
}

/// Batched difference maps for many images, reusing one forward pass per prompt.
pub fn directed_diff_maps(
    weights: &BackboneWeights,
    images: &[&Image],
    prompt_a: &PromptParams,
    prompt_b: &PromptParams,
    mode: RolloutMode,
) -> Result<Vec<DiffMap>> {
    if prompt_a.backbone_hash != prompt_b.backbone_hash {
        return Err(CoreError::BackboneMismatch {
            expected: prompt_a.backbone_hash.clone(),
            got: prompt_b.backbone_hash.clone(),
        });
    }
    prompt_a.check_backbone(weights)?;
    let (_, ra) = embed_images(weights, images, Some(prompt_a), true)?;
    let (_, rb) = embed_images(weights, images, Some(prompt_b), true)?;
    ra.iter()
        .zip(&rb)
        .map(|(x, y)| {
            let (a, b) = (attention_rollout(x, mode)?, attention_rollout(y, mode)?);
            Ok(DiffMap {
                width: a.width,
                height: a.height,
                values: a.values.iter().zip(&b.values).map(|(p, q)| p - q).collect(),
                toward: prompt_a.task.unwrap_or(TaskId::Object),
                away_from: prompt_b.task.unwrap_or(TaskId::Object),
            })
        })
        .collect()
}

impl DiffMap {
    /// Mean value over patches lying in `region`, and over all other patches.
    pub fn region_means(&self, layout: RegionLayout, patch: usize, region: Region) -> (f64, f64) {
        let regions = layout.patch_regions(patch);
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for (v, r) in self.values.iter().zip(regions) {
            if r == Some(region) {
                inside += v;
                ni += 1;
            } else {
                outside += v;
                no += 1;
            }
        }
        (inside / ni.max(1) as f64, outside / no.max(1) as f64)
    }
}

/// A map to draw over an image.
#[derive(Debug, Clone, Copy)]
pub enum Overlay<'a> {
    Rollout(&'a RolloutMap),
    Diff(&'a DiffMap),
}

impl Overlay<'_> {
    fn grid(&self) -> (usize, usize, &[f64]) {
        match self {
            Overlay::Rollout(m) => (m.width, m.height, &m.values),
            Overlay::Diff(m) => (m.width, m.height, &m.values),
        }
    }
}

/// Nearest-neighbour upsampled map blended half-and-half with the image.
/// Rollout intensity and positive differences go to red, negative differences to blue.
pub fn render_overlay(image: &Image, overlay: Overlay<'_>) -> Result<Image> {
    let (w, h, values) = overlay.grid();
    let size = image.size();
    if w == 0 || w != h || size % w != 0 {
        return Err(CoreError::Dimension {
            what: "map grid dividing the image",
            expected: size,
            got: w,
        });
    }
    let cell = size / w;
    let mut out = Image::filled(size, [0, 0, 0]);
    for r in 0..size {
        for c in 0..size {
            let v = values[(r / cell) * w + c / cell];
            let tint = [v.max(0.0), 0.0, (-v).max(0.0)];
            let px = image.get(r, c);
            let mut blended = [0u8; 3];
            for ch in 0..3 {
                let o = 255.0 * tint[ch].min(1.0);
                blended[ch] = (0.5 * px[ch] as f64 + 0.5 * o).round() as u8;
            }
            out.set(r, c, blended);
        }
    }
    Ok(out)
}

pub fn overlay_export(image: &Image, overlay: Overlay<'_>, path: &Path) -> Result<()> {
    ppm::write(path, &render_overlay(image, overlay)?)
}

#[derive(Serialize)]
struct GridDump<'a> {
    width: usize,
    height: usize,
    values: &'a [f64],
}

/// Writes `{width, height, values}` as JSON.
pub fn dump_map(overlay: Overlay<'_>, path: &Path) -> Result<()> {
    let (width, height, values) = overlay.grid();
    let json = serde_json::to_string_pretty(&GridDump { width, height, values }).expect("grid serializes");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(path, json).map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SequenceLayout;

    fn uniform_record(layers: usize, heads: usize, prompt: usize, patches: usize) -> AttentionRecord {
        let layout = SequenceLayout {
            prompt_tokens: prompt,
            patches,
        };
        let s = layout.len();
        AttentionRecord {
            layers: (0..layers)
                .map(|_| Tensor::full(vec![heads, s, s], 1.0 / s as f64))
                .collect(),
            layout,
        }
    }

    #[test]
    fn uniform_single_layer_gives_all_ones() {
        let map = attention_rollout(&uniform_record(1, 2, 0, 4), RolloutMode::default()).unwrap();
        assert_eq!(map.values, [1.0; 4]);
        assert_eq!((map.width, map.height), (2, 2));
    }

    #[test]
    fn final_layer_mode_reads_last_layer_cls_row() {
        let mut rec = uniform_record(2, 1, 1, 4);
        let mut last = rec.layers[1].clone();
        last.data_mut()[..6].copy_from_slice(&[0.5, 0.1, 0.1, 0.1, 0.1, 0.1]);
        rec.layers[1] = last;
        let map = attention_rollout(&rec, RolloutMode::FinalLayer).unwrap();
        assert_eq!(map.values, [1.0; 4]);
    }

    #[test]
    fn empty_record_is_an_error() {
        let mut rec = uniform_record(1, 1, 0, 4);
        rec.layers.clear();
        assert!(attention_rollout(&rec, RolloutMode::default()).is_err());
    }

    #[test]
    fn zero_overlay_dims_the_image() {
        let img = Image::new(4, (0..48).map(|i| (i * 5) as u8).collect()).unwrap();
        let map = RolloutMap {
            width: 2,
            height: 2,
            values: vec![0.0; 4],
        };
        let out = render_overlay(&img, Overlay::Rollout(&map)).unwrap();
        for (o, p) in out.pixels().iter().zip(img.pixels()) {
            assert_eq!(*o, (0.5 * *p as f64).round() as u8);
        }
        let bad = RolloutMap {
            width: 3,
            height: 3,
            values: vec![0.0; 9],
        };
        assert!(render_overlay(&img, Overlay::Rollout(&bad)).is_err());
    }
}
