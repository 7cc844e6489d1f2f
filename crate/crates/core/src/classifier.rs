//! Predicting the direction of an image's task bias from the image, its
//! embedding, or both.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::probe::BiasScore;
use crate::synth::Image;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::{CoreError, Result};

/// Largest share the majority class may hold in a test split.
pub const MAX_TEST_MAJORITY: f64 = 0.55;
pub const MLP_WIDTHS: [usize; 4] = [256, 128, 64, 2];
pub const IMAGE_FEATURES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub mlp_epochs: usize,
    pub conv_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            mlp_epochs: 40,
            conv_epochs: 15,
            batch_size: 32,
            lr: 1e-4,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Pseudo-label of a probe: 1 when the image prefers task B.
pub fn pseudo_label(score: &BiasScore) -> usize {
    usize::from(score.chosen == score.task_b)
}

/// Per-image inputs and pseudo-labels, split into train and test index sets.
#[derive(Debug, Clone)]
pub struct BiasDirectionDataset {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub images: Vec<Image>,
    pub overlays: Vec<Image>,
    /// `[n, d]`.
    pub embeddings: Tensor,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Picks a test split of about `fraction` of the items with equal class
/// counts where possible, never letting the majority exceed the cap.
pub fn balanced_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(CoreError::Config(format!("label {l} is not binary")));
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    by_class.iter_mut().for_each(|c| c.shuffle(&mut rng));
    let want = ((labels.len() as f64 * fraction).round() as usize).max(2);
    let per = (want / 2).min(by_class[0].len()).min(by_class[1].len());
    if per == 0 {
        return Err(CoreError::Config("both bias directions must occur to build a balanced test split".into()));
    }
    let mut test: Vec<usize> = by_class[0][..per].iter().chain(&by_class[1][..per]).copied().collect();
    let mut train: Vec<usize> = by_class[0][per..].iter().chain(&by_class[1][per..]).copied().collect();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

impl BiasDirectionDataset {
    pub fn new(
        scores: &[BiasScore],
        images: Vec<Image>,
        overlays: Vec<Image>,
        embeddings: Tensor,
        fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let n = scores.len();
        if images.len() != n || overlays.len() != n || embeddings.shape()[0] != n {
            return Err(CoreError::Dimension {
                what: "bias-direction examples",
                expected: n,
                got: images.len().min(overlays.len()).min(embeddings.shape()[0]),
            });
        }
        let labels: Vec<usize> = scores.iter().map(pseudo_label).collect();
        let (train, test) = balanced_split(&labels, fraction, seed)?;
        Ok(Self {
            ids: scores.iter().map(|s| s.image_id).collect(),
            labels,
            images,
            overlays,
            embeddings,
            train,
            test,
        })
    }

    pub fn test_majority(&self) -> f64 {
        let ones = self.test.iter().filter(|&&i| self.labels[i] == 1).count();
        ones.max(self.test.len() - ones) as f64 / self.test.len() as f64
    }

    fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Accuracy (percent) of always predicting the majority class, with the
/// majority taken from the training labels and from the test labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequentBaseline {
    pub train_frequency_pct: f64,
    pub test_frequency_pct: f64,
}

fn majority(labels: &[usize]) -> usize {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    usize::from(2 * ones > labels.len())
}

fn accuracy_of_constant(c: usize, labels: &[usize]) -> f64 {
    100.0 * labels.iter().filter(|&&l| l == c).count() as f64 / labels.len() as f64
}

pub fn frequent_baseline(train: &[usize], test: &[usize]) -> Result<FrequentBaseline> {
    if train.is_empty() || test.is_empty() {
        return Err(CoreError::Config("frequent baseline needs non-empty splits".into()));
    }
    Ok(FrequentBaseline {
        train_frequency_pct: accuracy_of_constant(majority(train), test),
        test_frequency_pct: accuracy_of_constant(majority(test), test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageSource {
    Plain,
    Overlay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    EmbeddingMlp,
    Image(ImageSource),
    /// Image and embedding features fused; the image branch can be zeroed out.
    Fused { zero_image: bool },
}

struct Conv {
    cin: usize,
    cout: usize,
    stride: usize,
}

const CONVS: [Conv; 4] = [
    Conv { cin: 3, cout: 16, stride: 2 },
    Conv { cin: 16, cout: 32, stride: 2 },
    Conv { cin: 32, cout: 64, stride: 2 },
    Conv { cin: 64, cout: 64, stride: 1 },
];

/// Parameter shapes of a model in order, with the fan-in used for initialization.
fn layout(model: Model, d: usize) -> Vec<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<(Vec<usize>, usize)>, i: usize, o: usize| {
        out.push((vec![i, o], i));
        out.push((vec![o], 0));
    };
    let conv_trunk = |out: &mut Vec<(Vec<usize>, usize)>| {
        for c in &CONVS {
            out.push((vec![9 * c.cin, c.cout], 9 * c.cin));
            out.push((vec![c.cout], 0));
        }
        out.push((vec![CONVS[3].cout, IMAGE_FEATURES], CONVS[3].cout));
        out.push((vec![IMAGE_FEATURES], 0));
    };
    match model {
        Model::EmbeddingMlp => {
            let mut prev = d;
            for w in MLP_WIDTHS {
                linear(&mut out, prev, w);
                prev = w;
            }
        }
        Model::Image(_) => {
            conv_trunk(&mut out);
            linear(&mut out, IMAGE_FEATURES, 2);
        }
        Model::Fused { .. } => {
            conv_trunk(&mut out);
            linear(&mut out, d, IMAGE_FEATURES);
            // first head layer split into its image half and embedding half
            out.push((vec![IMAGE_FEATURES, MLP_WIDTHS[0]], 2 * IMAGE_FEATURES));
            out.push((vec![IMAGE_FEATURES, MLP_WIDTHS[0]], 2 * IMAGE_FEATURES));
            out.push((vec![MLP_WIDTHS[0]], 0));
            let mut prev = MLP_WIDTHS[0];
            for w in &MLP_WIDTHS[1..] {
                linear(&mut out, prev, *w);
                prev = *w;
            }
        }
    }
    out
}

fn init_params(model: Model, d: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout(model, d)
        .into_iter()
        .map(|(shape, fan_in)| {
            if fan_in == 0 {
                Tensor::zeros(shape)
            } else {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| dist.sample(&mut rng))
            }
        })
        .collect()
}

/// im2col gather for a 3×3 convolution with zero padding 1 over `[B·H·W, C]` rows.
fn im2col_index(b: usize, h: usize, c: usize, stride: usize) -> (Vec<isize>, usize) {
    let oh = h.div_ceil(stride);
    let mut idx = Vec::with_capacity(b * oh * oh * 9 * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..oh {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * stride + ky) as isize - 1;
                        let x = (ox * stride + kx) as isize - 1;
                        let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < h;
                        for ch in 0..c {
                            idx.push(if inside {
                                (((bi * h + y as usize) * h + x as usize) * c + ch) as isize
                            } else {
                                -1
                            });
                        }
                    }
                }
            }
        }
    }
    (idx, oh)
}

struct Cursor<'a, 't> {
    vars: &'a [Var<'t>],
    at: usize,
}

impl<'t> Cursor<'_, 't> {
    fn next(&mut self) -> Var<'t> {
        self.at += 1;
        self.vars[self.at - 1]
    }

    fn linear(&mut self, x: Var<'t>) -> Var<'t> {
        let w = self.next();
        let b = self.next();
        x.matmul(w).add_row(b)
    }
}

/// `[B, S, S, 3]` images to `[B, IMAGE_FEATURES]` features.
fn conv_trunk<'t>(cur: &mut Cursor<'_, 't>, images: Var<'t>) -> Var<'t> {
    let shape = images.shape();
    let (b, mut h) = (shape[0], shape[1]);
    let mut x = images.reshape(vec![b * h * h, 3]);
    for c in &CONVS {
        let (idx, oh) = im2col_index(b, h, c.cin, c.stride);
        let cols = x.gather(idx, vec![b * oh * oh, 9 * c.cin]);
        x = cur.linear(cols).relu();
        h = oh;
    }
    cur.linear(x.group_mean(h * h)).relu()
}

fn forward<'t>(model: Model, vars: &[Var<'t>], images: Option<Var<'t>>, emb: Option<Var<'t>>) -> Var<'t> {
    let mut cur = Cursor { vars, at: 0 };
    match model {
        Model::EmbeddingMlp => {
            let mut x = emb.expect("embedding input");
            for i in 0..MLP_WIDTHS.len() {
                x = cur.linear(x);
                if i + 1 < MLP_WIDTHS.len() {
                    x = x.relu();
                }
            }
            x
        }
        Model::Image(_) => {
            let f = conv_trunk(&mut cur, images.expect("image input"));
            cur.linear(f)
        }
        Model::Fused { zero_image } => {
            let mut f = conv_trunk(&mut cur, images.expect("image input"));
            if zero_image {
                f = f.scale(0.0);
            }
            let e = cur.linear(emb.expect("embedding input")).relu();
            let (wi, we, b) = (cur.next(), cur.next(), cur.next());
            let mut x = (f.matmul(wi) + e.matmul(we)).add_row(b).relu();
            for i in 1..MLP_WIDTHS.len() {
                x = cur.linear(x);
                if i + 1 < MLP_WIDTHS.len() {
                    x = x.relu();
                }
            }
            x
        }
    }
}

/// Raw material for one training run.
pub struct Inputs<'a> {
    pub images: &'a [Image],
    pub embeddings: &'a Tensor,
    pub labels: &'a [usize],
}

fn batch_inputs<'t>(tape: &'t Tape, model: Model, inputs: &Inputs<'_>, idx: &[usize]) -> Result<(Option<Var<'t>>, Option<Var<'t>>)> {
    let images = match model {
        Model::EmbeddingMlp => None,
        _ => {
            let size = inputs.images[idx[0]].size();
            let refs: Vec<&Image> = idx.iter().map(|&i| &inputs.images[i]).collect();
            Some(tape.constant(crate::backbone::stack_images(&refs, size)?))
        }
    };
    let emb = match model {
        Model::Image(_) => None,
        _ => {
            let d = inputs.embeddings.shape()[1];
            let data = idx.iter().flat_map(|&i| inputs.embeddings.row(i).iter().copied()).collect();
            Some(tape.constant(Tensor::new(vec![idx.len(), d], data)?))
        }
    };
    Ok((images, emb))
}

/// Trains `model` on `train` and returns its accuracy (percent) on `test`.
pub fn train_and_evaluate(
    model: Model,
    inputs: &Inputs<'_>,
    train: &[usize],
    test: &[usize],
    epochs: usize,
    config: &ClassifierConfig,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(CoreError::Config("classifier needs non-empty splits".into()));
    }
    let first = inputs.labels[train[0]];
    if train.iter().all(|&i| inputs.labels[i] == first) {
        return Err(CoreError::Config("training labels contain a single class".into()));
    }
    let d = inputs.embeddings.shape()[1];
    let mut params = init_params(model, d, config.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &params.iter().collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let mut order = train.to_vec();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let (img, emb) = batch_inputs(&tape, model, inputs, chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| inputs.labels[i]).collect();
            let loss = forward(model, &vars, img, emb).cross_entropy(&targets)?;
            if let Some(e) = tape.poisoned() {
                return Err(CoreError::Numerical(format!("classifier epoch {epoch}: {e}")));
            }
            let grads = tape.gradient_of(loss, &vars)?;
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            adam.step(&mut refs, &grads)?;
        }
    }
    let mut hits = 0;
    for chunk in test.chunks(128) {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let (img, emb) = batch_inputs(&tape, model, inputs, chunk)?;
        let logits = forward(model, &vars, img, emb).value();
        for (row, &i) in logits.rows().zip(chunk) {
            let pred = usize::from(row[1] > row[0]);
            hits += usize::from(pred == inputs.labels[i]);
        }
    }
    Ok(100.0 * hits as f64 / test.len() as f64)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRow {
    pub experiment: String,
    pub test_accuracy_pct: f64,
}

/// Every experiment of the table on one dataset.
pub fn run_all(ds: &BiasDirectionDataset, config: &ClassifierConfig) -> Result<Vec<ClassifierRow>> {
    let base = frequent_baseline(&ds.labels_of(&ds.train), &ds.labels_of(&ds.test))?;
    let plain = Inputs {
        images: &ds.images,
        embeddings: &ds.embeddings,
        labels: &ds.labels,
    };
    let overlay = Inputs {
        images: &ds.overlays,
        ..plain
    };
    let row = |experiment: &str, test_accuracy_pct| ClassifierRow {
        experiment: experiment.into(),
        test_accuracy_pct,
    };
    let run = |m, inp: &Inputs<'_>, epochs| train_and_evaluate(m, inp, &ds.train, &ds.test, epochs, config);
    Ok(vec![
        row("Frequent (test frequency)", base.test_frequency_pct),
        row("Frequent (train frequency)", base.train_frequency_pct),
        row("Image", run(Model::Image(ImageSource::Plain), &plain, config.conv_epochs)?),
        row(
            "Image+Attention Overlay",
            run(Model::Image(ImageSource::Overlay), &overlay, config.conv_epochs)?,
        ),
        row("Embedding", run(Model::EmbeddingMlp, &plain, config.mlp_epochs)?),
        row(
            "Embedding+Image+Attention",
            run(Model::Fused { zero_image: false }, &overlay, config.conv_epochs)?,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequent_counts() {
        let b = frequent_baseline(&[0, 0, 1], &[0, 0, 1]).unwrap();
        assert!((b.test_frequency_pct - 200.0 / 3.0).abs() < 1e-9);
        assert!((b.train_frequency_pct - 200.0 / 3.0).abs() < 1e-9);
        let b = frequent_baseline(&[1, 1, 1, 0], &[0, 0, 0, 1]).unwrap();
        assert_eq!(b.train_frequency_pct, 25.0);
        assert_eq!(b.test_frequency_pct, 75.0);
        assert!(frequent_baseline(&[], &[1]).is_err());
    }

    #[test]
    fn balanced_split_respects_cap() {
        let labels: Vec<usize> = (0..500).map(|i| usize::from(i % 4 == 0)).collect();
        let (train, test) = balanced_split(&labels, 0.1, 3).unwrap();
        assert_eq!(train.len() + test.len(), 500);
        let ones = test.iter().filter(|&&i| labels[i] == 1).count();
        assert!(ones.max(test.len() - ones) as f64 / test.len() as f64 <= MAX_TEST_MAJORITY);
        assert!(balanced_split(&[0, 0, 0], 0.5, 0).is_err());
    }

    #[test]
    fn parameter_counts() {
        let conv: usize = layout(Model::Image(ImageSource::Plain), 64)
            .iter()
            .map(|(s, _)| s.iter().product::<usize>())
            .sum();
        assert!((50_000..150_000).contains(&conv), "{conv}");
        let mlp = layout(Model::EmbeddingMlp, 64);
        let widths: Vec<usize> = mlp.iter().step_by(2).map(|(s, _)| s[1]).collect();
        assert_eq!(widths, MLP_WIDTHS);
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        // 1 image, 4×4, 2 channels, stride 2
        let (b, h, c) = (1, 4, 2);
        let x = Tensor::from_fn(vec![b * h * h, c], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(vec![9 * c, 3], |i| (i as f64 * 0.11).cos());
        let tape = Tape::new();
        let (idx, oh) = im2col_index(b, h, c, 2);
        let cols = tape.constant(x.clone()).gather(idx, vec![oh * oh, 9 * c]);
        let out = cols.matmul(tape.constant(w.clone())).value();
        for oy in 0..oh {
            for ox in 0..oh {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (y, xx) = (2 * oy + ky, 2 * ox + kx);
                            if y == 0 || xx == 0 || y > h || xx > h {
                                continue;
                            }
                            for ch in 0..c {
                                let v = x.data()[((y - 1) * h + xx - 1) * c + ch];
                                acc += v * w.data()[((ky * 3 + kx) * c + ch) * 3 + o];
                            }
                        }
                    }
                    let got = out.data()[(oy * oh + ox) * 3 + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
