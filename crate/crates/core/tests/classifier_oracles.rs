//! Bias-direction classifiers on synthetic inputs with known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskbias_core::classifier::{balanced_split, frequent_baseline, train_and_evaluate, ClassifierConfig, ImageSource, Inputs, Model};
use taskbias_core::synth::Image;
use taskbias_core::tensor::Tensor;

const D: usize = 16;

/// Embeddings whose label is the sign of the first coordinate, with a margin.
fn separable(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * D);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..2usize);
        let sign = if label == 1 { 1.0 } else { -1.0 };
        data.push(sign * rng.gen_range(0.5..1.5));
        data.extend((1..D).map(|_| rng.gen_range(-1.0..1.0)));
        labels.push(label);
    }
    (Tensor::new(vec![n, D], data).unwrap(), labels)
}

fn blank_images(n: usize) -> Vec<Image> {
    vec![Image::filled(8, [90, 160, 30]); n]
}

fn config() -> ClassifierConfig {
    ClassifierConfig {
        mlp_epochs: 30,
        conv_epochs: 3,
        ..Default::default()
    }
}

#[test]
fn separable_embeddings_are_learned() {
    let (emb, labels) = separable(1200, 1);
    let images = blank_images(labels.len());
    let (train, test) = balanced_split(&labels, 0.1, 2).unwrap();
    let inputs = Inputs {
        images: &images,
        embeddings: &emb,
        labels: &labels,
    };
    let cfg = config();
    let acc = train_and_evaluate(Model::EmbeddingMlp, &inputs, &train, &test, cfg.mlp_epochs, &cfg).unwrap();
    assert!(acc >= 99.0, "{acc}");
    // the fused model with its image branch zeroed reduces to an embedding classifier
    let fused = train_and_evaluate(Model::Fused { zero_image: true }, &inputs, &train, &test, cfg.mlp_epochs, &cfg).unwrap();
    assert!((fused - acc).abs() <= 3.0, "{fused} vs {acc}");
}

#[test]
fn shuffled_labels_fall_to_the_baseline() {
    let (emb, labels) = separable(4000, 3);
    let mut shuffled = labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
    let images = blank_images(labels.len());
    let (train, test) = balanced_split(&shuffled, 0.1, 5).unwrap();
    let at = |idx: &[usize]| idx.iter().map(|&i| shuffled[i]).collect::<Vec<_>>();
    let base = frequent_baseline(&at(&train), &at(&test)).unwrap();
    let inputs = Inputs {
        images: &images,
        embeddings: &emb,
        labels: &shuffled,
    };
    let cfg = ClassifierConfig {
        mlp_epochs: 10,
        ..config()
    };
    let acc = train_and_evaluate(Model::EmbeddingMlp, &inputs, &train, &test, cfg.mlp_epochs, &cfg).unwrap();
    assert!((acc - base.train_frequency_pct).abs() <= 5.0, "{acc} vs {}", base.train_frequency_pct);
}

#[test]
fn constant_images_carry_no_signal() {
    let (emb, labels) = separable(600, 6);
    let images = blank_images(labels.len());
    let (train, test) = balanced_split(&labels, 0.2, 7).unwrap();
    let at = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let base = frequent_baseline(&at(&train), &at(&test)).unwrap();
    let inputs = Inputs {
        images: &images,
        embeddings: &emb,
        labels: &labels,
    };
    let cfg = config();
    let acc = train_and_evaluate(Model::Image(ImageSource::Plain), &inputs, &train, &test, cfg.conv_epochs, &cfg).unwrap();
    assert!((acc - base.test_frequency_pct).abs() <= 5.0, "{acc}");
    let again = train_and_evaluate(Model::Image(ImageSource::Plain), &inputs, &train, &test, cfg.conv_epochs, &cfg).unwrap();
    assert_eq!(acc, again);
}
