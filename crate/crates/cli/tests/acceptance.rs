//! End-to-end acceptance run: the full default pipeline once, a second
//! pretraining with object-only captions, and a reproducibility check of the
//! binary. Each criterion prints one PASS/FAIL line to stderr.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskbias_cli::config::RunConfig;
use taskbias_cli::pipeline::{self, AttentionSummary, ClassifierReport, DownstreamRow, ProbeSummary, Run, TunedPrompt};
use taskbias_core::attention::{directed_diff_maps, rollout_intermediates, RolloutMode};
use taskbias_core::backbone::{embed_images, BackboneConfig, BackboneWeights};
use taskbias_core::pretrain::{load_checkpoint, EpochMetrics};
use taskbias_core::probe::{text_prefix_delta, PrefixReport, PrefixTable};
use taskbias_core::prompt::{prompt_loss_and_grad, DisambiguationRow, PromptParams, PromptVariant};
use taskbias_core::synth::{render_image, Image, Manifest, PairwiseDataset, TaskId, TaskLabels};
use taskbias_core::tensor::{concat, Tape, Tensor, Var};

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // written past the test harness's capture so every line reaches the log
    let _ = writeln!(std::io::stderr(), "criterion {criterion:>2}: {verdict}  {detail}");
}

fn settle(criterion: u32, checks: Vec<(bool, String)>) {
    let pass = checks.iter().all(|c| c.0);
    let detail: Vec<String> = checks
        .iter()
        .map(|(ok, d)| if *ok { d.clone() } else { format!("[x] {d}") })
        .collect();
    report(criterion, pass, &detail.join("; "));
    assert!(pass, "criterion {criterion} failed: {}", detail.join("; "));
}

struct Fixture {
    _dir: tempfile::TempDir,
    run: Run,
    pretrain_time: Duration,
    metrics: Vec<EpochMetrics>,
    probe: ProbeSummary,
    prefix: Vec<PrefixReport>,
    tuned: Vec<TunedPrompt>,
    checkpoint_before_tuning: Vec<u8>,
    disambiguation: Vec<DisambiguationRow>,
    downstream: Vec<DownstreamRow>,
    attention: AttentionSummary,
    classifier: ClassifierReport,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::default().resolve(&[]).unwrap();
        let run = Run::new(config, dir.path());
        run.snapshot().unwrap();
        pipeline::gen_data(&run).unwrap();
        let t = Instant::now();
        let metrics = pipeline::pretrain(&run).unwrap();
        let pretrain_time = t.elapsed();
        let probe = pipeline::probe(&run).unwrap();
        let prefix = pipeline::prefix_eval(&run).unwrap();
        let checkpoint_before_tuning = std::fs::read(&run.paths.checkpoint).unwrap();
        let tuned = pipeline::tune_prompts(&run).unwrap();
        let disambiguation = pipeline::disambiguation(&run).unwrap();
        let downstream = pipeline::downstream(&run).unwrap();
        let attention = pipeline::attn_map(&run).unwrap();
        let classifier = pipeline::classify_bias(&run).unwrap();
        Fixture {
            _dir: dir,
            run,
            pretrain_time,
            metrics,
            probe,
            prefix,
            tuned,
            checkpoint_before_tuning,
            disambiguation,
            downstream,
            attention,
            classifier,
        }
    })
}

fn weights(f: &Fixture) -> BackboneWeights {
    load_checkpoint(&f.run.paths.checkpoint).unwrap()
}

fn manifest(f: &Fixture) -> Manifest {
    Manifest::load(&f.run.paths.corpus).unwrap()
}

fn pair(f: &Fixture, a: TaskId, b: TaskId) -> PairwiseDataset {
    PairwiseDataset::load(&f.run.paths.corpus.join("pairs").join(format!("pair_{a}_{b}.json"))).unwrap()
}

// gradient checks

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(n)).max(1e-8)
}

type Op = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

/// Worst relative error over the inputs of `sum(op(x) * w)` for fixed random `w`.
fn primitive_error(inputs: &[Tensor], op: Op) -> f64 {
    let loss = |tape: &Tape, xs: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let y = op(tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let w = tape.constant(Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0)));
        let l = (y * w).sum();
        let g = if grads { tape.gradient_of(l, &vars).unwrap() } else { Vec::new() };
        (l.item().unwrap(), g)
    };
    let (_, grads) = loss(&Tape::new(), inputs, true);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let numeric: Vec<f64> = (0..x.numel())
            .map(|i| {
                let eval = |d: f64| {
                    let mut xs = inputs.to_vec();
                    xs[k].data_mut()[i] += d;
                    loss(&Tape::new(), &xs, false).0
                };
                (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(relative_error(grads[k].data(), &numeric));
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(-1.5..1.5);
        // away from the relu and clamp kinks
        if v.abs() < 0.05 {
            v + 0.2
        } else {
            v
        }
    })
}

fn primitive_errors() -> BTreeMap<&'static str, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m34 = random(&mut rng, &[3, 4]);
    let n34 = random(&mut rng, &[3, 4]);
    let row = random(&mut rng, &[4]);
    let s = random(&mut rng, &[]);
    let a234 = random(&mut rng, &[2, 3, 4]);
    let w45 = random(&mut rng, &[4, 5]);
    let b243 = random(&mut rng, &[2, 4, 3]);
    let bt254 = random(&mut rng, &[2, 5, 4]);
    let m62 = random(&mut rng, &[6, 2]);
    let m22 = random(&mut rng, &[2, 2]);
    let cases: Vec<(&'static str, Vec<Tensor>, Op)> = vec![
        ("add", vec![m34.clone(), n34.clone()], |_, v| v[0] + v[1]),
        ("sub", vec![m34.clone(), n34.clone()], |_, v| v[0] - v[1]),
        ("mul", vec![m34.clone(), n34.clone()], |_, v| v[0] * v[1]),
        ("neg", vec![m34.clone()], |_, v| -v[0]),
        ("scale", vec![m34.clone()], |_, v| v[0].scale(-2.5)),
        ("scale_by", vec![m34.clone(), s], |_, v| v[0].scale_by(v[1])),
        ("add_row", vec![m34.clone(), row.clone()], |_, v| v[0].add_row(v[1])),
        ("mul_row", vec![m34.clone(), row], |_, v| v[0].mul_row(v[1])),
        ("exp", vec![m34.clone()], |_, v| v[0].exp()),
        ("relu", vec![m34.clone()], |_, v| v[0].relu()),
        ("gelu", vec![m34.clone()], |_, v| v[0].gelu()),
        ("clamp", vec![m34.clone()], |_, v| v[0].clamp(-0.7, 0.9)),
        ("matmul", vec![a234.clone(), w45], |_, v| v[0].matmul(v[1])),
        ("bmm", vec![a234.clone(), b243], |_, v| v[0].bmm(v[1], false)),
        ("bmm_trans_b", vec![a234.clone(), bt254], |_, v| v[0].bmm(v[1], true)),
        ("layer_norm", vec![m34.clone()], |_, v| v[0].layer_norm(1e-5)),
        ("softmax", vec![m34.clone()], |_, v| v[0].softmax()),
        ("log_softmax", vec![m34.clone()], |_, v| v[0].log_softmax()),
        ("l2_normalize", vec![m34.clone()], |_, v| v[0].l2_normalize()),
        ("sum", vec![m62.clone()], |_, v| v[0].sum()),
        ("mean", vec![m62.clone()], |_, v| v[0].mean()),
        ("group_mean", vec![m62.clone()], |_, v| v[0].group_mean(3)),
        ("reshape", vec![m62.clone()], |_, v| v[0].reshape([3, 4])),
        ("concat", vec![m62.clone(), m22], |_, v| concat(&[v[0], v[1], v[0]])),
        ("gather", vec![m62.clone()], |_, v| v[0].gather(vec![3, -1, 0, 3, 11, 5], [2, 3])),
        ("gather_rows", vec![m62], |_, v| v[0].gather_rows(&[5, 0, 5])),
        ("cross_entropy", vec![m34], |_, v| v[0].cross_entropy(&[0, 3, 2]).unwrap()),
    ];
    cases.into_iter().map(|(name, xs, op)| (name, primitive_error(&xs, op))).collect()
}

fn prompt_loss_error(variant: PromptVariant) -> f64 {
    let cfg = BackboneConfig {
        depth: 2,
        embed_width: 32,
        heads: 2,
        shared_dim: 16,
        ..BackboneConfig::default()
    };
    let weights = BackboneWeights::init(&cfg, 3).unwrap();
    let labels = [
        TaskLabels {
            object: "plus".into(),
            action: "throw".into(),
            scene_text: "radio".into(),
        },
        TaskLabels {
            object: "crescent".into(),
            action: "fall".into(),
            scene_text: "nova".into(),
        },
    ];
    let images: Vec<Image> = labels.iter().enumerate().map(|(i, l)| render_image(l, i as u64 + 10, 32)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let sets: Vec<Vec<String>> = labels.iter().map(|l| vec![l.object.clone(), l.scene_text.clone()]).collect();
    let mut prompt = PromptParams::init(variant, &weights, Some(TaskId::Object), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = prompt.values.as_ref().unwrap().shape().to_vec();
    prompt.values = Some(Tensor::from_fn(shape, |_| rng.gen_range(-0.3..0.3)));
    let (_, grad) = prompt_loss_and_grad(&weights, &refs, &sets, 0, &prompt).unwrap();
    let base = prompt.values.clone().unwrap();
    let numeric: Vec<f64> = (0..base.numel())
        .map(|i| {
            let eval = |d: f64| {
                let mut v = base.clone();
                v.data_mut()[i] += d;
                let p = PromptParams {
                    values: Some(v),
                    ..prompt.clone()
                };
                prompt_loss_and_grad(&weights, &refs, &sets, 0, &p).unwrap().0
            };
            (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
        })
        .collect();
    relative_error(grad.unwrap().data(), &numeric)
}

#[test]
fn criterion_01_gradient_correctness() {
    let t = Instant::now();
    let mut checks: Vec<(bool, String)> = primitive_errors()
        .into_iter()
        .map(|(name, e)| (e < FD_TOL, format!("{name} {e:.1e}")))
        .collect();
    for variant in [PromptVariant::VisualToken { tokens: 1 }, PromptVariant::PixelBorder { width: 1 }] {
        let e = prompt_loss_error(variant);
        checks.push((e < FD_TOL, format!("prompt loss {} {e:.1e}", variant.label())));
    }
    let secs = t.elapsed().as_secs_f64();
    checks.push((secs < 120.0, format!("{secs:.1}s")));
    settle(1, checks);
}

#[test]
fn criterion_02_pretraining_sanity() {
    let f = fixture();
    let last = f.metrics.last().unwrap();
    let best = f.metrics.iter().map(|m| m.holdout_top1).fold(0.0, f64::max);
    let mins = f.pretrain_time.as_secs_f64() / 60.0;
    settle(
        2,
        vec![
            (
                last.holdout_top1 >= 0.90,
                format!("held-out top-1 {:.3} after epoch {} (best {best:.3})", last.holdout_top1, last.epoch),
            ),
            (mins < 30.0, format!("{mins:.1} min")),
        ],
    );
}

#[test]
fn criterion_03_bias_emergence() {
    let f = fixture();
    let p = &f.probe;
    settle(
        3,
        vec![(
            p.outer_decile_mass >= 0.40,
            format!(
                "{}/{} outer-decile mass {:.3} over {} held-out images",
                p.task_a, p.task_b, p.outer_decile_mass, p.images
            ),
        )],
    );
}

#[test]
fn criterion_04_bias_follows_supervision() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut config = f.run.config.clone();
    config.paths.corpus = f.run.paths.corpus.clone();
    config.pretrain.policy = Some(taskbias_core::synth::CaptionPolicy::Skewed {
        object: 1.0,
        action: 0.0,
        scene_text: 0.0,
    });
    let run = Run::new(config, dir.path());
    pipeline::pretrain(&run).unwrap();
    let checks = [TaskId::SceneText, TaskId::Action]
        .into_iter()
        .map(|other| {
            let mut c = run.config.clone();
            c.probe.pair = [TaskId::Object, other];
            let r = Run::new(c, dir.path());
            let s = pipeline::probe(&r).unwrap();
            (s.chosen_a_pct >= 80.0, format!("object chosen over {other} on {:.1}% of {} images", s.chosen_a_pct, s.images))
        })
        .collect();
    settle(4, checks);
}

#[test]
fn criterion_05_task_disambiguation() {
    let f = fixture();
    let mut checks = Vec::new();
    for r in &f.disambiguation {
        let floor = match r.method.as_str() {
            "none" => continue,
            m if m.starts_with("ViTP") => 95.0,
            _ => 75.0,
        };
        checks.push((
            r.selection_pct >= floor,
            format!("{} {} -> {} {:.1}%", r.method, r.pair, r.direction, r.selection_pct),
        ));
    }
    let frozen = f.tuned.iter().all(|t| t.backbone_unchanged);
    let on_disk = std::fs::read(&f.run.paths.checkpoint).unwrap() == f.checkpoint_before_tuning;
    checks.push((frozen && on_disk, format!("frozen backbone bit-identical across {} tuning runs", f.tuned.len())));
    settle(5, checks);
}

#[test]
fn criterion_06_downstream_ordering() {
    let f = fixture();
    let none = f.downstream.iter().find(|r| r.method == "none").unwrap().accuracy_pct;
    let checks = f
        .downstream
        .iter()
        .filter(|r| r.method != "none")
        .map(|r| (r.accuracy_pct >= none, format!("{} {:.2}% vs unprompted {none:.2}%", r.method, r.accuracy_pct)))
        .collect();
    settle(6, checks);
}

#[test]
fn criterion_07_prefix_nullity() {
    let f = fixture();
    let w = weights(f);
    let m = manifest(f);
    let mut checks = Vec::new();
    for [a, b] in f.run.config.prefix.pairs.clone() {
        let ds = pair(f, a, b);
        for table in [PrefixTable::uniform(), PrefixTable::directed()] {
            let r = text_prefix_delta(&w, &m, &ds, &table, &table).unwrap();
            let zero = r.deltas.iter().all(|d| d.delta_pct == 0.0);
            checks.push((zero, format!("{a}/{b} identical tables: deltas exactly 0")));
        }
    }
    for r in &f.prefix {
        for d in &r.deltas {
            let consistent = d.delta_pct.is_finite() && d.delta_pct == d.rate_directed_pct - d.rate_uniform_pct;
            checks.push((consistent, format!("{}/{} {} delta {:+.1}", r.task_a, r.task_b, d.task, d.delta_pct)));
        }
    }
    settle(7, checks);
}

#[test]
fn criterion_08_rollout_properties() {
    let f = fixture();
    let w = weights(f);
    let m = manifest(f);
    let ds = pair(f, TaskId::Object, TaskId::SceneText);
    let images: Vec<Image> = ds.test.iter().map(|&id| m.image(id).unwrap()).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let variant = f.run.config.tune.variants[0];
    let load = |target: TaskId| {
        let name = f
            .tuned
            .iter()
            .find(|t| t.task_a == TaskId::Object && t.task_b == TaskId::SceneText && t.target == target && t.method == variant.label())
            .unwrap()
            .file
            .clone();
        PromptParams::load(&f.run.paths.prompts.join(name)).unwrap()
    };
    let (text, object) = (load(TaskId::SceneText), load(TaskId::Object));
    let mut worst_row = 0.0f64;
    for prompt in [None, Some(&text), Some(&object)] {
        let (_, recs) = embed_images(&w, &refs, prompt, true).unwrap();
        for rec in &recs {
            for joint in rollout_intermediates(rec, 0.5).unwrap() {
                for row in joint.rows() {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    let diffs = directed_diff_maps(&w, &refs, &text, &object, RolloutMode::default()).unwrap();
    let bound = diffs.iter().flat_map(|d| &d.values).fold(0.0f64, |m, v| m.max(v.abs()));
    let pct = f.attention.text_band_higher_pct;
    settle(
        8,
        vec![
            (worst_row < 1e-6, format!("max rollout row deviation {worst_row:.1e}")),
            (bound <= 1.0, format!("max |diff| {bound:.3}")),
            (pct >= 70.0, format!("text band favoured on {pct:.1}% of {} images", f.attention.images)),
        ],
    );
}

#[test]
fn criterion_09_bias_direction_classifiers() {
    let f = fixture();
    let acc = |name: &str| {
        f.classifier
            .rows
            .iter()
            .find(|r| r.experiment == name)
            .unwrap()
            .test_accuracy_pct
    };
    let base = acc("Frequent (test frequency)");
    let emb = acc("Embedding");
    let img = acc("Image");
    let table: Vec<String> = f
        .classifier
        .rows
        .iter()
        .map(|r| format!("{} {:.1}", r.experiment, r.test_accuracy_pct))
        .collect();
    settle(
        9,
        vec![
            (f.classifier.test_majority_pct <= 55.0, format!("test majority {:.1}%", f.classifier.test_majority_pct)),
            (emb >= base + 5.0, format!("embedding {emb:.1} vs baseline {base:.1}")),
            (img >= base - 2.0 && img <= emb, format!("image {img:.1} within [{:.1}, {emb:.1}]", base - 2.0)),
            (true, table.join(", ")),
        ],
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_10_reproducibility() {
    let small = [
        "--corpus.count", "256",
        "--pretrain.epochs", "3",
        "--classifier.mlp_epochs", "3",
        "--classifier.conv_epochs", "1",
        "--attention.export", "2",
    ];
    let run = |dir: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_taskbias"))
            .args(["all", "--deterministic", "--seed", "7", "--root"])
            .arg(dir)
            .args(small)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        tree(dir)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, tb) = (run(a.path()), run(b.path()));
    let kinds = ["corpus", "checkpoints", "prompts", "reports"];
    let mut checks: Vec<(bool, String)> = kinds
        .iter()
        .map(|k| {
            let files: Vec<_> = ta.keys().filter(|p| p.starts_with(k)).collect();
            let same = !files.is_empty() && files.iter().all(|p| tb.get(*p) == Some(&ta[*p]));
            (same, format!("{k}: {} files identical", files.len()))
        })
        .collect();
    checks.push((ta.len() == tb.len(), format!("{} files in both trees", ta.len())));
    settle(10, checks);
}
