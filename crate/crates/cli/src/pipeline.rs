use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use taskbias_core::attention::{attention_rollout, directed_diff_maps, dump_map, overlay_export, render_overlay, Overlay};
use taskbias_core::backbone::{embed_images, BackboneWeights};
use taskbias_core::classifier::{run_all, BiasDirectionDataset, ClassifierRow};
use taskbias_core::pretrain::{load_checkpoint, train_backbone, EpochMetrics};
use taskbias_core::probe::{bias_histogram, extreme_bias_report, image_embeddings, probe_ids, text_prefix_delta, BiasScore, PrefixReport};
use taskbias_core::prompt::{eval_disambiguation, eval_downstream, tune_prompt, DisambiguationRow, PromptParams, PromptVariant, TuneConfig};
use taskbias_core::synth::{build_pairwise_dataset, generate_corpus, Image, Manifest, PairwiseDataset, Region, RegionLayout, TaskId, MANIFEST_FILE};

use crate::config::{Paths, RunConfig};

pub const SUMMARY_FILE: &str = "summary.json";
const PAIRS_DIR: &str = "pairs";

/// A resolved configuration bound to a working directory.
pub struct Run {
    pub config: RunConfig,
    pub paths: Paths,
    pub run_id: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn variant_slug(v: &PromptVariant) -> String {
    match v {
        PromptVariant::PixelBorder { width } => format!("vp{width}"),
        PromptVariant::VisualToken { tokens } => format!("vitp{tokens}"),
    }
}

fn ordered(pair: [TaskId; 2]) -> (TaskId, TaskId) {
    (pair[0].min(pair[1]), pair[0].max(pair[1]))
}

impl Run {
    pub fn new(config: RunConfig, root: &Path) -> Self {
        let paths = config.under(root);
        let run_id = config.run_id();
        Self { config, paths, run_id }
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.reports.join(&self.run_id)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.report_dir().join(name)
    }

    /// Writes the resolved configuration next to the run's reports.
    pub fn snapshot(&self) -> Result<()> {
        let dir = self.report_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.config.to_toml()).with_context(|| format!("writing {}", path.display()))
    }

    fn update_summary(&self, section: &str, value: impl Serialize) -> Result<()> {
        let path = self.paths.reports.join(SUMMARY_FILE);
        let mut summary: serde_json::Map<String, Value> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => serde_json::Map::new(),
        };
        summary.insert("run_id".into(), json!(self.run_id));
        summary.insert(section.into(), serde_json::to_value(value)?);
        write_json(&path, &summary)
    }

    fn manifest(&self) -> Result<Manifest> {
        let dir = &self.paths.corpus;
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(anyhow!("corpus not found at {} (run gen-data first)", dir.display()));
        }
        Ok(Manifest::load(dir)?)
    }

    fn weights(&self) -> Result<BackboneWeights> {
        let path = &self.paths.checkpoint;
        if !path.exists() {
            return Err(anyhow!("checkpoint not found: {} (run pretrain first)", path.display()));
        }
        Ok(load_checkpoint(path)?)
    }

    fn pair_path(&self, a: TaskId, b: TaskId) -> PathBuf {
        self.paths.corpus.join(PAIRS_DIR).join(format!("pair_{a}_{b}.json"))
    }

    fn pair(&self, pair: [TaskId; 2]) -> Result<PairwiseDataset> {
        let (a, b) = ordered(pair);
        let path = self.pair_path(a, b);
        if !path.exists() {
            return Err(anyhow!("pairwise split not found: {} (run gen-data first)", path.display()));
        }
        Ok(PairwiseDataset::load(&path)?)
    }

    fn prompt_path(&self, variant: &PromptVariant, pair: (TaskId, TaskId), target: TaskId) -> PathBuf {
        self.paths
            .prompts
            .join(format!("{}_{}_{}_to_{target}.tbp", variant_slug(variant), pair.0, pair.1))
    }

    fn prompt(&self, variant: &PromptVariant, pair: (TaskId, TaskId), target: TaskId) -> Result<PromptParams> {
        let path = self.prompt_path(variant, pair, target);
        if !path.exists() {
            return Err(anyhow!("prompt not found: {} (run tune-prompt first)", path.display()));
        }
        Ok(PromptParams::load(&path)?)
    }

    fn holdout(&self, manifest: &Manifest) -> Vec<u64> {
        self.config.pretrain.split(manifest).1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSplit {
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub train: usize,
    pub test: usize,
}

pub fn gen_data(run: &Run) -> Result<Vec<PairSplit>> {
    let manifest = generate_corpus(&run.paths.corpus, &run.config.corpus)?;
    let mut out = Vec::new();
    for &[a, b] in &run.config.pairs.pairs {
        let ds = build_pairwise_dataset(&manifest.entries, a, b, run.config.pairs.train_fraction, run.config.seed)?;
        ds.save(&run.pair_path(ds.task_a, ds.task_b))?;
        out.push(PairSplit {
            task_a: ds.task_a,
            task_b: ds.task_b,
            train: ds.train.len(),
            test: ds.test.len(),
        });
    }
    eprintln!("[gen-data] {} examples in {}", manifest.len(), run.paths.corpus.display());
    run.update_summary("corpus", json!({ "examples": manifest.len(), "pairs": out }))?;
    Ok(out)
}

pub fn pretrain(run: &Run) -> Result<Vec<EpochMetrics>> {
    let manifest = run.manifest()?;
    if let Some(dir) = run.paths.checkpoint.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::create_dir_all(run.report_dir())?;
    let outcome = train_backbone(
        &manifest,
        &run.config.pretrain,
        &run.paths.checkpoint,
        &run.report("metrics.jsonl"),
        &mut |m| eprintln!("[pretrain] epoch {:>3} loss {:.4} holdout_top1 {:.4}", m.epoch, m.loss, m.holdout_top1),
    )?;
    let last = outcome.metrics.last().cloned();
    run.update_summary("pretrain", json!({ "final": last, "checkpoint_sha256": outcome.weights.fingerprint() }))?;
    Ok(outcome.metrics)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub images: usize,
    pub chosen_a_pct: f64,
    pub ties: usize,
    /// Share of probes with `p_b` in the lowest or highest tenth of `[0,1]`.
    pub outer_decile_mass: f64,
}

pub fn probe(run: &Run) -> Result<ProbeSummary> {
    let weights = run.weights()?;
    let manifest = run.manifest()?;
    let ids = run.holdout(&manifest);
    let (a, b) = ordered(run.config.probe.pair);
    let scores = probe_ids(&weights, &manifest, &ids, (a, b))?;
    let hist = bias_histogram(&scores, run.config.probe.bins)?;
    let extremes = extreme_bias_report(&scores, &manifest, run.config.probe.extremes.min(scores.len()))?;
    fs::create_dir_all(run.report_dir())?;
    write_jsonl(&run.report("scores.jsonl"), &scores)?;
    write_json(&run.report("histogram.json"), &hist)?;
    fs::write(run.report("histogram.txt"), hist.render(a, b) + "\n")?;
    write_json(&run.report("extremes.json"), &extremes)?;
    let summary = ProbeSummary {
        task_a: a,
        task_b: b,
        images: scores.len(),
        chosen_a_pct: 100.0 * scores.iter().filter(|s| s.chosen == a).count() as f64 / scores.len() as f64,
        ties: scores.iter().filter(|s| s.tie).count(),
        outer_decile_mass: outer_mass(&scores),
    };
    eprintln!("{}", hist.render(a, b));
    run.update_summary("probe", &summary)?;
    Ok(summary)
}

fn outer_mass(scores: &[BiasScore]) -> f64 {
    let outer = scores.iter().filter(|s| s.p_b <= 0.1 || s.p_b >= 0.9).count();
    outer as f64 / scores.len() as f64
}

pub fn prefix_eval(run: &Run) -> Result<Vec<PrefixReport>> {
    let weights = run.weights()?;
    let manifest = run.manifest()?;
    let cfg = &run.config.prefix;
    let reports = cfg
        .pairs
        .iter()
        .map(|&p| {
            let ds = run.pair(p)?;
            Ok(text_prefix_delta(&weights, &manifest, &ds, &cfg.baseline, &cfg.directed)?)
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&run.report("prefix.json"), &reports)?;
    run.update_summary("prefix", &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunedPrompt {
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub target: TaskId,
    pub method: String,
    pub file: String,
    pub steps: usize,
    pub final_loss: f64,
    pub backbone_unchanged: bool,
}

pub fn tune_prompts(run: &Run) -> Result<Vec<TunedPrompt>> {
    let weights = run.weights()?;
    let manifest = run.manifest()?;
    let block = &run.config.tune;
    let mut out = Vec::new();
    for &p in &run.config.pairs.pairs {
        let ds = run.pair(p)?;
        for target in ds.tasks() {
            for variant in &block.variants {
                let cfg = TuneConfig {
                    target,
                    variant: *variant,
                    epochs: block.epochs,
                    lr: block.lr,
                    batch_size: block.batch_size,
                    seed: run.config.seed,
                };
                let outcome = tune_prompt(&weights, &manifest, &ds, &cfg)?;
                let path = run.prompt_path(variant, (ds.task_a, ds.task_b), target);
                outcome.prompt.save(&path)?;
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let log_dir = run.report_dir().join("tune");
                fs::create_dir_all(&log_dir)?;
                write_jsonl(&log_dir.join(format!("{stem}.jsonl")), &outcome.log)?;
                let row = TunedPrompt {
                    task_a: ds.task_a,
                    task_b: ds.task_b,
                    target,
                    method: variant.label(),
                    file: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    steps: outcome.log.len(),
                    final_loss: outcome.log.last().map_or(f64::NAN, |s| s.loss),
                    backbone_unchanged: outcome.backbone_hash_before == outcome.backbone_hash_after,
                };
                eprintln!(
                    "[tune-prompt] {} {}/{} -> {}: {} steps, final loss {:.4}",
                    row.method, row.task_a, row.task_b, row.target, row.steps, row.final_loss
                );
                out.push(row);
            }
        }
    }
    write_json(&run.report("tuned_prompts.json"), &out)?;
    run.update_summary("tuned_prompts", &out)?;
    Ok(out)
}

pub fn disambiguation(run: &Run) -> Result<Vec<DisambiguationRow>> {
    let weights = run.weights()?;
    let manifest = run.manifest()?;
    let mut rows = Vec::new();
    for &p in &run.config.pairs.pairs {
        let ds = run.pair(p)?;
        let pair = (ds.task_a, ds.task_b);
        for target in ds.tasks() {
            let mut push = |method: String, prompt: Option<&PromptParams>| -> Result<()> {
                let pct = eval_disambiguation(&weights, &manifest, &ds, &ds.test, prompt, target)?;
                rows.push(DisambiguationRow {
                    pair: format!("{}/{}", pair.0, pair.1),
                    direction: target,
                    method,
                    selection_pct: pct,
                });
                Ok(())
            };
            push("none".into(), None)?;
            for variant in &run.config.tune.variants {
                let prompt = run.prompt(variant, pair, target)?;
                push(variant.label(), Some(&prompt))?;
            }
        }
    }
    for r in &rows {
        eprintln!("[eval-disambiguation] {:<22} -> {:<10} {:<10} {:>7.2}%", r.pair, r.direction.to_string(), r.method, r.selection_pct);
    }
    write_json(&run.report("disambiguation.json"), &rows)?;
    run.update_summary("disambiguation", &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub method: String,
    pub accuracy_pct: f64,
}

/// Object classification over the full object vocabulary on the test split of
/// the object/scene-text pair, without and with each object-directed prompt.
pub fn downstream(run: &Run) -> Result<Vec<DownstreamRow>> {
    let weights = run.weights()?;
    let manifest = run.manifest()?;
    let pair = (TaskId::Object, TaskId::SceneText);
    let ds = run.pair([pair.0, pair.1])?;
    let vocab = &run.config.corpus.vocabulary.objects;
    let mut rows = vec![DownstreamRow {
        method: "none".into(),
        accuracy_pct: eval_downstream(&weights, &manifest, &ds.test, vocab, None)?,
    }];
    for variant in &run.config.tune.variants {
        let prompt = run.prompt(variant, pair, TaskId::Object)?;
        rows.push(DownstreamRow {
            method: format!("{} object", variant.label()),
            accuracy_pct: eval_downstream(&weights, &manifest, &ds.test, vocab, Some(&prompt))?,
        });
    }
    for r in &rows {
        eprintln!("[eval-downstream] {:<18} {:>7.2}%", r.method, r.accuracy_pct);
    }
    write_json(&run.report("downstream.json"), &rows)?;
    run.update_summary("downstream", &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub method: String,
    pub images: usize,
    /// Images whose text-minus-object map is larger inside the text band than outside it.
    pub text_band_higher_pct: f64,
    pub max_abs_diff: f64,
}

pub fn attn_map(run: &Run) -> Result<AttentionSummary> {
    let weights = run.weights()?;
    let manifest = run.manifest()?;
    let pair = (TaskId::Object, TaskId::SceneText);
    let ds = run.pair([pair.0, pair.1])?;
    let variant = run
        .config
        .tune
        .variants
        .first()
        .ok_or_else(|| anyhow!("tune.variants is empty; attention maps need a tuned prompt"))?;
    let toward_text = run.prompt(variant, pair, TaskId::SceneText)?;
    let toward_object = run.prompt(variant, pair, TaskId::Object)?;
    let images = ds.test.iter().map(|&id| manifest.image(id)).collect::<taskbias_core::Result<Vec<Image>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let mode = run.config.attention.mode;
    let diffs = directed_diff_maps(&weights, &refs, &toward_text, &toward_object, mode)?;
    let layout = RegionLayout::new(weights.config().image_size);
    let patch = weights.config().patch_size;
    let higher = diffs
        .iter()
        .filter(|d| {
            let (inside, outside) = d.region_means(layout, patch, Region::TextBand);
            inside > outside
        })
        .count();
    let max_abs_diff = diffs.iter().flat_map(|d| &d.values).fold(0.0f64, |m, v| m.max(v.abs()));
    let dir = run.report_dir().join("attention");
    let export = run.config.attention.export.min(images.len());
    if export > 0 {
        let (_, records) = embed_images(&weights, &refs[..export], None, true)?;
        for i in 0..export {
            let id = ds.test[i];
            let rollout = attention_rollout(&records[i], mode)?;
            overlay_export(&images[i], Overlay::Rollout(&rollout), &dir.join(format!("{id:06}_rollout.ppm")))?;
            overlay_export(&images[i], Overlay::Diff(&diffs[i]), &dir.join(format!("{id:06}_diff.ppm")))?;
            dump_map(Overlay::Diff(&diffs[i]), &dir.join(format!("{id:06}_diff.json")))?;
        }
    }
    let summary = AttentionSummary {
        method: variant.label(),
        images: diffs.len(),
        text_band_higher_pct: 100.0 * higher as f64 / diffs.len().max(1) as f64,
        max_abs_diff,
    };
    eprintln!(
        "[attn-map] text band favoured on {:.1}% of {} images",
        summary.text_band_higher_pct, summary.images
    );
    write_json(&run.report("attention.json"), &summary)?;
    run.update_summary("attention", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub train: usize,
    pub test: usize,
    pub test_majority_pct: f64,
    pub rows: Vec<ClassifierRow>,
}

pub fn classify_bias(run: &Run) -> Result<ClassifierReport> {
    let weights = run.weights()?;
    let manifest = run.manifest()?;
    let ids = manifest.ids();
    let (a, b) = ordered(run.config.probe.pair);
    let scores = probe_ids(&weights, &manifest, &ids, (a, b))?;
    let images = ids.iter().map(|&id| manifest.image(id)).collect::<taskbias_core::Result<Vec<Image>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let embeddings = image_embeddings(&weights, &manifest, &ids, None)?;
    let (_, records) = embed_images(&weights, &refs, None, true)?;
    let overlays = images
        .iter()
        .zip(&records)
        .map(|(img, rec)| Ok(render_overlay(img, Overlay::Rollout(&attention_rollout(rec, run.config.attention.mode)?))?))
        .collect::<Result<Vec<_>>>()?;
    let cfg = &run.config.classifier;
    let ds = BiasDirectionDataset::new(&scores, images, overlays, embeddings, cfg.test_fraction, cfg.seed)?;
    let rows = run_all(&ds, cfg)?;
    let report = ClassifierReport {
        task_a: a,
        task_b: b,
        train: ds.train.len(),
        test: ds.test.len(),
        test_majority_pct: 100.0 * ds.test_majority(),
        rows,
    };
    for r in &report.rows {
        eprintln!("[classify-bias] {:<28} {:>7.2}%", r.experiment, r.test_accuracy_pct);
    }
    write_json(&run.report("classifier.json"), &report)?;
    run.update_summary("classifier", &report)?;
    Ok(report)
}

pub fn all(run: &Run) -> Result<()> {
    gen_data(run)?;
    pretrain(run)?;
    probe(run)?;
    prefix_eval(run)?;
    tune_prompts(run)?;
    disambiguation(run)?;
    downstream(run)?;
    attn_map(run)?;
    classify_bias(run)?;
    Ok(())
}
