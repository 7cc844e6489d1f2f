use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::caption::splitmix64;
use super::{ppm, render_example, CaptionPolicy, Image, TaskLabels, Vocabulary};
use crate::{CoreError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_CONFIG_FILE: &str = "corpus.json";

/// One rendered image with its full label set and pretraining caption.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskExample {
    pub image_id: u64,
    pub image: Image,
    pub labels: TaskLabels,
    pub caption: String,
    pub seed: u64,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u64,
    pub seed: u64,
    pub image_path: String,
    pub labels: TaskLabels,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub policy: CaptionPolicy,
    pub vocabulary: Vocabulary,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 4096,
            seed: 0,
            image_size: 32,
            policy: CaptionPolicy::ContentHashed,
            vocabulary: Vocabulary::default(),
        }
    }
}

impl CorpusConfig {
    pub fn example_seed(&self, id: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(id))
    }

    pub fn render(&self, id: u64) -> Result<MultiTaskExample> {
        render_example(
            &self.vocabulary,
            id,
            self.example_seed(id),
            self.image_size,
            &self.policy,
        )
    }
}

/// A corpus on disk: manifest lines plus the directory images resolve against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    index: HashMap<u64, usize>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        Self {
            root: root.into(),
            entries,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&ManifestEntry> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn entry(&self, id: u64) -> Result<&ManifestEntry> {
        self.get(id).ok_or(CoreError::UnknownExample(id))
    }

    pub fn image(&self, id: u64) -> Result<Image> {
        let e = self.entry(id)?;
        ppm::read(&self.root.join(&e.image_path))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| CoreError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new(root, entries))
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            writeln!(w, "{line}").map_err(|e| CoreError::io(&path, e))?;
        }
        w.flush().map_err(|e| CoreError::io(&path, e))
    }
}

/// Renders `config.count` examples into `dir` and writes the manifest.
///
/// Each example derives from its own seed, and entries are ordered by id.
pub fn generate_corpus(dir: impl AsRef<Path>, config: &CorpusConfig) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images")).map_err(|e| CoreError::io(dir, e))?;
    let mut entries = Vec::with_capacity(config.count);
    for id in 0..config.count as u64 {
        let ex = config.render(id)?;
        let image_path = format!("images/{id:06}.ppm");
        ppm::write(&dir.join(&image_path), &ex.image)?;
        entries.push(ManifestEntry {
            id,
            seed: ex.seed,
            image_path,
            labels: ex.labels,
            caption: ex.caption,
        });
    }
    let cfg_path = dir.join(CORPUS_CONFIG_FILE);
    let json = serde_json::to_string_pretty(config).expect("corpus config serializes");
    fs::write(&cfg_path, json).map_err(|e| CoreError::io(&cfg_path, e))?;
    let manifest = Manifest::new(dir, entries);
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_corpus_regenerates_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            count: 24,
            seed: 11,
            ..CorpusConfig::default()
        };
        let m = generate_corpus(dir.path(), &cfg).unwrap();
        let reloaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(reloaded.entries, m.entries);
        for e in &reloaded.entries {
            let again = cfg.render(e.id).unwrap();
            assert_eq!(again.seed, e.seed);
            assert_eq!(again.labels, e.labels);
            assert_eq!(again.caption, e.caption);
            let on_disk = fs::read(dir.path().join(&e.image_path)).unwrap();
            assert_eq!(ppm::encode(&again.image), on_disk);
        }
    }

    #[test]
    fn manifest_lines_have_the_documented_keys() {
        let e = ManifestEntry {
            id: 3,
            seed: 9,
            image_path: "images/000003.ppm".into(),
            labels: TaskLabels {
                object: "ring".into(),
                action: "spin".into(),
                scene_text: "nova".into(),
            },
            caption: "this is a photo of a nova".into(),
        };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["caption", "id", "image_path", "labels", "seed"]);
        let labels: Vec<_> = v["labels"].as_object().unwrap().keys().cloned().collect();
        assert_eq!(labels, ["action", "object", "scene_text"]);
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Manifest::load(dir.path()), Err(CoreError::Io { .. })));
    }
}
