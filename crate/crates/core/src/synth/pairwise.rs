use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ManifestEntry, TaskId};
use crate::{CoreError, Result};

pub const MIN_EXAMPLES: usize = 10;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

/// Train/test ids for one task pair, with `task_a < task_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDataset {
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    #[serde(skip, default = "default_fraction")]
    pub train_fraction: f64,
}

fn default_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

impl PairwiseDataset {
    pub fn tasks(&self) -> [TaskId; 2] {
        [self.task_a, self.task_b]
    }

    pub fn other(&self, task: TaskId) -> Option<TaskId> {
        match task {
            t if t == self.task_a => Some(self.task_b),
            t if t == self.task_b => Some(self.task_a),
            _ => None,
        }
    }

    pub fn file_name(&self) -> String {
        format!("pair_{}_{}.json", self.task_a, self.task_b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self).expect("pairwise dataset serializes");
        fs::write(path, json).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let ds: Self = serde_json::from_str(&text)
            .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
        if ds.task_a >= ds.task_b {
            return Err(CoreError::InvalidPair(ds.task_a, ds.task_b));
        }
        Ok(ds)
    }
}

/// Shuffles `ids` under `seed` and cuts off the first `round(n * fraction)`.
pub fn split_ids(ids: &[u64], fraction: f64, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((ids.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let test = ids.split_off(cut);
    (ids, test)
}

fn counts<'a>(entries: impl Iterator<Item = &'a str>) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for l in entries {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

/// Downsamples until, for both tasks, the most frequent label occurs at most
/// twice as often as the least frequent one still present.
fn balance<'a>(pool: &mut Vec<&'a ManifestEntry>, a: TaskId, b: TaskId) {
    loop {
        let ca = counts(pool.iter().map(|e| e.labels.get(a)));
        let cb = counts(pool.iter().map(|e| e.labels.get(b)));
        let cap = |c: &HashMap<&str, usize>| 2 * c.values().copied().min().unwrap_or(0);
        let (cap_a, cap_b) = (cap(&ca), cap(&cb));
        let over_a = ca.values().any(|&n| n > cap_a);
        let over_b = cb.values().any(|&n| n > cap_b);
        if !over_a && !over_b {
            return;
        }
        // keep the first `cap` occurrences of every over-represented label
        let mut seen_a: HashMap<&str, usize> = HashMap::new();
        let mut seen_b: HashMap<&str, usize> = HashMap::new();
        pool.retain(|e| {
            let na = seen_a.entry(e.labels.get(a)).or_insert(0);
            let nb = seen_b.entry(e.labels.get(b)).or_insert(0);
            *na += 1;
            *nb += 1;
            (!over_a || *na <= cap_a) && (!over_b || *nb <= cap_b)
        });
    }
}

pub fn build_pairwise_dataset(
    entries: &[ManifestEntry],
    task_a: TaskId,
    task_b: TaskId,
    train_fraction: f64,
    seed: u64,
) -> Result<PairwiseDataset> {
    if task_a == task_b {
        return Err(CoreError::InvalidPair(task_a, task_b));
    }
    if entries.len() < MIN_EXAMPLES {
        return Err(CoreError::TooFewExamples {
            need: MIN_EXAMPLES,
            got: entries.len(),
        });
    }
    let (a, b) = if task_a < task_b {
        (task_a, task_b)
    } else {
        (task_b, task_a)
    };
    let mut pool: Vec<&ManifestEntry> = entries.iter().collect();
    pool.sort_by_key(|e| e.id);
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xBA1A_4CED));
    balance(&mut pool, a, b);
    let ids: Vec<u64> = pool.iter().map(|e| e.id).collect();
    let (train, test) = split_ids(&ids, train_fraction, seed);
    Ok(PairwiseDataset {
        task_a: a,
        task_b: b,
        train,
        test,
        train_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TaskLabels;

    fn entry(id: u64, object: &str, action: &str) -> ManifestEntry {
        ManifestEntry {
            id,
            seed: id,
            image_path: String::new(),
            labels: TaskLabels {
                object: object.into(),
                action: action.into(),
                scene_text: "kiwi".into(),
            },
            caption: String::new(),
        }
    }

    fn balanced(n: u64) -> Vec<ManifestEntry> {
        let objs = ["circle", "ring", "square", "frame"];
        let acts = ["lift", "run"];
        (0..n)
            .map(|i| entry(i, objs[(i % 4) as usize], acts[((i / 4) % 2) as usize]))
            .collect()
    }

    #[test]
    fn hundred_examples_split_ninety_ten() {
        let ds = build_pairwise_dataset(&balanced(100), TaskId::Object, TaskId::Action, 0.9, 3).unwrap();
        assert_eq!(ds.train.len(), 90);
        assert_eq!(ds.test.len(), 10);
    }

    #[test]
    fn same_seed_same_split() {
        let e = balanced(64);
        let x = build_pairwise_dataset(&e, TaskId::Action, TaskId::Object, 0.9, 5).unwrap();
        let y = build_pairwise_dataset(&e, TaskId::Action, TaskId::Object, 0.9, 5).unwrap();
        assert_eq!(x, y);
        assert_eq!((x.task_a, x.task_b), (TaskId::Object, TaskId::Action));
    }

    #[test]
    fn rejects_tiny_manifests_and_degenerate_pairs() {
        let e = balanced(9);
        assert!(matches!(
            build_pairwise_dataset(&e, TaskId::Object, TaskId::Action, 0.9, 0),
            Err(CoreError::TooFewExamples { got: 9, .. })
        ));
        assert!(build_pairwise_dataset(&balanced(20), TaskId::Object, TaskId::Object, 0.9, 0).is_err());
    }

    #[test]
    fn skewed_marginals_get_downsampled() {
        let mut e = balanced(40);
        for i in 40..140 {
            e.push(entry(i, "circle", "lift"));
        }
        let ds = build_pairwise_dataset(&e, TaskId::Object, TaskId::Action, 0.9, 1).unwrap();
        let kept: Vec<_> = ds.train.iter().chain(&ds.test).collect();
        let by_id: HashMap<u64, &ManifestEntry> = e.iter().map(|x| (x.id, x)).collect();
        for t in [TaskId::Object, TaskId::Action] {
            let c = counts(kept.iter().map(|id| by_id[id].labels.get(t)));
            let (lo, hi) = (c.values().min().unwrap(), c.values().max().unwrap());
            assert!(*hi <= 2 * *lo, "{t}: {c:?}");
        }
    }

    #[test]
    fn json_has_exactly_the_schema_keys() {
        let ds = build_pairwise_dataset(&balanced(20), TaskId::Object, TaskId::Action, 0.9, 0).unwrap();
        let v = serde_json::to_value(&ds).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["task_a", "task_b", "test", "train"]);
    }
}
