use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataspace::{
    build_vocabulary, companion_path, generate_corpus, load_external, save_instances, DataConfig, FeatureStorage,
    Split, VsdInstance, Vocabulary,
};
use crate::error::{Result, VsdError};
use crate::metrics::relation_histogram;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub n_instances: usize,
    pub counts: SplitCounts,
    /// Scenes per split; splitting assigns whole scenes.
    pub scenes: SplitCounts,
    pub relation_histogram: BTreeMap<String, usize>,
    /// SHA-256 of the generating configuration.
    pub data_hash: String,
    pub config: DataConfig,
}

/// SHA-256 over the JSON form of a data configuration.
pub fn data_hash(cfg: &DataConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

pub fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

fn scene_counts(data: &[VsdInstance]) -> SplitCounts {
    let mut sets: [BTreeSet<u64>; 3] = Default::default();
    for i in data {
        let k = match i.split {
            Some(Split::Train) => 0,
            Some(Split::Dev) => 1,
            Some(Split::Test) => 2,
            None => continue,
        };
        sets[k].insert(i.scene);
    }
    SplitCounts {
        train: sets[0].len(),
        dev: sets[1].len(),
        test: sets[2].len(),
    }
}

fn outputs(dir: &Path) -> Vec<PathBuf> {
    let mut v = vec![dir.join(MANIFEST_FILE)];
    for s in [Split::Train, Split::Dev, Split::Test] {
        let f = split_file(dir, s);
        v.push(companion_path(&f));
        v.push(f);
    }
    v
}

/// Generates the corpus and writes `train/dev/test.jsonl`, their feature
/// companions and `manifest.json` into `dir`. Existing outputs are only
/// replaced with `force`.
pub fn gen_data(cfg: &DataConfig, dir: &Path, force: bool) -> Result<DataManifest> {
    cfg.validate()?;
    if !force {
        if let Some(p) = outputs(dir).into_iter().find(|p| p.exists()) {
            return Err(VsdError::OutputExists { path: p });
        }
    }
    let data = generate_corpus(cfg)?;
    fs::create_dir_all(dir).map_err(|e| VsdError::io(dir, e))?;
    let mut counts = [0usize; 3];
    for (k, s) in [Split::Train, Split::Dev, Split::Test].into_iter().enumerate() {
        let part: Vec<VsdInstance> = data.iter().filter(|i| i.split == Some(s)).cloned().collect();
        counts[k] = part.len();
        save_instances(&split_file(dir, s), &part, FeatureStorage::Companion)?;
    }
    let manifest = DataManifest {
        seed: cfg.seed,
        n_instances: data.len(),
        counts: SplitCounts {
            train: counts[0],
            dev: counts[1],
            test: counts[2],
        },
        scenes: scene_counts(&data),
        relation_histogram: relation_histogram(data.iter().map(|i| &i.relation)),
        data_hash: data_hash(cfg)?,
        config: cfg.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| VsdError::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DataManifest,
    pub train: Vec<VsdInstance>,
    pub dev: Vec<VsdInstance>,
    pub test: Vec<VsdInstance>,
}

impl Dataset {
    /// Builds an in-memory dataset from a generated corpus.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let data = generate_corpus(cfg)?;
        let pick = |s| data.iter().filter(|i| i.split == Some(s)).cloned().collect::<Vec<_>>();
        let (train, dev, test) = (pick(Split::Train), pick(Split::Dev), pick(Split::Test));
        Ok(Dataset {
            manifest: DataManifest {
                seed: cfg.seed,
                n_instances: data.len(),
                counts: SplitCounts {
                    train: train.len(),
                    dev: dev.len(),
                    test: test.len(),
                },
                scenes: scene_counts(&data),
                relation_histogram: relation_histogram(data.iter().map(|i| &i.relation)),
                data_hash: data_hash(cfg)?,
                config: cfg.clone(),
            },
            train,
            dev,
            test,
        })
    }

    pub fn split(&self, s: Split) -> &[VsdInstance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Vocabulary over the training split.
    pub fn vocabulary(&self) -> Vocabulary {
        build_vocabulary(&self.train)
    }
}

/// Loads a generated dataset. With `expected` set, a dataset generated from
/// a different configuration is rejected.
pub fn load_dataset(dir: &Path, expected: Option<&DataConfig>) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| VsdError::io(&mpath, e))?;
    let manifest: DataManifest = serde_json::from_str(&text)?;
    if let Some(cfg) = expected {
        let h = data_hash(cfg)?;
        if h != manifest.data_hash {
            return Err(VsdError::Incompatible(format!(
                "dataset in {} was generated from a different data configuration (hash {}, expected {h}); \
                 rerun gen-data",
                dir.display(),
                manifest.data_hash
            )));
        }
    }
    let mut parts = Vec::with_capacity(3);
    for s in [Split::Train, Split::Dev, Split::Test] {
        let path = split_file(dir, s);
        let part = load_external(&path)?;
        if let Some((line, bad)) = part.iter().enumerate().find(|(_, i)| i.split.is_some_and(|x| x != s)) {
            return Err(VsdError::Schema {
                path: path.display().to_string(),
                line: line + 2,
                field: "split".into(),
                message: format!("instance `{}` belongs to another split", bad.id),
            });
        }
        parts.push(part);
    }
    let counts = [parts[0].len(), parts[1].len(), parts[2].len()];
    let m = &manifest.counts;
    if counts != [m.train, m.dev, m.test] {
        return Err(VsdError::Incompatible(format!(
            "split sizes {counts:?} disagree with the manifest {:?}",
            [m.train, m.dev, m.test]
        )));
    }
    let test = parts.pop().unwrap_or_default();
    let dev = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(Dataset {
        manifest,
        train,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> DataConfig {
        DataConfig {
            n_instances: n,
            seed: 4,
            ..DataConfig::default()
        }
    }

    #[test]
    fn gen_data_writes_splits_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_data(&cfg(200), dir.path(), false).unwrap();
        assert_eq!(m.counts.train + m.counts.dev + m.counts.test, 200);
        let sc = &m.scenes;
        let n = (sc.train + sc.dev + sc.test) as f64;
        assert!(sc.train.abs_diff((0.7 * n).round() as usize) <= 1);
        assert!(sc.dev.abs_diff((0.1 * n).round() as usize) <= 1);
        assert!(m.counts.train > m.counts.dev && m.counts.test > m.counts.dev);
        assert_eq!(m.relation_histogram.values().sum::<usize>(), 200);
        let ds = load_dataset(dir.path(), Some(&cfg(200))).unwrap();
        assert_eq!(ds.train.len(), m.counts.train);
        assert_eq!(ds.manifest, m);

        assert!(matches!(gen_data(&cfg(200), dir.path(), false), Err(VsdError::OutputExists { .. })));
        let first = fs::read(split_file(dir.path(), Split::Test)).unwrap();
        gen_data(&cfg(200), dir.path(), true).unwrap();
        assert_eq!(fs::read(split_file(dir.path(), Split::Test)).unwrap(), first);

        assert!(matches!(load_dataset(dir.path(), Some(&cfg(300))), Err(VsdError::Incompatible(_))));
    }

    #[test]
    fn in_memory_dataset_matches_written_one() {
        let dir = tempfile::tempdir().unwrap();
        gen_data(&cfg(120), dir.path(), false).unwrap();
        let a = load_dataset(dir.path(), None).unwrap();
        let b = Dataset::generate(&cfg(120)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.vocabulary(), b.vocabulary());
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), None), Err(VsdError::Io { .. })));
    }
}
