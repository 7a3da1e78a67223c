use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::RegionFeatures;
use super::geometry::BBox;
use super::relation::SpatialRelation;
use crate::error::{Result, VsdError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = VsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(VsdError::InvalidInput(format!("unknown split `{s}`"))),
        }
    }
}

/// An object of the annotated pair as stored in instance files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    /// Space-separated tag words, e.g. "red car".
    pub tag: String,
    pub bbox: BBox,
}

impl ObjectAnnotation {
    pub fn tag_tokens(&self) -> Vec<&str> {
        self.tag.split_whitespace().collect()
    }
}

/// One example: image features, object pair, relation and description.
#[derive(Clone, Debug, PartialEq)]
pub struct VsdInstance {
    pub id: String,
    /// Instances sharing a scene id always land in the same split.
    pub scene: u64,
    pub features: RegionFeatures,
    pub o1: ObjectAnnotation,
    pub o2: ObjectAnnotation,
    pub relation: SpatialRelation,
    pub description: Vec<String>,
    pub split: Option<Split>,
}

/// Index lists of a train/dev/test partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn apply(&self, instances: &mut [VsdInstance]) {
        for s in [Split::Train, Split::Dev, Split::Test] {
            for &i in self.get(s) {
                instances[i].split = Some(s);
            }
        }
    }
}

/// Scene-level 7:1:2 split. Scenes are shuffled with `seed`; the first
/// `round(0.7 n)` go to train, the next `round(0.1 n)` to dev, the rest to test.
pub fn split_dataset(instances: &[VsdInstance], seed: u64) -> Result<Partition> {
    if instances.len() < 10 {
        return Err(VsdError::InvalidInput(format!(
            "splitting needs at least 10 instances, got {}",
            instances.len()
        )));
    }
    let mut by_scene: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_scene.entry(inst.scene).or_default().push(i);
    }
    let mut scenes: Vec<u64> = by_scene.keys().copied().collect();
    scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = scenes.len();
    let n_train = (0.7 * n as f64).round() as usize;
    let n_dev = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let mut p = Partition::default();
    for (k, s) in scenes.iter().enumerate() {
        let target = if k < n_train {
            &mut p.train
        } else if k < n_train + n_dev {
            &mut p.dev
        } else {
            &mut p.test
        };
        target.extend(&by_scene[s]);
    }
    for v in [&mut p.train, &mut p.dev, &mut p.test] {
        v.sort_unstable();
    }
    Ok(p)
}

/// Instances of `split`, in file order.
pub fn select_split(instances: &[VsdInstance], split: Split) -> Vec<&VsdInstance> {
    instances.iter().filter(|i| i.split == Some(split)).collect()
}
