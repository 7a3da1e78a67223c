use serde::{Deserialize, Serialize};

use super::describe::{realize_description, TemplateConfig};
use super::features::{render_region_features, FeatureConfig};
use super::instance::{split_dataset, ObjectAnnotation, VsdInstance};
use super::scene::{generate_scene, splitmix64, SceneConfig};
use super::vocab::Vocabulary;
use crate::error::{Result, VsdError};

/// Everything needed to regenerate a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Number of instances; scenes are generated until it is reached.
    pub n_instances: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub features: FeatureConfig,
    pub templates: TemplateConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_instances: 10_000,
            seed: 0,
            scene: SceneConfig::default(),
            features: FeatureConfig::default(),
            templates: TemplateConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances < 10 {
            return Err(VsdError::Config(format!(
                "n_instances must be at least 10, got {}",
                self.n_instances
            )));
        }
        self.scene.validate()?;
        self.features.validate()?;
        self.templates.validate()
    }
}

/// Seed of scene `index` in a corpus generated with `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

/// Generates, describes and splits a synthetic corpus. Each scene
/// contributes its annotated pairs in order; the last scene may be truncated
/// to hit `n_instances` exactly.
pub fn generate_corpus(config: &DataConfig) -> Result<Vec<VsdInstance>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.n_instances);
    let mut index = 0u64;
    while out.len() < config.n_instances {
        let seed = scene_seed(config.seed, index);
        let scene = generate_scene(seed, &config.scene)?;
        let features = render_region_features(&scene, &config.features)?;
        for (k, pair) in scene.pairs.iter().enumerate() {
            if out.len() == config.n_instances {
                break;
            }
            let (a, b) = (&scene.objects[pair.o1], &scene.objects[pair.o2]);
            let description =
                realize_description(a, b, pair.relation, splitmix64(seed ^ (k as u64 + 1)), &config.templates)?;
            out.push(VsdInstance {
                id: format!("s{index}-{k}"),
                scene: index,
                features: features.clone(),
                o1: ObjectAnnotation {
                    tag: a.tag(),
                    bbox: a.bbox,
                },
                o2: ObjectAnnotation {
                    tag: b.tag(),
                    bbox: b.bbox,
                },
                relation: pair.relation,
                description,
                split: None,
            });
        }
        index += 1;
    }
    split_dataset(&out, splitmix64(config.seed ^ 0x5EED))?.apply(&mut out);
    Ok(out)
}

/// Vocabulary over every tag and description token of `instances`.
pub fn build_vocabulary(instances: &[VsdInstance]) -> Vocabulary {
    Vocabulary::build(instances.iter().flat_map(|i| {
        i.o1.tag_tokens()
            .into_iter()
            .chain(i.o2.tag_tokens())
            .chain(i.description.iter().map(String::as_str))
    }))
}
