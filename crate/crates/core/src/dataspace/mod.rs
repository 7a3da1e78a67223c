//! Synthetic scenes with rule-based spatial relations, template
//! descriptions, region features, instance files and splits.

mod corpus;
mod describe;
mod features;
mod geometry;
mod instance;
mod io;
mod relation;
mod scene;
pub mod vocab;

pub use corpus::{build_vocabulary, generate_corpus, scene_seed, DataConfig};
pub use describe::{mentions_relation, realize_description, Template, TemplateConfig, MAX_DESCRIPTION_TOKENS};
pub use features::{hash_embedding, render_region_features, FeatureConfig, RegionFeatures};
pub use geometry::{ground_truth_relation, is_unambiguous, BBox, RelationThresholds};
pub use instance::{select_split, split_dataset, ObjectAnnotation, Partition, Split, VsdInstance};
pub use io::{companion_path, load_external, save_instances, FeatureStorage, SCHEMA_NAME, SCHEMA_VERSION};
pub use relation::SpatialRelation;
pub use scene::{generate_scene, splitmix64, AnnotatedPair, NounSpec, Scene, SceneConfig, SceneObject};
pub use vocab::Vocabulary;
