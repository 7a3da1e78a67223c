//! Shared fixtures for the criterion benches under `benches/`.

use vsd_core::dataspace::{build_vocabulary, generate_corpus, DataConfig, Split};
use vsd_core::model::{Example, Heads, ModelConfig, VsdModel};

/// A freshly initialised model and a handful of encoded test examples.
pub fn fixture(config: ModelConfig, heads: Heads, n_examples: usize) -> (VsdModel, Vec<Example>) {
    let data = generate_corpus(&DataConfig {
        n_instances: 400,
        ..DataConfig::default()
    })
    .expect("corpus");
    let train: Vec<_> = data.iter().filter(|d| d.split == Some(Split::Train)).cloned().collect();
    let vocab = build_vocabulary(&train);
    let test: Vec<_> = data
        .iter()
        .filter(|d| d.split == Some(Split::Test))
        .take(n_examples)
        .cloned()
        .collect();
    let examples = Example::from_instances(&test, &vocab).expect("examples");
    let model = VsdModel::new(config, heads, vocab).expect("model");
    (model, examples)
}
