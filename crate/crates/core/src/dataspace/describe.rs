use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::relation::SpatialRelation;
use super::scene::SceneObject;
use crate::error::{Result, VsdError};

pub const MAX_DESCRIPTION_TOKENS: usize = 40;

/// A sentence pattern. Slots: `{t1}`, `{t2}` (object tags), `{pred}` (the
/// subject's predicate) and `{rel}` (relation phrase).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub pattern: String,
    #[serde(default = "one")]
    pub weight: f64,
    /// Relations the template applies to; empty means all.
    #[serde(default)]
    pub relations: Vec<SpatialRelation>,
}

fn one() -> f64 {
    1.0
}

impl Template {
    pub fn new(pattern: &str, weight: f64) -> Self {
        Template {
            pattern: pattern.to_string(),
            weight,
            relations: Vec::new(),
        }
    }

    pub fn applies_to(&self, r: SpatialRelation) -> bool {
        self.relations.is_empty() || self.relations.contains(&r)
    }

    /// Words of the pattern that are not slots.
    pub fn literal_tokens(&self) -> impl Iterator<Item = &str> {
        self.pattern.split_whitespace().filter(|w| !w.starts_with('{'))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub templates: Vec<Template>,
    /// Probability of using the canonical relation phrase rather than a
    /// registered paraphrase (when one exists).
    pub canonical_prob: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            templates: vec![
                Template::new("the {t1} {pred} {rel} the {t2}", 3.0),
                Template::new("a {t1} {pred} {rel} a {t2}", 2.0),
                Template::new("there is a {t1} {rel} the {t2}", 2.0),
                Template::new("the {t1} {rel} the {t2}", 1.5),
                Template::new("you can see a {t1} {rel} the {t2}", 1.0),
                Template::new("a {t1} that {pred} {rel} a {t2}", 0.5),
            ],
            canonical_prob: 0.8,
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.canonical_prob) {
            return Err(VsdError::Config("canonical_prob must lie in [0, 1]".into()));
        }
        for t in &self.templates {
            if !(t.weight.is_finite() && t.weight > 0.0) {
                return Err(VsdError::Config(format!(
                    "template `{}` has non-positive weight",
                    t.pattern
                )));
            }
            for slot in ["{t1}", "{t2}", "{rel}"] {
                if !t.pattern.split_whitespace().any(|w| w == slot) {
                    return Err(VsdError::Config(format!(
                        "template `{}` lacks the {slot} slot",
                        t.pattern
                    )));
                }
            }
            if let Some(bad) = t
                .pattern
                .split_whitespace()
                .find(|w| w.starts_with('{') && !["{t1}", "{t2}", "{rel}", "{pred}"].contains(w))
            {
                return Err(VsdError::Config(format!(
                    "template `{}` has unknown slot {bad}",
                    t.pattern
                )));
            }
        }
        for r in SpatialRelation::ALL {
            if !self.templates.iter().any(|t| t.applies_to(r)) {
                return Err(VsdError::Config(format!("no template covers relation `{r}`")));
            }
        }
        Ok(())
    }
}

/// Fills a template for the pair `(o1, o2)` related by `relation`. The
/// relation text is the canonical phrase or one of its paraphrases, so every
/// description contains one of them contiguously.
pub fn realize_description(
    o1: &SceneObject,
    o2: &SceneObject,
    relation: SpatialRelation,
    seed: u64,
    config: &TemplateConfig,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<&Template> =
        config.templates.iter().filter(|t| t.applies_to(relation)).collect();
    if candidates.is_empty() {
        return Err(VsdError::Config(format!("no template covers relation `{relation}`")));
    }
    let pick = WeightedIndex::new(candidates.iter().map(|t| t.weight))
        .map_err(|e| VsdError::Config(format!("template weights: {e}")))?;
    let template = candidates[pick.sample(&mut rng)];
    let paraphrases = relation.paraphrases();
    let phrase = if paraphrases.is_empty() || rng.random_bool(config.canonical_prob) {
        relation.phrase()
    } else {
        paraphrases[rng.random_range(0..paraphrases.len())]
    };

    let mut out = Vec::new();
    for w in template.pattern.split_whitespace() {
        match w {
            "{t1}" => out.extend(o1.tag().split_whitespace().map(str::to_string)),
            "{t2}" => out.extend(o2.tag().split_whitespace().map(str::to_string)),
            "{pred}" => out.extend(o1.predicate.split_whitespace().map(str::to_string)),
            "{rel}" => out.extend(phrase.split_whitespace().map(str::to_string)),
            lit => out.push(lit.to_lowercase()),
        }
    }
    if out.len() > MAX_DESCRIPTION_TOKENS {
        return Err(VsdError::InvalidInput(format!(
            "description has {} tokens, limit is {MAX_DESCRIPTION_TOKENS}",
            out.len()
        )));
    }
    Ok(out)
}

/// Whether `tokens` contains `relation`'s canonical phrase or a paraphrase
/// as a contiguous span.
pub fn mentions_relation(tokens: &[String], relation: SpatialRelation) -> bool {
    std::iter::once(relation.phrase())
        .chain(relation.paraphrases().iter().copied())
        .any(|p| {
            let words: Vec<&str> = p.split(' ').collect();
            tokens
                .windows(words.len())
                .any(|w| w.iter().zip(&words).all(|(a, b)| a == b))
        })
}
