use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{ground_truth_relation, is_unambiguous, BBox, RelationThresholds};
use super::relation::SpatialRelation;
use crate::error::{Result, VsdError};

/// A noun of the tag inventory with the verb used when it is the subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NounSpec {
    pub noun: String,
    pub predicate: String,
}

impl NounSpec {
    pub fn new(noun: &str, predicate: &str) -> Self {
        NounSpec {
            noun: noun.to_string(),
            predicate: predicate.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub nouns: Vec<NounSpec>,
    pub attributes: Vec<String>,
    /// Probability that an object carries an attribute word in its tag.
    pub attribute_prob: f64,
    /// Target frequency of each relation, indexed by [`SpatialRelation::index`].
    pub relation_mix: [f64; 9],
    pub thresholds: RelationThresholds,
    /// Probability of also annotating the reversed pair when its relation is
    /// the inverse of the primary one.
    pub reverse_pair_prob: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let nouns = [
            ("car", "is"),
            ("truck", "is"),
            ("bicycle", "is"),
            ("man", "stands"),
            ("woman", "stands"),
            ("child", "stands"),
            ("dog", "sits"),
            ("cat", "sits"),
            ("bird", "sits"),
            ("cup", "sits"),
            ("bottle", "stands"),
            ("book", "lies"),
            ("laptop", "is"),
            ("lamp", "is"),
            ("chair", "stands"),
            ("table", "stands"),
            ("box", "is"),
            ("bag", "lies"),
            ("plant", "is"),
            ("pole", "stands"),
            ("sign", "hangs"),
            ("ball", "lies"),
        ];
        let attributes = [
            "red", "blue", "green", "white", "black", "small", "large", "wooden", "old",
        ];
        SceneConfig {
            min_objects: 2,
            max_objects: 6,
            nouns: nouns.iter().map(|(n, p)| NounSpec::new(n, p)).collect(),
            attributes: attributes.iter().map(|s| s.to_string()).collect(),
            attribute_prob: 0.4,
            relation_mix: [0.14, 0.10, 0.10, 0.11, 0.11, 0.11, 0.11, 0.11, 0.11],
            thresholds: RelationThresholds::default(),
            reverse_pair_prob: 0.5,
            max_attempts: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nouns.len() < 2 {
            return Err(VsdError::Config(
                "scene tag inventory needs at least two nouns".into(),
            ));
        }
        if self.nouns.iter().any(|n| n.noun.trim().is_empty() || n.predicate.trim().is_empty()) {
            return Err(VsdError::Config("empty noun or predicate in tag inventory".into()));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return Err(VsdError::Config(format!(
                "object count range {}..={} is invalid (need 2 <= min <= max)",
                self.min_objects, self.max_objects
            )));
        }
        if self.attribute_prob > 0.0 && self.attributes.is_empty() {
            return Err(VsdError::Config(
                "attribute_prob > 0 but the attribute inventory is empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.attribute_prob) || !(0.0..=1.0).contains(&self.reverse_pair_prob)
        {
            return Err(VsdError::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.relation_mix.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.relation_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(VsdError::Config(format!(
                "relation_mix must be non-negative with positive sum: {:?}",
                self.relation_mix
            )));
        }
        if self.max_attempts == 0 {
            return Err(VsdError::Config("max_attempts must be positive".into()));
        }
        self.thresholds.validate()
    }

    /// Normalized target distribution over relations.
    pub fn target_distribution(&self) -> [f64; 9] {
        let total: f64 = self.relation_mix.iter().sum();
        self.relation_mix.map(|w| w / total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub noun: String,
    pub attribute: Option<String>,
    pub predicate: String,
    pub bbox: BBox,
    /// 0 is nearest to the camera, 1 farthest.
    pub depth: f64,
}

impl SceneObject {
    /// Space-separated tag, e.g. "red car".
    pub fn tag(&self) -> String {
        match &self.attribute {
            Some(a) => format!("{a} {}", self.noun),
            None => self.noun.clone(),
        }
    }
}

/// An ordered object pair with its geometric relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub o1: usize,
    pub o2: usize,
    pub relation: SpatialRelation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub objects: Vec<SceneObject>,
    /// The first pair is the primary one whose relation was sampled from the
    /// target mix.
    pub pairs: Vec<AnnotatedPair>,
}

impl Scene {
    pub fn relation_of(&self, o1: usize, o2: usize, th: &RelationThresholds) -> SpatialRelation {
        let (a, b) = (&self.objects[o1], &self.objects[o2]);
        ground_truth_relation(&a.bbox, a.depth, &b.bbox, b.depth, th)
    }
}

/// SplitMix64 step, used to derive independent sub-seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Box of width `w`, height `h` centered at (cx, cy), or `None` if it leaves the canvas.
fn place(cx: f64, cy: f64, w: f64, h: f64) -> Option<BBox> {
    BBox::from_center(cx, cy, w, h).ok()
}

/// Apparent size multiplier for an object at `depth`.
fn perspective(depth: f64) -> f64 {
    1.0 - 0.6 * depth
}

type Placement = (BBox, f64, BBox, f64);

fn propose<R: Rng + ?Sized>(target: SpatialRelation, rng: &mut R) -> Option<Placement> {
    use SpatialRelation::*;
    match target {
        On => {
            let d2 = rng.random_range(0.1..0.8);
            let d1 = d2 + rng.random_range(-0.05..0.05);
            let w2 = rng.random_range(0.3..0.6);
            let h2 = rng.random_range(0.15..0.35);
            let x2 = rng.random_range(0.0..1.0 - w2);
            let y2 = rng.random_range(0.3..1.0 - h2);
            let o2 = BBox::new(x2, y2, x2 + w2, y2 + h2).ok()?;
            let w1 = rng.random_range(0.08..0.6 * w2);
            let h1 = rng.random_range(0.08..0.25);
            let x1 = rng.random_range(x2..x2 + w2 - w1);
            let bottom = y2 + rng.random_range(-0.005..0.005);
            let o1 = BBox::new(x1, bottom - h1, x1 + w1, bottom).ok()?;
            Some((o1, d1, o2, d2))
        }
        In => {
            let d2 = rng.random_range(0.1..0.8);
            let d1 = d2 + rng.random_range(-0.05..0.05);
            let w2 = rng.random_range(0.3..0.6);
            let h2 = rng.random_range(0.3..0.6);
            let x2 = rng.random_range(0.0..1.0 - w2);
            let y2 = rng.random_range(0.0..1.0 - h2);
            let o2 = BBox::new(x2, y2, x2 + w2, y2 + h2).ok()?;
            let w1 = rng.random_range(0.3..0.7) * w2;
            let h1 = rng.random_range(0.3..0.7) * h2;
            let x1 = rng.random_range(x2 + 0.01..x2 + w2 - w1 - 0.01);
            let y1 = rng.random_range(y2 + 0.01..y2 + h2 - h1 - 0.01);
            let o1 = BBox::new(x1, y1, x1 + w1, y1 + h1).ok()?;
            Some((o1, d1, o2, d2))
        }
        NextTo => {
            let d = rng.random_range(0.1..0.8);
            let d1 = d + rng.random_range(-0.05..0.05);
            let d2 = d + rng.random_range(-0.05..0.05);
            let base = rng.random_range(0.15..0.3);
            let (w1, h1) = (base * perspective(d1), base * perspective(d1) * 1.2);
            let (w2, h2) = (w1 * rng.random_range(0.95..1.05), h1 * rng.random_range(0.95..1.05));
            let cx2 = rng.random_range(0.2..0.8);
            let cy2 = rng.random_range(0.2..0.8);
            let dy: f64 = rng.random_range(0.04..0.1) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let dx = dy.abs() * rng.random_range(-0.6..0.6);
            Some((place(cx2 + dx, cy2 + dy, w1, h1)?, d1, place(cx2, cy2, w2, h2)?, d2))
        }
        Under | Above => {
            let d1 = rng.random_range(0.0..1.0);
            let d2 = rng.random_range(0.0..1.0);
            let (w1, h1): (f64, f64) = (rng.random_range(0.1..0.35), rng.random_range(0.08..0.25));
            let (w2, h2): (f64, f64) = (rng.random_range(0.1..0.35), rng.random_range(0.08..0.25));
            let cx2 = rng.random_range(0.2..0.8);
            let cx1 = cx2 + rng.random_range(-0.4..0.4) * w2.min(w1);
            let gap = rng.random_range(0.22..0.5);
            let (cy1, cy2) = if target == Above {
                let top = rng.random_range(0.1..0.9 - gap);
                (top, top + gap)
            } else {
                let top = rng.random_range(0.1..0.9 - gap);
                (top + gap, top)
            };
            Some((place(cx1, cy1, w1, h1)?, d1, place(cx2, cy2, w2, h2)?, d2))
        }
        Behind | InFrontOf => {
            let near = rng.random_range(0.0..0.45);
            let far = near + rng.random_range(0.3..0.55);
            let (d1, d2) = if target == Behind { (far, near) } else { (near, far) };
            let base = rng.random_range(0.2..0.4);
            let (w1, h1) = (base * perspective(d1), 1.2 * base * perspective(d1));
            let (w2, h2) = (base * perspective(d2), 1.2 * base * perspective(d2));
            let cx2 = rng.random_range(0.25..0.75);
            let cy2 = rng.random_range(0.25..0.75);
            let cx1 = cx2 + rng.random_range(-0.2..0.2);
            let cy1 = cy2 + rng.random_range(-0.08..0.08);
            Some((place(cx1, cy1, w1, h1)?, d1, place(cx2, cy2, w2, h2)?, d2))
        }
        ToTheLeftOf | ToTheRightOf => {
            let d = rng.random_range(0.05..0.85);
            let d1 = d + rng.random_range(-0.08..0.08);
            let d2 = d + rng.random_range(-0.08..0.08);
            let base = rng.random_range(0.15..0.3);
            let (w1, h1) = (base * perspective(d1), 1.2 * base * perspective(d1));
            let (w2, h2) = (base * perspective(d2), 1.2 * base * perspective(d2));
            let sep = rng.random_range(0.25..0.6);
            let left = rng.random_range(0.1..0.9 - sep);
            let (cx1, cx2) = if target == ToTheLeftOf {
                (left, left + sep)
            } else {
                (left + sep, left)
            };
            let cy2 = rng.random_range(0.2..0.8);
            let cy1 = cy2 + rng.random_range(-0.1..0.1);
            Some((place(cx1, cy1, w1, h1)?, d1, place(cx2, cy2, w2, h2)?, d2))
        }
    }
}

fn sample_tag<R: Rng + ?Sized>(
    config: &SceneConfig,
    rng: &mut R,
    exclude: &[usize],
) -> (usize, Option<String>) {
    let noun = loop {
        let i = rng.random_range(0..config.nouns.len());
        if !exclude.contains(&i) {
            break i;
        }
    };
    let attr = if !config.attributes.is_empty() && rng.random_bool(config.attribute_prob) {
        Some(config.attributes[rng.random_range(0..config.attributes.len())].clone())
    } else {
        None
    };
    (noun, attr)
}

fn make_object(config: &SceneConfig, noun: usize, attribute: Option<String>, bbox: BBox, depth: f64) -> SceneObject {
    SceneObject {
        noun: config.nouns[noun].noun.clone(),
        attribute,
        predicate: config.nouns[noun].predicate.clone(),
        bbox,
        depth: depth.clamp(0.0, 1.0),
    }
}

/// Generates one scene deterministically from `seed`.
///
/// A target relation is drawn from the configured mix and placements are
/// rejection-sampled until the labeller assigns exactly that relation and
/// the label survives threshold perturbation. Remaining objects are random
/// distractors with nouns distinct from the annotated pair.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let th = &config.thresholds;
    let mix = WeightedIndex::new(config.relation_mix.iter().copied())
        .map_err(|e| VsdError::Config(format!("relation_mix: {e}")))?;
    let target = SpatialRelation::ALL[mix.sample(&mut rng)];

    let mut placement = None;
    for _ in 0..config.max_attempts {
        if let Some((b1, d1, b2, d2)) = propose(target, &mut rng) {
            let (d1, d2) = (d1.clamp(0.0, 1.0), d2.clamp(0.0, 1.0));
            if ground_truth_relation(&b1, d1, &b2, d2, th) == target
                && is_unambiguous(&b1, d1, &b2, d2, th)
            {
                placement = Some((b1, d1, b2, d2));
                break;
            }
        }
    }
    let (b1, d1, b2, d2) = placement.ok_or_else(|| {
        VsdError::Config(format!(
            "no unambiguous `{target}` placement found in {} attempts; thresholds may be too tight",
            config.max_attempts
        ))
    })?;

    let (n1, a1) = sample_tag(config, &mut rng, &[]);
    let (n2, a2) = sample_tag(config, &mut rng, &[n1]);
    let mut objects = vec![
        make_object(config, n1, a1, b1, d1),
        make_object(config, n2, a2, b2, d2),
    ];
    let mut pairs = vec![AnnotatedPair {
        o1: 0,
        o2: 1,
        relation: target,
    }];
    if let Some(inv) = target.inverse() {
        let reversed = ground_truth_relation(&b2, d2, &b1, d1, th);
        if reversed == inv
            && is_unambiguous(&b2, d2, &b1, d1, th)
            && rng.random_bool(config.reverse_pair_prob)
        {
            pairs.push(AnnotatedPair {
                o1: 1,
                o2: 0,
                relation: inv,
            });
        }
    }

    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let used = [n1, n2];
    while objects.len() < n_objects {
        let exclude: Vec<usize> = if config.nouns.len() > used.len() { used.to_vec() } else { Vec::new() };
        let (n, a) = sample_tag(config, &mut rng, &exclude);
        let depth = rng.random_range(0.0..1.0);
        let base = rng.random_range(0.1..0.3) * perspective(depth);
        let (w, h) = (base, base * rng.random_range(0.8..1.5));
        let x = rng.random_range(0.0..1.0 - w);
        let y = rng.random_range(0.0..(1.0 - h).max(1e-3));
        if let Ok(b) = BBox::new(x, y, x + w, (y + h).min(1.0)) {
            objects.push(make_object(config, n, a, b, depth));
        }
    }

    Ok(Scene {
        seed,
        canvas_width: 640,
        canvas_height: 480,
        objects,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap(), generate_scene(8, &cfg).unwrap());
    }

    #[test]
    fn scenes_respect_the_contract() {
        let cfg = SceneConfig::default();
        for seed in 0..500 {
            let s = generate_scene(splitmix64(seed), &cfg).unwrap();
            assert!((cfg.min_objects..=cfg.max_objects).contains(&s.objects.len()));
            assert!(!s.pairs.is_empty());
            for o in &s.objects {
                o.bbox.validate().unwrap();
                assert!((0.0..=1.0).contains(&o.depth));
            }
            for p in &s.pairs {
                assert_eq!(s.relation_of(p.o1, p.o2, &cfg.thresholds), p.relation);
                let (a, b) = (&s.objects[p.o1], &s.objects[p.o2]);
                assert!(is_unambiguous(&a.bbox, a.depth, &b.bbox, b.depth, &cfg.thresholds));
                assert_ne!(a.noun, b.noun);
            }
        }
    }

    #[test]
    fn empty_inventory_is_rejected() {
        let cfg = SceneConfig {
            nouns: Vec::new(),
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(1, &cfg), Err(VsdError::Config(_))));
    }

    #[test]
    fn relation_mix_matches_target_over_10k_scenes() {
        let cfg = SceneConfig::default();
        let mut counts = [0usize; 9];
        let n = 10_000;
        for i in 0..n {
            let s = generate_scene(splitmix64(1000 + i), &cfg).unwrap();
            counts[s.pairs[0].relation.index()] += 1;
        }
        // Pearson statistic against the configured mix; 26.12 is the 0.999
        // quantile of chi-squared with 8 degrees of freedom.
        let expected = cfg.target_distribution();
        let chi2: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&c, p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 26.12, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn every_relation_can_be_generated_alone() {
        for r in SpatialRelation::ALL {
            let mut mix = [0.0; 9];
            mix[r.index()] = 1.0;
            let cfg = SceneConfig {
                relation_mix: mix,
                ..SceneConfig::default()
            };
            for seed in 0..50 {
                assert_eq!(generate_scene(seed, &cfg).unwrap().pairs[0].relation, r);
            }
        }
    }
}
