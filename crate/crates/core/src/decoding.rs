//! Greedy and beam search, plus the pipeline, one-round and two-round
//! inference strategies.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataspace::vocab::{BOS, EOS, MASK, PAD};
use crate::dataspace::{SpatialRelation, MAX_DESCRIPTION_TOKENS};
use crate::error::{Result, VsdError};
use crate::model::{EmbeddingVariant, Example, VsdModel};
use crate::numerics::{Tape, Tensor};
use crate::transformer::{Dropout, EncoderOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Search {
    Greedy,
    Beam { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub search: Search,
    /// Content tokens before end-of-sequence is forced.
    pub max_len: usize,
    /// Rank beam hypotheses by log-probability divided by token count.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            search: Search::Beam { size: 4 },
            max_len: MAX_DESCRIPTION_TOKENS,
            length_normalize: true,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            search: Search::Greedy,
            ..DecodeConfig::default()
        }
    }

    pub fn beam(size: usize) -> Self {
        DecodeConfig {
            search: Search::Beam { size },
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(VsdError::Config("max_len must be positive".into()));
        }
        if self.search == (Search::Beam { size: 0 }) {
            return Err(VsdError::Config("beam size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Next-token log-probabilities given a prefix that starts with [BOS].
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Tokens that may never be generated.
pub fn is_generable(token: usize) -> bool {
    !matches!(token, PAD | BOS | MASK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Generated tokens, ending with EOS once finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub step_log_probs: Vec<f64>,
    pub finished: bool,
    pub truncated: bool,
}

impl BeamHypothesis {
    fn root() -> Self {
        BeamHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            step_log_probs: Vec::new(),
            finished: false,
            truncated: false,
        }
    }

    fn extend(&self, token: usize, lp: f64, truncated: bool) -> Self {
        let mut h = self.clone();
        h.tokens.push(token);
        h.log_prob += lp;
        h.step_log_probs.push(lp);
        h.finished = token == EOS;
        h.truncated = truncated;
        h
    }

    pub fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Decoded description plus relation information where applicable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token, EOS included.
    pub step_scores: Vec<f64>,
    /// Ranking score of the returned hypothesis.
    pub score: f64,
    pub relation: Option<SpatialRelation>,
    pub relation_scores: Option<Vec<f64>>,
    pub encoder_passes: usize,
    pub truncated: bool,
}

impl InferenceResult {
    fn from_hypothesis(h: BeamHypothesis, normalize: bool) -> Self {
        InferenceResult {
            tokens: h.content().to_vec(),
            score: h.score(normalize),
            step_scores: h.step_log_probs,
            relation: None,
            relation_scores: None,
            encoder_passes: 0,
            truncated: h.truncated,
        }
    }

    pub fn words(&self, model: &VsdModel) -> Result<Vec<String>> {
        model.vocab().decode(&self.tokens)
    }
}

fn prefix_of(h: &BeamHypothesis) -> Vec<usize> {
    let mut p = Vec::with_capacity(h.tokens.len() + 1);
    p.push(BOS);
    p.extend_from_slice(&h.tokens);
    p
}

/// Argmax per step (lowest id on ties); EOS forced at `max_len`.
pub fn greedy_search<S: StepScorer + ?Sized>(scorer: &mut S, max_len: usize) -> Result<BeamHypothesis> {
    let mut h = BeamHypothesis::root();
    while !h.finished {
        let lp = scorer.log_probs(&prefix_of(&h))?;
        if h.tokens.len() >= max_len {
            h = h.extend(EOS, lp[EOS], true);
            break;
        }
        let mut best = None::<usize>;
        for (t, &v) in lp.iter().enumerate() {
            if is_generable(t) && best.is_none_or(|b| v > lp[b]) {
                best = Some(t);
            }
        }
        let t = best.ok_or_else(|| VsdError::InvalidInput("no generable token".into()))?;
        h = h.extend(t, lp[t], false);
    }
    Ok(h)
}

fn by_log_prob(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Finished-hypothesis ranking: score, then earlier finish, then token order.
fn by_final_rank(a: &BeamHypothesis, b: &BeamHypothesis, normalize: bool) -> Ordering {
    b.score(normalize)
        .total_cmp(&a.score(normalize))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search keeping `beam_size` live hypotheses per step. A hypothesis
/// that emits EOS leaves the beam; search stops once `beam_size`
/// hypotheses have finished or none remain live.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    beam_size: usize,
    max_len: usize,
    normalize: bool,
) -> Result<BeamHypothesis> {
    if beam_size == 0 {
        return Err(VsdError::InvalidInput("beam size must be at least 1".into()));
    }
    let mut live = vec![BeamHypothesis::root()];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    while !live.is_empty() && finished.len() < beam_size {
        let mut candidates = Vec::new();
        for h in &live {
            let lp = scorer.log_probs(&prefix_of(h))?;
            if h.tokens.len() >= max_len {
                candidates.push(h.extend(EOS, lp[EOS], true));
                continue;
            }
            for (t, &v) in lp.iter().enumerate() {
                if is_generable(t) && v > f64::NEG_INFINITY {
                    candidates.push(h.extend(t, v, false));
                }
            }
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| by_final_rank(a, b, normalize))
        .ok_or_else(|| VsdError::InvalidInput("beam search produced no hypothesis".into()))
}

pub fn search<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &DecodeConfig) -> Result<InferenceResult> {
    cfg.validate()?;
    let h = match cfg.search {
        Search::Greedy => greedy_search(scorer, cfg.max_len)?,
        Search::Beam { size } => beam_search(scorer, size, cfg.max_len, cfg.length_normalize)?,
    };
    Ok(InferenceResult::from_hypothesis(h, cfg.length_normalize))
}

/// Encoder output detached from the tape that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub states: Tensor,
    pub len: usize,
}

impl Memory {
    pub fn capture(tape: &Tape<'_>, out: &EncoderOutput) -> Self {
        Memory {
            states: tape.value(out.states).clone(),
            len: out.len,
        }
    }
}

/// Decoder of a trained model over a fixed encoder memory.
pub struct ModelScorer<'m> {
    pub model: &'m VsdModel,
    pub memory: &'m Memory,
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(&self.model.params);
        let states = tape.constant(self.memory.states.clone());
        let mem = EncoderOutput {
            states,
            len: self.memory.len,
        };
        let logits = self.model.decode_logits(&mut tape, prefix, &mem, &mut Dropout::off())?;
        let last = tape.slice_rows(logits, prefix.len() - 1, 1)?;
        let lp = tape.log_softmax(last);
        Ok(tape.value(lp).data().to_vec())
    }
}

pub fn greedy_decode(model: &VsdModel, memory: &Memory, max_len: usize) -> Result<InferenceResult> {
    search(
        &mut ModelScorer { model, memory },
        &DecodeConfig {
            search: Search::Greedy,
            max_len,
            length_normalize: true,
        },
    )
}

pub fn decode(model: &VsdModel, memory: &Memory, cfg: &DecodeConfig) -> Result<InferenceResult> {
    search(&mut ModelScorer { model, memory }, cfg)
}

/// One inference-mode encoder pass.
pub fn encode_memory(
    model: &VsdModel,
    ex: &Example,
    variant: EmbeddingVariant,
    relation: Option<SpatialRelation>,
) -> Result<Memory> {
    let mut tape = Tape::inference(&model.params);
    let enc = model.encode(&mut tape, ex, variant, relation, &mut Dropout::off())?;
    Ok(Memory::capture(&tape, &enc.output))
}

/// Masked encoder pass returning the memory and the 9 relation scores.
pub fn classify(model: &VsdModel, ex: &Example) -> Result<(Memory, Vec<f64>)> {
    let mut tape = Tape::inference(&model.params);
    let enc = model.encode(&mut tape, ex, EmbeddingVariant::Masked, None, &mut Dropout::off())?;
    let scores = model.vsrc_scores(&mut tape, ex, &enc)?;
    Ok((Memory::capture(&tape, &enc.output), tape.value(scores).data().to_vec()))
}

/// Highest-scoring relation, lowest index on ties.
pub fn argmax_relation(scores: &[f64]) -> Result<SpatialRelation> {
    if scores.len() != SpatialRelation::COUNT {
        return Err(VsdError::shape("argmax_relation", &[scores.len()], &[SpatialRelation::COUNT]));
    }
    Ok(SpatialRelation::ALL[Tensor::argmax(scores)])
}

pub fn base_infer(model: &VsdModel, ex: &Example, cfg: &DecodeConfig) -> Result<InferenceResult> {
    let mem = encode_memory(model, ex, EmbeddingVariant::Base, None)?;
    let mut r = decode(model, &mem, cfg)?;
    r.encoder_passes = 1;
    Ok(r)
}

/// VSD conditioned on a given relation through the relation-augmented
/// embedding. Shared by pipeline stage 2, two-round round 2 and the golden
/// configurations.
pub fn infer_with_relation(
    model: &VsdModel,
    ex: &Example,
    relation: SpatialRelation,
    cfg: &DecodeConfig,
) -> Result<InferenceResult> {
    let mem = encode_memory(model, ex, EmbeddingVariant::WithRelation, Some(relation))?;
    let mut r = decode(model, &mem, cfg)?;
    r.relation = Some(relation);
    r.encoder_passes = 1;
    Ok(r)
}

/// Stage 1 classifies the relation, stage 2 describes with it.
pub fn pipeline_infer(
    classifier: &VsdModel,
    generator: &VsdModel,
    ex: &Example,
    cfg: &DecodeConfig,
) -> Result<InferenceResult> {
    let (_, scores) = classify(classifier, ex)?;
    let rel = argmax_relation(&scores)?;
    let mut r = infer_with_relation(generator, ex, rel, cfg)?;
    r.relation_scores = Some(scores);
    r.encoder_passes = 2;
    Ok(r)
}

/// One masked encoder pass feeds both the relation head and the decoder.
pub fn decode_one_round(model: &VsdModel, ex: &Example, cfg: &DecodeConfig) -> Result<InferenceResult> {
    let (mem, scores) = classify(model, ex)?;
    let mut r = decode(model, &mem, cfg)?;
    r.relation = Some(argmax_relation(&scores)?);
    r.relation_scores = Some(scores);
    r.encoder_passes = 1;
    Ok(r)
}

/// Round 1 predicts the relation; round 2 re-encodes with it in the
/// [MASK] slot and decodes.
pub fn decode_two_round(model: &VsdModel, ex: &Example, cfg: &DecodeConfig) -> Result<InferenceResult> {
    two_round(model, ex, None, cfg)
}

/// Two-round decoding with `relation` injected into round 2 in place of
/// the round-1 prediction. Round 1 still runs and its scores are reported.
pub fn decode_two_round_injected(
    model: &VsdModel,
    ex: &Example,
    relation: SpatialRelation,
    cfg: &DecodeConfig,
) -> Result<InferenceResult> {
    two_round(model, ex, Some(relation), cfg)
}

fn two_round(
    model: &VsdModel,
    ex: &Example,
    inject: Option<SpatialRelation>,
    cfg: &DecodeConfig,
) -> Result<InferenceResult> {
    let (_, scores) = classify(model, ex)?;
    let rel = match inject {
        Some(r) => r,
        None => argmax_relation(&scores)?,
    };
    let mut r = infer_with_relation(model, ex, rel, cfg)?;
    r.relation_scores = Some(scores);
    r.encoder_passes = 2;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataspace::vocab::{SEP, UNK};
    use crate::model::{Heads, ModelConfig};
    use crate::dataspace::{build_vocabulary, generate_corpus, DataConfig, FeatureConfig};
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Scorer backed by an explicit table of next-token distributions.
    struct TableScorer {
        vocab: usize,
        table: HashMap<Vec<usize>, Vec<f64>>,
        default: Vec<f64>,
        calls: usize,
    }

    impl StepScorer for TableScorer {
        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            self.calls += 1;
            let p = self.table.get(prefix).unwrap_or(&self.default);
            assert_eq!(p.len(), self.vocab);
            Ok(p.iter().map(|v| v.ln()).collect())
        }
    }

    fn dist(vocab: usize, pairs: &[(usize, f64)]) -> Vec<f64> {
        let mut d = vec![0.0; vocab];
        for &(t, p) in pairs {
            d[t] = p;
        }
        d
    }

    /// Greedy takes 6 (0.5) then stalls on a flat distribution; 7 (0.4)
    /// leads to a sure EOS.
    fn trap() -> TableScorer {
        let v = 8;
        let mut table = HashMap::new();
        table.insert(vec![BOS], dist(v, &[(6, 0.5), (7, 0.4), (EOS, 0.1)]));
        table.insert(vec![BOS, 6], dist(v, &[(6, 0.3), (7, 0.3), (EOS, 0.4)]));
        table.insert(vec![BOS, 7], dist(v, &[(EOS, 1.0)]));
        TableScorer {
            vocab: v,
            table,
            default: dist(v, &[(EOS, 1.0)]),
            calls: 0,
        }
    }

    /// All finished sequences of up to `max_len` content tokens, with their
    /// normalized scores.
    fn enumerate<S: StepScorer>(s: &mut S, vocab: usize, max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let probs = s.log_probs(&prefix).unwrap();
            let content = prefix.len() - 1;
            let mut end = prefix[1..].to_vec();
            end.push(EOS);
            out.push((end.clone(), (lp + probs[EOS]) / end.len() as f64));
            if content < max_len {
                for t in 0..vocab {
                    if is_generable(t) && t != EOS && probs[t] > f64::NEG_INFINITY {
                        let mut p = prefix.clone();
                        p.push(t);
                        stack.push((p, lp + probs[t]));
                    }
                }
            }
        }
        out
    }

    fn best(all: &[(Vec<usize>, f64)]) -> Vec<usize> {
        all.iter()
            .min_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| a.0.len().cmp(&b.0.len()))
                    .then_with(|| a.0.cmp(&b.0))
            })
            .unwrap()
            .0
            .clone()
    }

    #[test]
    fn greedy_falls_into_trap_beam_two_escapes() {
        let g = greedy_search(&mut trap(), 3).unwrap();
        assert_eq!(g.tokens, vec![6, EOS]);
        let b = beam_search(&mut trap(), 2, 3, true).unwrap();
        assert_eq!(b.tokens, vec![7, EOS]);
        assert!(b.score(true) >= g.score(true));
        let all = enumerate(&mut trap(), 8, 3);
        assert_eq!(best(&all), b.tokens);
    }

    #[test]
    fn beam_of_vocabulary_size_matches_enumeration_on_fixture() {
        let v = 10;
        let mut sc = trap();
        sc.vocab = v;
        for d in sc.table.values_mut().chain(std::iter::once(&mut sc.default)) {
            d.resize(v, 0.0);
        }
        sc.table.insert(vec![BOS, 6, 6], dist(v, &[(8, 0.2), (9, 0.3), (EOS, 0.5)]));
        sc.table.insert(vec![BOS, 6, 7], dist(v, &[(EOS, 1.0)]));
        let all = enumerate(&mut sc, v, 3);
        let b = beam_search(&mut sc, v, 3, true).unwrap();
        assert_eq!(b.tokens, best(&all));
    }

    fn random_scorer(seed: u64, vocab: usize) -> TableScorer {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut table = HashMap::new();
        let mut frontier = vec![vec![BOS]];
        for _ in 0..4 {
            let mut next = Vec::new();
            for p in frontier {
                let raw: Vec<f64> = (0..vocab)
                    .map(|t| if is_generable(t) { rng.random::<f64>() + 0.01 } else { 0.0 })
                    .collect();
                let z: f64 = raw.iter().sum();
                table.insert(p.clone(), raw.iter().map(|r| r / z).collect());
                for t in 0..vocab {
                    if is_generable(t) && t != EOS {
                        let mut q = p.clone();
                        q.push(t);
                        next.push(q);
                    }
                }
            }
            frontier = next;
        }
        TableScorer {
            vocab,
            table,
            default: dist(vocab, &[(EOS, 1.0)]),
            calls: 0,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn wide_beam_is_exhaustive(seed in any::<u64>(), vocab in 4usize..=7, max_len in 1usize..=3) {
            let mut sc = random_scorer(seed, vocab);
            let all = enumerate(&mut sc, vocab, max_len);
            let b = beam_search(&mut sc, all.len(), max_len, true).unwrap();
            prop_assert_eq!(&b.tokens, &best(&all));
            let g = greedy_search(&mut sc, max_len).unwrap();
            prop_assert!(b.score(true) >= g.score(true));
        }

        #[test]
        fn beam_one_is_greedy(seed in any::<u64>(), vocab in 4usize..=7, max_len in 1usize..=3) {
            let mut sc = random_scorer(seed, vocab);
            let g = greedy_search(&mut sc, max_len).unwrap();
            let b = beam_search(&mut sc, 1, max_len, true).unwrap();
            prop_assert_eq!(g, b);
        }

        #[test]
        fn hypotheses_are_well_formed(seed in any::<u64>(), size in 1usize..6) {
            let mut sc = random_scorer(seed, 7);
            let h = beam_search(&mut sc, size, 3, true).unwrap();
            prop_assert_eq!(h.tokens.last(), Some(&EOS));
            prop_assert!(h.tokens.len() <= 4);
            let mut acc = 0.0;
            for lp in &h.step_log_probs {
                prop_assert!(*lp <= 0.0);
                acc += lp;
            }
            prop_assert!((acc - h.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn length_cap_forces_eos_and_flags_truncation() {
        let v = 8;
        let mut sc = TableScorer {
            vocab: v,
            table: HashMap::new(),
            default: dist(v, &[(6, 0.9), (EOS, 0.1)]),
            calls: 0,
        };
        let g = greedy_search(&mut sc, 5).unwrap();
        assert_eq!(g.tokens, vec![6, 6, 6, 6, 6, EOS]);
        assert!(g.truncated);
        let r = search(&mut sc, &DecodeConfig { max_len: 5, ..DecodeConfig::greedy() }).unwrap();
        assert_eq!(r.tokens.len(), 5);
        assert!(r.truncated);
        assert_eq!(r.step_scores.len(), 6);
        let b = beam_search(&mut sc, 3, 2, true).unwrap();
        assert!(b.tokens.len() <= 3);
        assert_eq!(b.tokens.last(), Some(&EOS));
    }

    #[test]
    fn forbidden_tokens_never_emitted() {
        let v = 8;
        let mut sc = TableScorer {
            vocab: v,
            table: HashMap::new(),
            default: dist(v, &[(PAD, 0.3), (BOS, 0.3), (MASK, 0.3), (SEP, 0.01), (UNK, 0.01), (EOS, 0.08)]),
            calls: 0,
        };
        let g = greedy_search(&mut sc, 4).unwrap();
        assert_eq!(g.tokens, vec![EOS]);
        let b = beam_search(&mut sc, 4, 4, true).unwrap();
        assert_eq!(b.tokens, vec![EOS]);
    }

    #[test]
    fn beam_zero_rejected() {
        assert!(beam_search(&mut trap(), 0, 3, true).is_err());
        assert!(DecodeConfig::beam(0).validate().is_err());
        assert!(search(&mut trap(), &DecodeConfig::beam(0)).is_err());
    }

    #[test]
    fn tie_break_prefers_earlier_finish_then_token_order() {
        let v = 8;
        let mut table = HashMap::new();
        table.insert(vec![BOS], dist(v, &[(6, 0.25), (7, 0.25), (EOS, 0.5)]));
        table.insert(vec![BOS, 6], dist(v, &[(EOS, 1.0)]));
        table.insert(vec![BOS, 7], dist(v, &[(EOS, 1.0)]));
        // [6, EOS] and [7, EOS] score ln(.25)/2 = ln(.5); [EOS] scores ln(.5).
        let mut sc = TableScorer { vocab: v, table, default: dist(v, &[(EOS, 1.0)]), calls: 0 };
        assert_eq!(beam_search(&mut sc, 3, 3, true).unwrap().tokens, vec![EOS]);
        sc.table.insert(vec![BOS], dist(v, &[(6, 0.5), (7, 0.5)]));
        assert_eq!(beam_search(&mut sc, 3, 3, true).unwrap().tokens, vec![6, EOS]);
    }

    fn trained_like() -> (VsdModel, Vec<Example>) {
        let data = generate_corpus(&DataConfig {
            n_instances: 20,
            seed: 5,
            features: FeatureConfig { grid: 2, noun_dim: 2, attr_dim: 0 },
            ..DataConfig::default()
        })
        .unwrap();
        let vocab = build_vocabulary(&data);
        let ex = Example::from_instances(&data, &vocab).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.init_seed = 11;
        (VsdModel::new(cfg, Heads::JOINT, vocab).unwrap(), ex)
    }

    #[test]
    fn model_beam_one_equals_greedy() {
        let (m, ex) = trained_like();
        for e in &ex {
            let mem = encode_memory(&m, e, EmbeddingVariant::Base, None).unwrap();
            let g = greedy_decode(&m, &mem, 12).unwrap();
            let b = decode(&m, &mem, &DecodeConfig { max_len: 12, ..DecodeConfig::beam(1) }).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.step_scores, b.step_scores);
        }
    }

    #[test]
    fn end2end_strategies_follow_their_contracts() {
        let (m, ex) = trained_like();
        let cfg = DecodeConfig { max_len: 12, ..DecodeConfig::beam(2) };
        for e in ex.iter().take(5) {
            let one = decode_one_round(&m, e, &cfg).unwrap();
            assert_eq!(one.encoder_passes, 1);
            assert_eq!(one.relation_scores.as_ref().unwrap().len(), 9);
            let mem = encode_memory(&m, e, EmbeddingVariant::Masked, None).unwrap();
            assert_eq!(decode(&m, &mem, &cfg).unwrap().tokens, one.tokens);
            assert_eq!(decode_one_round(&m, e, &cfg).unwrap(), one);

            let two = decode_two_round(&m, e, &cfg).unwrap();
            assert_eq!(two.encoder_passes, 2);
            assert_eq!(two.relation, one.relation);
            let forced = infer_with_relation(&m, e, two.relation.unwrap(), &cfg).unwrap();
            assert_eq!(forced.tokens, two.tokens);
            assert_eq!(forced.step_scores, two.step_scores);

            let gold = decode_two_round_injected(&m, e, e.relation, &cfg).unwrap();
            let golden = infer_with_relation(&m, e, e.relation, &cfg).unwrap();
            assert_eq!(gold.tokens, golden.tokens);
            assert_eq!(gold.step_scores, golden.step_scores);
            assert_eq!(gold.score.to_bits(), golden.score.to_bits());

            let p = pipeline_infer(&m, &m, e, &cfg).unwrap();
            assert_eq!(p.tokens, two.tokens);
            assert_eq!(p.relation, two.relation);
        }
    }

    #[test]
    fn relation_argmax() {
        let mut s = vec![0.0; 9];
        s[3] = 2.0;
        s[5] = 2.0;
        assert_eq!(argmax_relation(&s).unwrap(), SpatialRelation::from_index(3).unwrap());
        assert!(argmax_relation(&s[..8]).is_err());
    }
}
