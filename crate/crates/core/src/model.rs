//! Joint vision-language encoder-decoder with the spatial relation head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataspace::vocab::{MASK, SEP};
use crate::dataspace::{BBox, RegionFeatures, SpatialRelation, VsdInstance, Vocabulary};
use crate::error::{Result, VsdError};
use crate::numerics::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor, Var};
use crate::transformer::{Decoder, Dropout, Embeddings, Encoder, EncoderOutput, Linear, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Base,
    Pipeline,
    End2end,
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelMode::Base => "base",
            ModelMode::Pipeline => "pipeline",
            ModelMode::End2end => "end2end",
        })
    }
}

impl std::str::FromStr for ModelMode {
    type Err = VsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ModelMode::Base),
            "pipeline" => Ok(ModelMode::Pipeline),
            "end2end" => Ok(ModelMode::End2end),
            _ => Err(VsdError::Config(format!("unknown mode `{s}` (base | pipeline | end2end)"))),
        }
    }
}

/// Text-side input layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingVariant {
    /// `T1 [SEP] T2`
    Base,
    /// `T1 [SEP] T2 [SEP] [MASK]`
    Masked,
    /// `T1 [SEP] T2 [SEP] relation-tokens`
    WithRelation,
}

/// Which output heads a model instance carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heads {
    pub vsd: bool,
    pub vsrc: bool,
}

impl Heads {
    pub const GENERATOR: Heads = Heads { vsd: true, vsrc: false };
    pub const CLASSIFIER: Heads = Heads { vsd: false, vsrc: true };
    pub const JOINT: Heads = Heads { vsd: true, vsrc: true };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub n_regions: usize,
    /// Region feature width `d_v`.
    pub d_v: usize,
    /// Width of the summed first-stage coordinate projections.
    pub d_coord: usize,
    /// Width of the middle coordinate FC.
    pub d_fc: usize,
    pub d_coord_out: usize,
    pub vsrc_hidden: usize,
    /// Decoding length cap in tokens, end-of-sequence excluded.
    pub max_desc_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Default preset: trains in minutes on one core.
    pub fn desk() -> Self {
        ModelConfig {
            transformer: TransformerConfig {
                d_model: 128,
                n_heads: 4,
                d_ff: 256,
                n_encoder_layers: 2,
                n_decoder_layers: 2,
                max_seq_len: 64,
                dropout_rate: 0.1,
                ..TransformerConfig::default()
            },
            n_regions: 9,
            d_v: 32,
            d_coord: 16,
            d_fc: 128,
            d_coord_out: 128,
            vsrc_hidden: 128,
            max_desc_len: 40,
            init_seed: 0,
        }
    }

    /// Small preset for multi-seed sweeps.
    pub fn small() -> Self {
        let mut c = ModelConfig::desk();
        c.transformer.d_model = 32;
        c.transformer.n_heads = 2;
        c.transformer.d_ff = 64;
        c.transformer.n_encoder_layers = 1;
        c.transformer.n_decoder_layers = 1;
        c.transformer.dropout_rate = 0.0;
        c.d_coord = 16;
        c.d_fc = 64;
        c.d_coord_out = 64;
        c.vsrc_hidden = 64;
        c
    }

    /// Tiny preset for unit tests and coordinate-wise gradient checks.
    pub fn tiny() -> Self {
        let mut c = ModelConfig::small();
        c.transformer.d_model = 8;
        c.transformer.n_heads = 2;
        c.transformer.d_ff = 12;
        c.transformer.max_seq_len = 24;
        c.n_regions = 4;
        c.d_v = 10;
        c.d_coord = 4;
        c.d_fc = 6;
        c.d_coord_out = 5;
        c.vsrc_hidden = 7;
        c.max_desc_len = 12;
        c
    }

    /// Coordinate-encoder widths at full scale (64 and 1024).
    pub fn with_full_bbox_widths(mut self) -> Self {
        self.d_coord = 64;
        self.d_fc = 1024;
        self.d_coord_out = 1024;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        let dims = [
            self.n_regions,
            self.d_v,
            self.d_coord,
            self.d_fc,
            self.d_coord_out,
            self.vsrc_hidden,
            self.max_desc_len,
        ];
        if dims.contains(&0) {
            return Err(VsdError::Config(format!("model widths must be positive: {self:?}")));
        }
        if self.max_desc_len + 2 > self.transformer.max_seq_len {
            return Err(VsdError::Config(format!(
                "max_seq_len {} cannot hold descriptions of {} tokens",
                self.transformer.max_seq_len, self.max_desc_len
            )));
        }
        Ok(())
    }
}

/// Object tag tokens plus bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRef {
    pub tag_tokens: Vec<usize>,
    pub bbox: BBox,
}

impl ObjectRef {
    pub fn new(tag_tokens: Vec<usize>, bbox: BBox) -> Result<Self> {
        if tag_tokens.is_empty() {
            return Err(VsdError::InvalidInput("object tag has no tokens".into()));
        }
        bbox.validate()?;
        Ok(ObjectRef { tag_tokens, bbox })
    }
}

/// An instance mapped to token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: RegionFeatures,
    pub o1: ObjectRef,
    pub o2: ObjectRef,
    pub relation: SpatialRelation,
    /// Description ids without BOS/EOS.
    pub target: Vec<usize>,
}

impl Example {
    pub fn from_instance(inst: &VsdInstance, vocab: &Vocabulary) -> Result<Self> {
        Ok(Example {
            id: inst.id.clone(),
            features: inst.features.clone(),
            o1: ObjectRef::new(vocab.encode(&inst.o1.tag_tokens()), inst.o1.bbox)?,
            o2: ObjectRef::new(vocab.encode(&inst.o2.tag_tokens()), inst.o2.bbox)?,
            relation: inst.relation,
            target: vocab.encode(&inst.description),
        })
    }

    pub fn from_instances(instances: &[VsdInstance], vocab: &Vocabulary) -> Result<Vec<Self>> {
        instances.iter().map(|i| Example::from_instance(i, vocab)).collect()
    }
}

/// Outputs of one teacher-forced forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Option<Var>,
    pub vsrc_scores: Option<Var>,
    pub encoder: EncoderOutput,
    pub mask_index: Option<usize>,
}

/// Encoder-side result, reusable across decoding steps.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub output: EncoderOutput,
    pub mask_index: Option<usize>,
    pub text_len: usize,
}

#[derive(Clone, Debug)]
struct BBoxEncoder {
    /// Carries the single shared first-stage bias.
    fc_a: Linear,
    /// Bias-free so that the first stage is `A c1 + B c2 + b`.
    fc_b_w: crate::numerics::ParamId,
    fc_mid: Linear,
    fc_out: Linear,
}

#[derive(Clone, Debug)]
struct VsrcHead {
    hidden: Linear,
    out: Linear,
}

/// Persisted alongside parameters in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub heads: Heads,
    pub vocab: Vocabulary,
}

impl ModelMeta {
    /// SHA-256 over the canonical JSON of config, heads and vocabulary.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("meta serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug)]
pub struct VsdModel {
    pub meta: ModelMeta,
    pub params: ParamStore,
    embeddings: Embeddings,
    vision: Linear,
    encoder: Encoder,
    decoder: Option<Decoder>,
    bbox: Option<BBoxEncoder>,
    vsrc: Option<VsrcHead>,
    relation_tokens: Vec<Vec<usize>>,
}

impl VsdModel {
    pub fn new(config: ModelConfig, heads: Heads, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if !heads.vsd && !heads.vsrc {
            return Err(VsdError::Config("a model needs at least one output head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let tc = &config.transformer;
        let d = tc.d_model;
        let embeddings = Embeddings::new(&mut store, "embed", vocab.len(), tc, &mut rng)?;
        let vision = Linear::new(&mut store, "vision", config.d_v, d, &mut rng)?;
        let encoder = Encoder::new(&mut store, "encoder", tc, &mut rng)?;
        let decoder = if heads.vsd {
            Some(Decoder::new(&mut store, "decoder", vocab.len(), tc, &mut rng)?)
        } else {
            None
        };
        let (bbox, vsrc) = if heads.vsrc {
            let fc_a = Linear::new(&mut store, "bbox.fc_a", 4, config.d_coord, &mut rng)?;
            let fc_b_w = store.insert_normal("bbox.fc_b.w", &[4, config.d_coord], 0.5, &mut rng)?;
            let fc_mid = Linear::new(&mut store, "bbox.fc_mid", config.d_coord, config.d_fc, &mut rng)?;
            let fc_out = Linear::new(&mut store, "bbox.fc_out", config.d_fc, config.d_coord_out, &mut rng)?;
            let hidden = Linear::new(&mut store, "vsrc.hidden", d + config.d_coord_out, config.vsrc_hidden, &mut rng)?;
            let out = Linear::new(&mut store, "vsrc.out", config.vsrc_hidden, SpatialRelation::COUNT, &mut rng)?;
            (
                Some(BBoxEncoder {
                    fc_a,
                    fc_b_w,
                    fc_mid,
                    fc_out,
                }),
                Some(VsrcHead { hidden, out }),
            )
        } else {
            (None, None)
        };
        let relation_tokens = SpatialRelation::ALL
            .iter()
            .map(|&r| vocab.encode_strict(&r.phrase_tokens()))
            .collect::<Result<_>>()?;
        Ok(VsdModel {
            meta: ModelMeta { config, heads, vocab },
            params: store,
            embeddings,
            vision,
            encoder,
            decoder,
            bbox,
            vsrc,
            relation_tokens,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.meta.vocab
    }

    pub fn heads(&self) -> Heads {
        self.meta.heads
    }

    pub fn config_hash(&self) -> String {
        self.meta.hash()
    }

    pub fn relation_token_ids(&self, r: SpatialRelation) -> &[usize] {
        &self.relation_tokens[r.index()]
    }

    /// `E^V = F^V W + b`, one row per region.
    pub fn align_vision(&self, tape: &mut Tape<'_>, raw: &RegionFeatures) -> Result<Var> {
        let c = self.config();
        if raw.dim() != c.d_v || raw.n_regions() != c.n_regions {
            return Err(VsdError::shape(
                "align_vision",
                raw.features.shape(),
                &[c.n_regions, c.d_v],
            ));
        }
        let x = tape.constant(raw.features.clone());
        self.vision.forward(tape, x)
    }

    /// Token ids of the text input and the index of the [MASK] token.
    pub fn text_ids(
        &self,
        o1: &ObjectRef,
        o2: &ObjectRef,
        variant: EmbeddingVariant,
        relation: Option<SpatialRelation>,
    ) -> Result<(Vec<usize>, Option<usize>)> {
        let mut ids = Vec::with_capacity(o1.tag_tokens.len() + o2.tag_tokens.len() + 6);
        ids.extend(&o1.tag_tokens);
        ids.push(SEP);
        ids.extend(&o2.tag_tokens);
        match (variant, relation) {
            (EmbeddingVariant::Base, None) => Ok((ids, None)),
            (EmbeddingVariant::Masked, None) => {
                ids.push(SEP);
                ids.push(MASK);
                let at = ids.len() - 1;
                Ok((ids, Some(at)))
            }
            (EmbeddingVariant::WithRelation, Some(r)) => {
                ids.push(SEP);
                ids.extend(self.relation_token_ids(r));
                Ok((ids, None))
            }
            (EmbeddingVariant::WithRelation, None) => Err(VsdError::InvalidInput(
                "with_relation embedding requires a relation".into(),
            )),
            (v, Some(r)) => Err(VsdError::InvalidInput(format!(
                "relation `{r}` supplied to the {v:?} embedding"
            ))),
        }
    }

    /// Text embeddings `[L, d_model]` and the recorded [MASK] index.
    pub fn embed_pair(
        &self,
        tape: &mut Tape<'_>,
        o1: &ObjectRef,
        o2: &ObjectRef,
        variant: EmbeddingVariant,
        relation: Option<SpatialRelation>,
    ) -> Result<(Var, Option<usize>)> {
        let (ids, mask) = self.text_ids(o1, o2, variant, relation)?;
        Ok((self.embeddings.embed(tape, &ids)?, mask))
    }

    /// Transformer over `[E^T, E^V]`; text rows come first.
    pub fn encode_joint(
        &self,
        tape: &mut Tape<'_>,
        text: Var,
        vision: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<EncoderOutput> {
        let d = self.config().transformer.d_model;
        let (wt, wv) = (tape.shape(text)[1], tape.shape(vision)[1]);
        if wt != d || wv != d {
            return Err(VsdError::shape("encode_joint", tape.shape(text), tape.shape(vision)));
        }
        let joint = tape.concat_rows(&[text, vision])?;
        let joint = dropout.apply(tape, joint)?;
        self.encoder.forward(tape, joint, dropout)
    }

    /// `FC_out(FC_mid(FC_a(c1) + FC_b(c2)))`, a `[1, d_coord_out]` row.
    pub fn encode_bboxes(&self, tape: &mut Tape<'_>, c1: &BBox, c2: &BBox) -> Result<Var> {
        let s1 = self.bbox_stage1(tape, c1.to_array(), c2.to_array(), true)?;
        let b = self.bbox_ref()?;
        let h = b.fc_mid.forward(tape, s1)?;
        b.fc_out.forward(tape, h)
    }

    /// First stage `A c1 + B c2 (+ b)`; exposed for the additivity property.
    pub fn bbox_stage1(&self, tape: &mut Tape<'_>, c1: [f64; 4], c2: [f64; 4], with_bias: bool) -> Result<Var> {
        let b = self.bbox_ref()?;
        for c in [c1, c2] {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(VsdError::InvalidInput(format!("coordinates {c:?} outside [0, 1]")));
            }
        }
        let x1 = tape.constant(Tensor::matrix(1, 4, c1.to_vec())?);
        let x2 = tape.constant(Tensor::matrix(1, 4, c2.to_vec())?);
        let wa = tape.param(b.fc_a.w);
        let wb = tape.param(b.fc_b_w);
        let a = tape.matmul(x1, wa)?;
        let bb = tape.matmul(x2, wb)?;
        let s = tape.add(a, bb)?;
        if with_bias {
            let bias = tape.param(b.fc_a.b);
            tape.add_row(s, bias)
        } else {
            Ok(s)
        }
    }

    fn bbox_ref(&self) -> Result<&BBoxEncoder> {
        self.bbox
            .as_ref()
            .ok_or_else(|| VsdError::InvalidInput("model has no VSRC head".into()))
    }

    /// MLP over `[h_mask, h_coord]`; returns `[1, 9]` unnormalized scores.
    pub fn classify_relation(&self, tape: &mut Tape<'_>, h_mask: Var, h_coord: Var) -> Result<Var> {
        let head = self
            .vsrc
            .as_ref()
            .ok_or_else(|| VsdError::InvalidInput("model has no VSRC head".into()))?;
        let c = self.config();
        if tape.shape(h_mask) != [1, c.transformer.d_model] || tape.shape(h_coord) != [1, c.d_coord_out] {
            return Err(VsdError::shape("classify_relation", tape.shape(h_mask), tape.shape(h_coord)));
        }
        let x = tape.concat_cols(&[h_mask, h_coord])?;
        let h = head.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        head.out.forward(tape, h)
    }

    /// Runs the encoder for the given text variant.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        ex: &Example,
        variant: EmbeddingVariant,
        relation: Option<SpatialRelation>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Encoded> {
        let (text, mask_index) = self.embed_pair(tape, &ex.o1, &ex.o2, variant, relation)?;
        let text_len = tape.shape(text)[0];
        let vision = self.align_vision(tape, &ex.features)?;
        let output = self.encode_joint(tape, text, vision, dropout)?;
        Ok(Encoded {
            output,
            mask_index,
            text_len,
        })
    }

    /// VSRC scores from a masked encoding.
    pub fn vsrc_scores(&self, tape: &mut Tape<'_>, ex: &Example, enc: &Encoded) -> Result<Var> {
        let at = enc
            .mask_index
            .ok_or_else(|| VsdError::InvalidInput("VSRC requires the masked embedding".into()))?;
        let h_mask = tape.slice_rows(enc.output.states, at, 1)?;
        let h_coord = self.encode_bboxes(tape, &ex.o1.bbox, &ex.o2.bbox)?;
        self.classify_relation(tape, h_mask, h_coord)
    }

    /// Decoder logits `[prefix_len, vocab]` over an existing encoding.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<'_>,
        prefix: &[usize],
        memory: &EncoderOutput,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| VsdError::InvalidInput("model has no VSD decoder".into()))?;
        dec.forward(tape, &self.embeddings, prefix, memory, dropout)
    }

    /// Teacher-forced forward pass.
    ///
    /// * base: relation must be absent; base embedding.
    /// * pipeline: relation required; relation-augmented embedding.
    /// * end2end without relation: masked embedding, VSD logits and VSRC
    ///   scores from one encoder pass; with relation: the relation fills the
    ///   [MASK] slot and only VSD logits are produced.
    pub fn forward_vsd(
        &self,
        tape: &mut Tape<'_>,
        ex: &Example,
        mode: ModelMode,
        relation_input: Option<SpatialRelation>,
        gold_prefix: &[usize],
        dropout: &mut Dropout<'_>,
    ) -> Result<ForwardOutput> {
        let variant = match (mode, relation_input) {
            (ModelMode::Base, None) => EmbeddingVariant::Base,
            (ModelMode::Base, Some(_)) => {
                return Err(VsdError::InvalidInput("base mode takes no relation input".into()))
            }
            (ModelMode::Pipeline, None) => {
                return Err(VsdError::InvalidInput("pipeline mode requires a relation input".into()))
            }
            (ModelMode::Pipeline, Some(_)) | (ModelMode::End2end, Some(_)) => EmbeddingVariant::WithRelation,
            (ModelMode::End2end, None) => EmbeddingVariant::Masked,
        };
        let enc = self.encode(tape, ex, variant, relation_input, dropout)?;
        let vsrc_scores = if variant == EmbeddingVariant::Masked {
            Some(self.vsrc_scores(tape, ex, &enc)?)
        } else {
            None
        };
        let logits = if self.decoder.is_some() {
            Some(self.decode_logits(tape, gold_prefix, &enc.output, dropout)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            logits,
            vsrc_scores,
            encoder: enc.output,
            mask_index: enc.mask_index,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.meta)?;
        write_checkpoint(path, &self.config_hash(), &json, &self.params)
    }

    /// Loads a checkpoint; with `expected_hash` set, a different
    /// configuration is rejected.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if let Some(h) = expected_hash {
            if h != ck.config_hash {
                return Err(VsdError::HashMismatch {
                    expected: h.to_string(),
                    found: ck.config_hash,
                });
            }
        }
        let meta: ModelMeta = serde_json::from_str(&ck.config_json)
            .map_err(|e| VsdError::Checkpoint(format!("model metadata: {e}")))?;
        if meta.hash() != ck.config_hash {
            return Err(VsdError::HashMismatch {
                expected: meta.hash(),
                found: ck.config_hash,
            });
        }
        let mut model = VsdModel::new(meta.config, meta.heads, meta.vocab)?;
        model.params.load_values(&ck.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataspace::{build_vocabulary, generate_corpus, DataConfig, FeatureConfig};
    use rand::Rng;

    pub(crate) fn tiny_setup(heads: Heads) -> (VsdModel, Vec<Example>) {
        let data = generate_corpus(&DataConfig {
            n_instances: 20,
            seed: 1,
            features: FeatureConfig {
                grid: 2,
                noun_dim: 2,
                attr_dim: 0,
            },
            ..DataConfig::default()
        })
        .unwrap();
        let vocab = build_vocabulary(&data);
        let model = VsdModel::new(ModelConfig::tiny(), heads, vocab.clone()).unwrap();
        let ex = Example::from_instances(&data, &vocab).unwrap();
        (model, ex)
    }

    fn obj(tags: &[usize]) -> ObjectRef {
        ObjectRef::new(tags.to_vec(), BBox::new(0.1, 0.1, 0.3, 0.3).unwrap()).unwrap()
    }

    #[test]
    fn align_vision_is_affine() {
        let (m, ex) = tiny_setup(Heads::GENERATOR);
        let mut tape = Tape::inference(&m.params);
        let zero = RegionFeatures::new(Tensor::zeros(&[4, 10])).unwrap();
        let z = m.align_vision(&mut tape, &zero).unwrap();
        let bias = m.params.value(m.vision.b).clone();
        for r in 0..4 {
            assert_eq!(tape.value(z).row(r), bias.data());
        }
        let f = &ex[0].features;
        let doubled = RegionFeatures::new(
            Tensor::matrix(4, 10, f.features.data().iter().map(|v| 2.0 * v).collect()).unwrap(),
        )
        .unwrap();
        let a = m.align_vision(&mut tape, f).unwrap();
        let b = m.align_vision(&mut tape, &doubled).unwrap();
        let (ta, tb) = (tape.value(a), tape.value(b));
        assert_eq!(ta.shape(), &[4, 8]);
        for i in 0..ta.len() {
            let c = i % 8;
            let lhs = tb.data()[i] - bias.data()[c];
            let rhs = 2.0 * (ta.data()[i] - bias.data()[c]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
        let wrong = RegionFeatures::new(Tensor::zeros(&[4, 9])).unwrap();
        assert!(m.align_vision(&mut tape, &wrong).is_err());
    }

    #[test]
    fn embedding_variants_have_expected_layout() {
        let (m, _) = tiny_setup(Heads::JOINT);
        let (man, car) = (obj(&[10]), obj(&[11]));
        let (ids, mask) = m.text_ids(&man, &car, EmbeddingVariant::Base, None).unwrap();
        assert_eq!(ids, vec![10, SEP, 11]);
        assert_eq!(mask, None);
        let (ids, mask) = m.text_ids(&man, &car, EmbeddingVariant::Masked, None).unwrap();
        assert_eq!(ids.iter().filter(|&&t| t == MASK).count(), 1);
        assert_eq!(mask, Some(4));
        assert_eq!(ids[4], MASK);
        let (ids, _) = m
            .text_ids(&man, &car, EmbeddingVariant::WithRelation, Some(SpatialRelation::ToTheLeftOf))
            .unwrap();
        let words = m.vocab().decode(&ids[4..]).unwrap();
        assert_eq!(words, vec!["to", "the", "left", "of"]);
        assert!(m.text_ids(&man, &car, EmbeddingVariant::Base, Some(SpatialRelation::On)).is_err());
        assert!(m.text_ids(&man, &car, EmbeddingVariant::Masked, Some(SpatialRelation::On)).is_err());
        assert!(m.text_ids(&man, &car, EmbeddingVariant::WithRelation, None).is_err());
    }

    #[test]
    fn joint_encoding_length_and_mask_position() {
        let (m, ex) = tiny_setup(Heads::JOINT);
        let mut tape = Tape::inference(&m.params);
        let e = &ex[0];
        let enc = m.encode(&mut tape, e, EmbeddingVariant::Masked, None, &mut Dropout::off()).unwrap();
        let text_len = e.o1.tag_tokens.len() + e.o2.tag_tokens.len() + 3;
        assert_eq!(enc.text_len, text_len);
        assert_eq!(enc.output.len, text_len + 4);
        assert_eq!(tape.shape(enc.output.states), &[text_len + 4, 8]);
        assert_eq!(enc.mask_index, Some(text_len - 1));
    }

    #[test]
    fn zero_layer_mask_state_depends_only_on_mask_embedding() {
        let mut cfg = ModelConfig::tiny();
        cfg.transformer.n_encoder_layers = 0;
        let (base, ex) = tiny_setup(Heads::JOINT);
        let m = VsdModel::new(cfg, Heads::JOINT, base.vocab().clone()).unwrap();
        let mut tape = Tape::inference(&m.params);
        let mut e2 = ex[0].clone();
        e2.o1.tag_tokens = vec![ex[1].o1.tag_tokens[0], 7];
        let a = m.encode(&mut tape, &ex[0], EmbeddingVariant::Masked, None, &mut Dropout::off()).unwrap();
        let b = m.encode(&mut tape, &e2, EmbeddingVariant::Masked, None, &mut Dropout::off()).unwrap();
        let ha = tape.value(a.output.states).row(a.mask_index.unwrap()).to_vec();
        let hb = tape.value(b.output.states).row(b.mask_index.unwrap()).to_vec();
        // positions differ by one, so compare against the embedding itself
        let table = m.params.value(m.embeddings.tokens).row(MASK).to_vec();
        let pos = m.params.value(m.embeddings.positions.unwrap());
        for (k, t) in table.iter().enumerate() {
            assert!((ha[k] - t - pos.row(a.mask_index.unwrap())[k]).abs() < 1e-12);
            assert!((hb[k] - t - pos.row(b.mask_index.unwrap())[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn bbox_stage_one_is_additive_and_order_sensitive() {
        let (m, _) = tiny_setup(Heads::JOINT);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::inference(&m.params);
        for _ in 0..20 {
            let c1: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let c2: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let full = m.bbox_stage1(&mut tape, c1, c2, true).unwrap();
            let left = m.bbox_stage1(&mut tape, c1, [0.0; 4], true).unwrap();
            let right = m.bbox_stage1(&mut tape, [0.0; 4], c2, true).unwrap();
            let bias = m.params.value(m.bbox.as_ref().unwrap().fc_a.b);
            for k in 0..4 {
                let lhs = tape.value(full).data()[k];
                let rhs = tape.value(left).data()[k] + tape.value(right).data()[k] - bias.data()[k];
                assert!((lhs - rhs).abs() < 1e-12);
            }
            let b1 = BBox::new(0.1, 0.2, 0.4, 0.5).unwrap();
            let b2 = BBox::new(0.5, 0.1, 0.9, 0.3).unwrap();
            let fwd = m.encode_bboxes(&mut tape, &b1, &b2).unwrap();
            let bwd = m.encode_bboxes(&mut tape, &b2, &b1).unwrap();
            assert_eq!(tape.shape(fwd), &[1, 5]);
            assert!(tape.value(fwd).max_abs_diff(tape.value(bwd)) > 1e-6);
        }
        assert!(m.bbox_stage1(&mut tape, [1.5, 0.0, 0.0, 0.0], [0.0; 4], true).is_err());
    }

    #[test]
    fn vsrc_scores_normalize_and_argmax_is_shift_invariant() {
        let (m, ex) = tiny_setup(Heads::JOINT);
        let mut tape = Tape::inference(&m.params);
        for e in &ex {
            let enc = m.encode(&mut tape, e, EmbeddingVariant::Masked, None, &mut Dropout::off()).unwrap();
            let s = m.vsrc_scores(&mut tape, e, &enc).unwrap();
            assert_eq!(tape.shape(s), &[1, 9]);
            let p = tape.softmax(s);
            assert!((tape.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let raw = tape.value(s).data().to_vec();
            let shifted: Vec<f64> = raw.iter().map(|v| v + 3.7).collect();
            assert_eq!(Tensor::argmax(&raw), Tensor::argmax(&shifted));
        }
    }

    #[test]
    fn forward_modes_validate_relation_input() {
        let (m, ex) = tiny_setup(Heads::JOINT);
        let mut tape = Tape::inference(&m.params);
        let e = &ex[0];
        let prefix = [1usize, 6, 7];
        let r = Some(SpatialRelation::On);
        let mut d = Dropout::off();
        assert!(m.forward_vsd(&mut tape, e, ModelMode::Base, r, &prefix, &mut d).is_err());
        assert!(m.forward_vsd(&mut tape, e, ModelMode::Pipeline, None, &prefix, &mut d).is_err());
        let out = m.forward_vsd(&mut tape, e, ModelMode::End2end, None, &prefix, &mut d).unwrap();
        assert!(out.logits.is_some() && out.vsrc_scores.is_some());
        assert_eq!(tape.shape(out.logits.unwrap()), &[3, m.vocab().len()]);
        let out = m.forward_vsd(&mut tape, e, ModelMode::End2end, r, &prefix, &mut d).unwrap();
        assert!(out.vsrc_scores.is_none());
    }

    #[test]
    fn end2end_encoding_is_identical_with_or_without_vsrc() {
        let (m, ex) = tiny_setup(Heads::JOINT);
        let e = &ex[2];
        let mut t1 = Tape::inference(&m.params);
        let a = m.encode(&mut t1, e, EmbeddingVariant::Masked, None, &mut Dropout::off()).unwrap();
        let _ = m.vsrc_scores(&mut t1, e, &a).unwrap();
        let mut t2 = Tape::inference(&m.params);
        let b = m.encode(&mut t2, e, EmbeddingVariant::Masked, None, &mut Dropout::off()).unwrap();
        assert_eq!(t1.value(a.output.states), t2.value(b.output.states));
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let (m, _) = tiny_setup(Heads::JOINT);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = VsdModel::load(&p, Some(&m.config_hash())).unwrap();
        assert_eq!(back.config_hash(), m.config_hash());
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(matches!(
            VsdModel::load(&p, Some("deadbeef")),
            Err(VsdError::HashMismatch { .. })
        ));
    }

    #[test]
    fn presets_are_valid() {
        for c in [ModelConfig::desk(), ModelConfig::small(), ModelConfig::tiny(), ModelConfig::desk().with_full_bbox_widths()] {
            c.validate().unwrap();
        }
    }
}
