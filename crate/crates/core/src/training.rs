//! Losses, AdamW, gradient clipping and the mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataspace::vocab::{BOS, EOS};
use crate::dataspace::SpatialRelation;
use crate::error::{Result, VsdError};
use crate::model::{EmbeddingVariant, Example, ModelMode, VsdModel};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::transformer::Dropout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// λ of the joint loss; end2end only.
    pub mtl_weight: f64,
    /// End2end: also train the decoder on inputs whose [MASK] slot holds the
    /// gold relation, so that second-round decoding sees familiar inputs.
    pub substitution_training: bool,
    /// Pipeline: condition the generator on the trained classifier's
    /// predictions for the training set instead of gold relations.
    pub pipeline_predicted_relations: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            clip_norm: 5.0,
            batch_size: 16,
            max_epochs: 40,
            max_steps: None,
            mtl_weight: 0.5,
            substitution_training: true,
            pipeline_predicted_relations: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.learning_rate, self.clip_norm];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(VsdError::Config("learning_rate and clip_norm must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(VsdError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(VsdError::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mtl_weight) {
            return Err(VsdError::Config(format!("mtl_weight {} outside [0, 1]", self.mtl_weight)));
        }
        Ok(())
    }
}

/// Mean token NLL of `gold` under `logits[len, V]`; `None` marks padding.
pub fn vsd_loss(tape: &mut Tape<'_>, logits: Var, gold: &[Option<usize>]) -> Result<Var> {
    if tape.shape(logits)[0] != gold.len() {
        return Err(VsdError::shape("vsd_loss", tape.shape(logits), &[gold.len()]));
    }
    tape.cross_entropy(logits, gold)
}

/// Cross-entropy of the 9 relation scores against `gold`.
pub fn vsrc_loss(tape: &mut Tape<'_>, scores: Var, gold: usize) -> Result<Var> {
    if gold >= SpatialRelation::COUNT {
        return Err(VsdError::InvalidInput(format!("relation class {gold} out of range")));
    }
    if tape.shape(scores) != [1, SpatialRelation::COUNT] {
        return Err(VsdError::shape("vsrc_loss", tape.shape(scores), &[1, SpatialRelation::COUNT]));
    }
    tape.cross_entropy(scores, &[Some(gold)])
}

/// `(1 - λ) l_vsd + λ l_vsrc`
pub fn joint_loss(tape: &mut Tape<'_>, l_vsd: Var, l_vsrc: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(VsdError::InvalidInput(format!("λ = {lambda} outside [0, 1]")));
    }
    let a = tape.scale(l_vsd, 1.0 - lambda);
    let b = tape.scale(l_vsrc, lambda);
    tape.add(a, b)
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the applied factor `min(1, max_norm / norm)`.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    for (_, p) in store.iter() {
        if let Some(i) = p.grad.first_non_finite() {
            return Err(VsdError::NonFinite {
                index: i,
                context: format!("gradient of `{}`", p.name),
            });
        }
    }
    let norm = store.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= factor);
    }
    Ok(factor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients held in `store`:
    /// `p ← p − lr·wd·p`, then `p ← p − lr·m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(VsdError::InvalidInput(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let p = store.get_mut(id);
            if p.value.shape() != self.m[k].shape() {
                return Err(VsdError::shape("adamw_step", p.value.shape(), self.m[k].shape()));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let (val, grad) = (p.value.data_mut(), p.grad.data());
            for i in 0..val.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                val[i] -= lr * weight_decay * val[i];
                val[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// What is being trained.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainTask {
    /// Generator without relation input.
    Base,
    /// Generator conditioned on relations; `None` uses the gold ones,
    /// otherwise one relation per example.
    PipelineGenerator { relations: Option<Vec<SpatialRelation>> },
    /// Relation classifier on the masked input.
    PipelineClassifier,
    /// Joint generator and classifier sharing the encoder.
    End2end,
}

impl TrainTask {
    pub fn mode(&self) -> ModelMode {
        match self {
            TrainTask::Base => ModelMode::Base,
            TrainTask::PipelineGenerator { .. } | TrainTask::PipelineClassifier => ModelMode::Pipeline,
            TrainTask::End2end => ModelMode::End2end,
        }
    }
}

/// Per-step losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub vsd: Option<f64>,
    pub vsrc: Option<f64>,
    pub grad_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_vsd: Option<f64>,
    pub mean_vsrc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Teacher-forcing input `[BOS] ++ target` and output `target ++ [EOS]`.
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(target);
    let mut gold: Vec<Option<usize>> = target.iter().map(|&t| Some(t)).collect();
    gold.push(Some(EOS));
    (input, gold)
}

struct InstanceLoss {
    total: Var,
    vsd: Option<Var>,
    vsrc: Option<Var>,
}

fn instance_loss(
    tape: &mut Tape<'_>,
    model: &VsdModel,
    ex: &Example,
    task: &TrainTask,
    index: usize,
    config: &TrainConfig,
    dropout: &mut Dropout<'_>,
) -> Result<InstanceLoss> {
    let (input, gold) = teacher_forcing(&ex.target);
    let generate = |tape: &mut Tape<'_>, variant, rel, dropout: &mut Dropout<'_>| -> Result<(Var, crate::model::Encoded)> {
        let enc = model.encode(tape, ex, variant, rel, dropout)?;
        let logits = model.decode_logits(tape, &input, &enc.output, dropout)?;
        Ok((vsd_loss(tape, logits, &gold)?, enc))
    };
    match task {
        TrainTask::Base => {
            let (l, _) = generate(tape, EmbeddingVariant::Base, None, dropout)?;
            Ok(InstanceLoss { total: l, vsd: Some(l), vsrc: None })
        }
        TrainTask::PipelineGenerator { relations } => {
            let rel = match relations {
                Some(rs) => *rs.get(index).ok_or_else(|| {
                    VsdError::InvalidInput(format!("no conditioning relation for example {index}"))
                })?,
                None => ex.relation,
            };
            let (l, _) = generate(tape, EmbeddingVariant::WithRelation, Some(rel), dropout)?;
            Ok(InstanceLoss { total: l, vsd: Some(l), vsrc: None })
        }
        TrainTask::PipelineClassifier => {
            let enc = model.encode(tape, ex, EmbeddingVariant::Masked, None, dropout)?;
            let scores = model.vsrc_scores(tape, ex, &enc)?;
            let l = vsrc_loss(tape, scores, ex.relation.index())?;
            Ok(InstanceLoss { total: l, vsd: None, vsrc: Some(l) })
        }
        TrainTask::End2end => {
            let (l_masked, enc) = generate(tape, EmbeddingVariant::Masked, None, dropout)?;
            let scores = model.vsrc_scores(tape, ex, &enc)?;
            let l_vsrc = vsrc_loss(tape, scores, ex.relation.index())?;
            let l_vsd = if config.substitution_training {
                let (l_gold, _) = generate(tape, EmbeddingVariant::WithRelation, Some(ex.relation), dropout)?;
                let s = tape.add(l_masked, l_gold)?;
                tape.scale(s, 0.5)
            } else {
                l_masked
            };
            let total = joint_loss(tape, l_vsd, l_vsrc, config.mtl_weight)?;
            Ok(InstanceLoss { total, vsd: Some(l_vsd), vsrc: Some(l_vsrc) })
        }
    }
}

/// Checks that `model` carries the heads `task` needs.
pub fn check_task(model: &VsdModel, task: &TrainTask) -> Result<()> {
    let h = model.heads();
    let ok = match task {
        TrainTask::Base | TrainTask::PipelineGenerator { .. } => h.vsd,
        TrainTask::PipelineClassifier => h.vsrc,
        TrainTask::End2end => h.vsd && h.vsrc,
    };
    if ok {
        Ok(())
    } else {
        Err(VsdError::Config(format!("model heads {h:?} cannot train {task:?}")))
    }
}

/// Mini-batch AdamW training. Examples are reshuffled every epoch with the
/// run seed; the last partial batch is kept. `on_epoch` runs after each
/// epoch and may inspect the model, e.g. for dev-set selection; returning
/// `Ok(false)` stops training.
pub fn train<F>(
    model: &mut VsdModel,
    data: &[Example],
    task: &TrainTask,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&EpochSummary, &VsdModel) -> Result<bool>,
{
    config.validate()?;
    check_task(model, task)?;
    if data.is_empty() {
        return Err(VsdError::InvalidInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD0D0);
    let rate = model.config().transformer.dropout_rate;
    let mut opt = AdamW::new(&model.params);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    model.params.zero_grads();

    'epochs: for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_vsd, mut sum_vsrc, mut n_steps) = (0.0, 0.0, 0.0, 0);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let (mut bl, mut bv, mut bc) = (0.0, None::<f64>, None::<f64>);
            for &i in chunk {
                let grads = {
                    let mut tape = Tape::with_params(&model.params);
                    let mut dropout = Dropout::new(rate, &mut drop_rng);
                    let l = instance_loss(&mut tape, model, &data[i], task, i, config, &mut dropout)?;
                    let total = tape.scalar(l.total);
                    if !total.is_finite() {
                        return Err(VsdError::Divergence {
                            epoch,
                            batch,
                            message: format!("loss {total} on example `{}`", data[i].id),
                        });
                    }
                    bl += scale * total;
                    if let Some(v) = l.vsd {
                        *bv.get_or_insert(0.0) += scale * tape.scalar(v);
                    }
                    if let Some(v) = l.vsrc {
                        *bc.get_or_insert(0.0) += scale * tape.scalar(v);
                    }
                    tape.backward(l.total)?
                };
                model.params.accumulate(&grads, scale);
            }
            let grad_scale = clip_gradients(&mut model.params, config.clip_norm).map_err(|e| VsdError::Divergence {
                epoch,
                batch,
                message: e.to_string(),
            })?;
            opt.step(&mut model.params, config.learning_rate, config.weight_decay)?;
            model.params.zero_grads();
            report.steps.push(LossRecord {
                step,
                epoch,
                batch,
                loss: bl,
                vsd: bv,
                vsrc: bc,
                grad_scale,
            });
            step += 1;
            n_steps += 1;
            sum += bl;
            sum_vsd += bv.unwrap_or(0.0);
            sum_vsrc += bc.unwrap_or(0.0);
            let stop = config.max_steps.is_some_and(|m| step >= m);
            if stop || batch + 1 == order.len().div_ceil(config.batch_size) {
                let n = n_steps as f64;
                let summary = EpochSummary {
                    epoch,
                    steps: n_steps,
                    mean_loss: sum / n,
                    mean_vsd: bv.map(|_| sum_vsd / n),
                    mean_vsrc: bc.map(|_| sum_vsrc / n),
                };
                report.epochs.push(summary.clone());
                let go_on = on_epoch(&summary, model)?;
                if stop || !go_on {
                    break 'epochs;
                }
            }
        }
    }
    Ok(report)
}
