use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataspace::{Split, SpatialRelation, Vocabulary};
use crate::decoding::{
    argmax_relation, base_infer, classify, decode_one_round, decode_two_round, infer_with_relation, pipeline_infer,
    DecodeConfig, InferenceResult,
};
use crate::error::{Result, VsdError};
use crate::metrics::{bleu4, mean_std, normalize_tokens, vsrc_accuracy, EvalRecord, EvalReport, Tokens};
use crate::model::{Example, Heads, ModelMeta, VsdModel};
use crate::numerics::ParamStore;
use crate::training::{train, EpochSummary, LossRecord, TrainReport, TrainTask};

use super::config::{Cell, ExperimentConfig};
use super::data::{load_dataset, Dataset};

/// Trained models of one seed.
#[derive(Clone, Debug)]
pub enum Models {
    Single(VsdModel),
    Pipeline { classifier: VsdModel, generator: VsdModel },
}

impl Models {
    pub fn generator(&self) -> &VsdModel {
        match self {
            Models::Single(m) => m,
            Models::Pipeline { generator, .. } => generator,
        }
    }
}

/// Runs the inference path of `cell` on one example.
pub fn infer(cell: Cell, models: &Models, ex: &Example, dc: &DecodeConfig) -> Result<InferenceResult> {
    match (cell, models) {
        (Cell::Base, Models::Single(m)) => base_infer(m, ex, dc),
        (Cell::Pipeline, Models::Pipeline { classifier, generator }) => pipeline_infer(classifier, generator, ex, dc),
        (Cell::PipelineGolden, Models::Pipeline { generator, .. }) => infer_with_relation(generator, ex, ex.relation, dc),
        (Cell::OneRound, Models::Single(m)) => decode_one_round(m, ex, dc),
        (Cell::TwoRound, Models::Single(m)) => decode_two_round(m, ex, dc),
        (Cell::End2endGolden, Models::Single(m)) => infer_with_relation(m, ex, ex.relation, dc),
        _ => Err(VsdError::InvalidInput(format!("{} cannot run on these models", cell.label()))),
    }
}

fn words(model: &VsdModel, tokens: &[usize]) -> Result<Tokens> {
    Ok(normalize_tokens(&model.vocab().decode(tokens)?))
}

/// Decodes `examples` and pairs each output with its reference. The
/// predicted relation is kept only for cells that predict one.
pub fn eval_records(cell: Cell, models: &Models, examples: &[Example], dc: &DecodeConfig) -> Result<Vec<EvalRecord>> {
    let g = models.generator();
    examples
        .iter()
        .map(|ex| {
            let r = infer(cell, models, ex, dc)?;
            Ok(EvalRecord {
                id: ex.id.clone(),
                hypothesis: words(g, &r.tokens)?,
                references: vec![words(g, &ex.target)?],
                gold: ex.relation,
                predicted: if cell.predicts_relation() { r.relation } else { None },
            })
        })
        .collect()
}

pub fn evaluate_models(cell: Cell, models: &Models, examples: &[Example], dc: &DecodeConfig) -> Result<EvalReport> {
    EvalReport::compute(&eval_records(cell, models, examples, dc)?)
}

fn classifier_accuracy(model: &VsdModel, examples: &[Example]) -> Result<f64> {
    let mut pred = Vec::with_capacity(examples.len());
    for ex in examples {
        pred.push(argmax_relation(&classify(model, ex)?.1)?);
    }
    let gold: Vec<SpatialRelation> = examples.iter().map(|e| e.relation).collect();
    vsrc_accuracy(&pred, &gold)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step {
        component: String,
        #[serde(flatten)]
        record: LossRecord,
    },
    Epoch {
        component: String,
        #[serde(flatten)]
        summary: EpochSummary,
        dev_score: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub component: String,
    /// Dev BLEU-4 (×100) for generators, dev accuracy (%) for classifiers.
    pub metric: String,
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub models: Models,
    pub selections: Vec<Selection>,
    pub log: Vec<LogLine>,
}

struct Trained {
    model: VsdModel,
    report: TrainReport,
    selection: Selection,
    dev_scores: Vec<(usize, f64)>,
}

/// Trains one component and keeps the parameters with the best dev score.
#[allow(clippy::too_many_arguments)]
fn train_selected<S>(
    cfg: &ExperimentConfig,
    seed: u64,
    component: &str,
    metric: &str,
    heads: Heads,
    vocab: &Vocabulary,
    train_ex: &[Example],
    task: &TrainTask,
    mut score: S,
) -> Result<Trained>
where
    S: FnMut(&VsdModel) -> Result<f64>,
{
    let mut model = VsdModel::new(cfg.model_config(seed), heads, vocab.clone())?;
    let tc = cfg.train_config(seed);
    let sel = &cfg.selection;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut dev_scores = Vec::new();
    let report = train(&mut model, train_ex, task, &tc, |s, m| {
        let last = s.epoch + 1 == tc.max_epochs;
        if (s.epoch + 1) % sel.eval_every != 0 && !last {
            return Ok(true);
        }
        let v = score(m)?;
        dev_scores.push((s.epoch, v));
        if best.as_ref().is_none_or(|b| v > b.1) {
            best = Some((s.epoch, v, m.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        Ok(sel.patience.is_none_or(|p| since_best < p))
    })?;
    let epochs_run = report.epochs.len();
    let (best_epoch, best_score) = match best {
        Some((e, v, params)) => {
            model.params.load_values(&params)?;
            (e, v)
        }
        None => {
            let v = score(&model)?;
            dev_scores.push((epochs_run.saturating_sub(1), v));
            (epochs_run.saturating_sub(1), v)
        }
    };
    Ok(Trained {
        model,
        report,
        selection: Selection {
            component: component.into(),
            metric: metric.into(),
            best_epoch,
            best_score,
            epochs_run,
        },
        dev_scores,
    })
}

fn push_log(log: &mut Vec<LogLine>, component: &str, t: &Trained) {
    for r in &t.report.steps {
        log.push(LogLine::Step {
            component: component.into(),
            record: r.clone(),
        });
    }
    for s in &t.report.epochs {
        log.push(LogLine::Epoch {
            component: component.into(),
            summary: s.clone(),
            dev_score: t.dev_scores.iter().find(|(e, _)| *e == s.epoch).map(|x| x.1),
        });
    }
}

fn dev_subset<'a>(cfg: &ExperimentConfig, dev: &'a [Example]) -> &'a [Example] {
    match cfg.selection.dev_limit {
        Some(n) if n < dev.len() => &dev[..n],
        _ => dev,
    }
}

/// Trains every component of `cfg`'s mode for one seed, selecting each by
/// its dev score.
pub fn train_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let cell = cfg.cell()?;
    let vocab = data.vocabulary();
    let train_ex = Example::from_instances(&data.train, &vocab)?;
    let dev_all = Example::from_instances(&data.dev, &vocab)?;
    let dev = dev_subset(cfg, &dev_all);
    let dc = cfg.selection_decode_config();
    let bleu_of = |cell: Cell, models: &Models| -> Result<f64> {
        let recs = eval_records(cell, models, dev, &dc)?;
        let hyps: Vec<Tokens> = recs.iter().map(|r| r.hypothesis.clone()).collect();
        let refs: Vec<Vec<Tokens>> = recs.into_iter().map(|r| r.references).collect();
        Ok(100.0 * bleu4(&hyps, &refs)?)
    };
    let mut log = Vec::new();
    let mut selections = Vec::new();
    let models = match cell {
        Cell::Base | Cell::OneRound | Cell::TwoRound | Cell::End2endGolden => {
            let (heads, task, component) = if cell == Cell::Base {
                (Heads::GENERATOR, TrainTask::Base, "vsd")
            } else {
                (Heads::JOINT, TrainTask::End2end, "joint")
            };
            let t = train_selected(cfg, seed, component, "dev_bleu4", heads, &vocab, &train_ex, &task, |m| {
                bleu_of(cell, &Models::Single(m.clone()))
            })?;
            push_log(&mut log, component, &t);
            selections.push(t.selection);
            Models::Single(t.model)
        }
        Cell::Pipeline | Cell::PipelineGolden => {
            let c = train_selected(
                cfg,
                seed,
                "vsrc",
                "dev_accuracy",
                Heads::CLASSIFIER,
                &vocab,
                &train_ex,
                &TrainTask::PipelineClassifier,
                |m| classifier_accuracy(m, dev),
            )?;
            push_log(&mut log, "vsrc", &c);
            selections.push(c.selection.clone());
            let classifier = c.model;
            let relations = if cfg.train.pipeline_predicted_relations {
                let mut rs = Vec::with_capacity(train_ex.len());
                for ex in &train_ex {
                    rs.push(argmax_relation(&classify(&classifier, ex)?.1)?);
                }
                Some(rs)
            } else {
                None
            };
            let task = TrainTask::PipelineGenerator { relations };
            let g = train_selected(cfg, seed, "vsd", "dev_bleu4", Heads::GENERATOR, &vocab, &train_ex, &task, |m| {
                bleu_of(
                    cell,
                    &Models::Pipeline {
                        classifier: classifier.clone(),
                        generator: m.clone(),
                    },
                )
            })?;
            push_log(&mut log, "vsd", &g);
            selections.push(g.selection);
            Models::Pipeline {
                classifier,
                generator: g.model,
            }
        }
    };
    Ok(SeedRun {
        seed,
        models,
        selections,
        log,
    })
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const CLASSIFIER_FILE: &str = "vsrc.ckpt";
pub const GENERATOR_FILE: &str = "vsd.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SELECTION_FILE: &str = "selection.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| VsdError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| VsdError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Checkpoint paths of a seed.
pub fn checkpoint_paths(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PathBuf>> {
    let d = cfg.seed_dir(seed);
    Ok(match cfg.cell()? {
        Cell::Pipeline | Cell::PipelineGolden => vec![d.join(CLASSIFIER_FILE), d.join(GENERATOR_FILE)],
        _ => vec![d.join(MODEL_FILE)],
    })
}

pub fn save_seed_run(cfg: &ExperimentConfig, run: &SeedRun) -> Result<()> {
    let dir = cfg.seed_dir(run.seed);
    fs::create_dir_all(&dir).map_err(|e| VsdError::io(&dir, e))?;
    let paths = checkpoint_paths(cfg, run.seed)?;
    match &run.models {
        Models::Single(m) => m.save(&paths[0])?,
        Models::Pipeline { classifier, generator } => {
            classifier.save(&paths[0])?;
            generator.save(&paths[1])?;
        }
    }
    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut f = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| VsdError::io(&log_path, e))?);
    for line in &run.log {
        serde_json::to_writer(&mut f, line)?;
        f.write_all(b"\n").map_err(|e| VsdError::io(&log_path, e))?;
    }
    f.flush().map_err(|e| VsdError::io(&log_path, e))?;
    write_json(&dir.join(SELECTION_FILE), &run.selections)
}

fn expected_hash(cfg: &ExperimentConfig, seed: u64, heads: Heads, vocab: &Vocabulary) -> String {
    ModelMeta {
        config: cfg.model_config(seed),
        heads,
        vocab: vocab.clone(),
    }
    .hash()
}

/// Loads a seed's checkpoints, rejecting any trained under a different
/// model configuration or vocabulary.
pub fn load_models(cfg: &ExperimentConfig, seed: u64, vocab: &Vocabulary) -> Result<Models> {
    let paths = checkpoint_paths(cfg, seed)?;
    Ok(match cfg.cell()? {
        Cell::Pipeline | Cell::PipelineGolden => Models::Pipeline {
            classifier: VsdModel::load(&paths[0], Some(&expected_hash(cfg, seed, Heads::CLASSIFIER, vocab)))?,
            generator: VsdModel::load(&paths[1], Some(&expected_hash(cfg, seed, Heads::GENERATOR, vocab)))?,
        },
        Cell::Base => Models::Single(VsdModel::load(&paths[0], Some(&expected_hash(cfg, seed, Heads::GENERATOR, vocab)))?),
        _ => Models::Single(VsdModel::load(&paths[0], Some(&expected_hash(cfg, seed, Heads::JOINT, vocab)))?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub selections: Vec<Vec<Selection>>,
    /// Mean and std of each component's selected dev score.
    pub dev_scores: Vec<(String, MeanStd)>,
}

fn summarize_training(cfg: &ExperimentConfig, runs: &[Vec<Selection>]) -> TrainSummary {
    let mut comps: Vec<String> = Vec::new();
    for s in runs.iter().flatten() {
        if !comps.contains(&s.component) {
            comps.push(s.component.clone());
        }
    }
    let dev_scores = comps
        .into_iter()
        .map(|c| {
            let v: Vec<f64> = runs.iter().flatten().filter(|s| s.component == c).map(|s| s.best_score).collect();
            (c, MeanStd::of(&v))
        })
        .collect();
    TrainSummary {
        name: cfg.name.clone(),
        seeds: cfg.seeds.clone(),
        selections: runs.to_vec(),
        dev_scores,
    }
}

/// Trains all seeds, writing checkpoints, logs and `train_summary.json`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_dir(), Some(&cfg.data))?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = train_seed(cfg, &data, seed)?;
        save_seed_run(cfg, &run)?;
        runs.push(run.selections);
    }
    let summary = summarize_training(cfg, &runs);
    write_json(&cfg.experiment_dir().join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub bleu4: MeanStd,
    pub rouge_l: MeanStd,
    pub meteor_lite: MeanStd,
    pub cider: MeanStd,
    pub vsrc_accuracy: Option<MeanStd>,
    /// Means over seeds whose bucket is non-empty.
    pub positive_bleu4: Option<MeanStd>,
    pub negative_bleu4: Option<MeanStd>,
}

impl ScoreSummary {
    pub fn of(reports: &[EvalReport]) -> Self {
        let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<MeanStd> {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| MeanStd::of(&v))
        };
        let nan = MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
        ScoreSummary {
            bleu4: col(&|r| Some(r.scores.bleu4)).unwrap_or(nan),
            rouge_l: col(&|r| Some(r.scores.rouge_l)).unwrap_or(nan),
            meteor_lite: col(&|r| Some(r.scores.meteor_lite)).unwrap_or(nan),
            cider: col(&|r| Some(r.scores.cider)).unwrap_or(nan),
            vsrc_accuracy: col(&|r| r.vsrc_accuracy),
            positive_bleu4: col(&|r| r.pos_neg.as_ref()?.positive.scores.as_ref().map(|s| s.bleu4)),
            negative_bleu4: col(&|r| r.pos_neg.as_ref()?.negative.scores.as_ref().map(|s| s.bleu4)),
        }
    }
}

/// Test-split results of one experiment over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub cell: Cell,
    pub label: String,
    pub data_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalReport>,
    pub summary: ScoreSummary,
}

impl ExperimentReport {
    pub fn new(cfg: &ExperimentConfig, data_hash: &str, per_seed: Vec<EvalReport>) -> Result<Self> {
        let cell = cfg.cell()?;
        Ok(ExperimentReport {
            name: cfg.name.clone(),
            cell,
            label: cell.label().into(),
            data_hash: data_hash.into(),
            seeds: cfg.seeds.clone(),
            summary: ScoreSummary::of(&per_seed),
            per_seed,
        })
    }

    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let f = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        let mut out = format!("{} [{}] seeds {:?}\n", self.name, self.label, self.seeds);
        out += &format!("BLEU-4       {}\n", f(&s.bleu4));
        out += &format!("ROUGE-L      {}\n", f(&s.rouge_l));
        out += &format!("METEOR-lite  {}\n", f(&s.meteor_lite));
        out += &format!("CIDEr        {}\n", f(&s.cider));
        if let Some(a) = &s.vsrc_accuracy {
            out += &format!("VSRC acc     {}\n", f(a));
        }
        if let Some(p) = &s.positive_bleu4 {
            out += &format!("positive     BLEU-4 {}\n", f(p));
        }
        if let Some(n) = &s.negative_bleu4 {
            out += &format!("negative     BLEU-4 {}\n", f(n));
        }
        for (seed, r) in self.seeds.iter().zip(&self.per_seed) {
            out += &format!("\n-- seed {seed}\n{}", r.to_text());
        }
        out
    }
}

/// Evaluates every seed's checkpoints on the test split and writes
/// `report.json` and `report.txt`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_dir(), Some(&cfg.data))?;
    let vocab = data.vocabulary();
    let test = Example::from_instances(&data.test, &vocab)?;
    let cell = cfg.cell()?;
    let dc = cfg.decode_config();
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let models = load_models(cfg, seed, &vocab)?;
        per_seed.push(evaluate_models(cell, &models, &test, &dc)?);
    }
    let report = ExperimentReport::new(cfg, &data.manifest.data_hash, per_seed)?;
    let dir = cfg.experiment_dir();
    fs::create_dir_all(&dir).map_err(|e| VsdError::io(&dir, e))?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    let tp = dir.join(REPORT_TEXT_FILE);
    fs::write(&tp, report.to_text()).map_err(|e| VsdError::io(&tp, e))?;
    Ok(report)
}

pub fn load_report(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let path = cfg.experiment_dir().join(REPORT_FILE);
    if !path.exists() {
        return Err(VsdError::MissingExperiment(format!(
            "`{}` has no report at {} (run train and eval first)",
            cfg.name,
            path.display()
        )));
    }
    read_json(&path)
}

/// One decoded instance as written by `infer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub id: String,
    pub gold_relation: SpatialRelation,
    pub predicted_relation: Option<SpatialRelation>,
    pub description: String,
    pub reference: String,
    pub score: f64,
    pub step_scores: Vec<f64>,
    pub relation_scores: Option<Vec<f64>>,
    pub truncated: bool,
}

/// Decodes up to `limit` instances of `split` with one seed's models.
pub fn cmd_infer(cfg: &ExperimentConfig, seed: u64, split: Split, limit: Option<usize>) -> Result<Vec<InferenceRecord>> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_dir(), Some(&cfg.data))?;
    let vocab = data.vocabulary();
    let instances = data.split(split);
    let n = limit.unwrap_or(instances.len()).min(instances.len());
    let examples = Example::from_instances(&instances[..n], &vocab)?;
    let models = load_models(cfg, seed, &vocab)?;
    let cell = cfg.cell()?;
    let dc = cfg.decode_config();
    let g = models.generator();
    examples
        .iter()
        .map(|ex| {
            let r = infer(cell, &models, ex, &dc)?;
            Ok(InferenceRecord {
                id: ex.id.clone(),
                gold_relation: ex.relation,
                predicted_relation: if cell.predicts_relation() { r.relation } else { None },
                description: g.vocab().decode(&r.tokens)?.join(" "),
                reference: g.vocab().decode(&ex.target)?.join(" "),
                score: r.score,
                step_scores: r.step_scores,
                relation_scores: r.relation_scores,
                truncated: r.truncated,
            })
        })
        .collect()
}
