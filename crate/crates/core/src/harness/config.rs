use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataspace::DataConfig;
use crate::decoding::{DecodeConfig, Search};
use crate::error::{Result, VsdError};
use crate::model::{ModelConfig, ModelMode};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Beam,
    OneRound,
    TwoRound,
}

impl Decoding {
    pub fn name(self) -> &'static str {
        match self {
            Decoding::Greedy => "greedy",
            Decoding::Beam => "beam",
            Decoding::OneRound => "one_round",
            Decoding::TwoRound => "two_round",
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Decoding {
    type Err = VsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Decoding::Greedy),
            "beam" => Ok(Decoding::Beam),
            "one_round" | "one-round" => Ok(Decoding::OneRound),
            "two_round" | "two-round" => Ok(Decoding::TwoRound),
            _ => Err(VsdError::Config(format!(
                "unknown decoding `{s}` (greedy, beam, one_round, two_round)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSource {
    None,
    Predicted,
    Golden,
}

impl RelationSource {
    pub fn name(self) -> &'static str {
        match self {
            RelationSource::None => "none",
            RelationSource::Predicted => "predicted",
            RelationSource::Golden => "golden",
        }
    }
}

impl fmt::Display for RelationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationSource {
    type Err = VsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RelationSource::None),
            "predicted" => Ok(RelationSource::Predicted),
            "golden" | "gold" => Ok(RelationSource::Golden),
            _ => Err(VsdError::Config(format!(
                "unknown relation source `{s}` (none, predicted, golden)"
            ))),
        }
    }
}

/// One row of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Base,
    Pipeline,
    PipelineGolden,
    OneRound,
    TwoRound,
    End2endGolden,
}

impl Cell {
    /// Valid combinations: base+none, pipeline+predicted|golden and
    /// end2end+one_round|two_round|golden. Search strategy (greedy or beam)
    /// is free except for the round-based cells, which use the beam size.
    pub fn of(mode: ModelMode, decoding: Decoding, source: RelationSource) -> Result<Cell> {
        use Decoding::*;
        use RelationSource as R;
        let searchable = matches!(decoding, Greedy | Beam);
        let cell = match (mode, source) {
            (ModelMode::Base, R::None) if searchable => Some(Cell::Base),
            (ModelMode::Pipeline, R::Predicted) if searchable => Some(Cell::Pipeline),
            (ModelMode::Pipeline, R::Golden) if searchable => Some(Cell::PipelineGolden),
            (ModelMode::End2end, R::Predicted) if decoding == OneRound => Some(Cell::OneRound),
            (ModelMode::End2end, R::Predicted) if decoding == TwoRound => Some(Cell::TwoRound),
            (ModelMode::End2end, R::Golden) if searchable => Some(Cell::End2endGolden),
            _ => None,
        };
        cell.ok_or_else(|| {
            VsdError::Config(format!(
                "mode {mode} with decoding {decoding} and relation source {source} is not a valid experiment; \
                 use base+none, pipeline+predicted|golden, end2end+predicted with one_round|two_round, \
                 or end2end+golden"
            ))
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Cell::Base => "base",
            Cell::Pipeline => "+VSRC-pipeline",
            Cell::PipelineGolden => "+VSRC-golden (pipeline)",
            Cell::OneRound => "+VSRC-end2end one-round",
            Cell::TwoRound => "+VSRC-end2end two-round",
            Cell::End2endGolden => "+VSRC-golden (end2end)",
        }
    }

    /// Whether the model predicts the relation it uses.
    pub fn predicts_relation(self) -> bool {
        matches!(self, Cell::Pipeline | Cell::OneRound | Cell::TwoRound)
    }

    pub fn is_golden(self) -> bool {
        matches!(self, Cell::PipelineGolden | Cell::End2endGolden)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Evaluate on dev every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Score at most this many dev instances.
    pub dev_limit: Option<usize>,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            eval_every: 1,
            dev_limit: None,
            patience: None,
        }
    }
}

pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root holding `data/` and one directory per experiment.
    pub output_dir: Option<PathBuf>,
    pub mode: ModelMode,
    pub decoding: Decoding,
    pub relation_source: RelationSource,
    pub beam_size: usize,
    pub seeds: Vec<u64>,
    pub selection: SelectionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "base".into(),
            output_dir: None,
            mode: ModelMode::Base,
            decoding: Decoding::Beam,
            relation_source: RelationSource::None,
            beam_size: 4,
            seeds: vec![0, 1, 2, 3, 4],
            selection: SelectionConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ModelMode>,
    pub decoding: Option<Decoding>,
    pub relation_source: Option<RelationSource>,
    pub beam_size: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "data" {
            return Err(VsdError::Config(format!("invalid experiment name `{}`", self.name)));
        }
        self.cell()?;
        if self.beam_size == 0 {
            return Err(VsdError::Config("beam_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(VsdError::Config("seeds must not be empty".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(VsdError::Config("seeds must be distinct".into()));
        }
        if self.selection.eval_every == 0 {
            return Err(VsdError::Config("selection.eval_every must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn cell(&self) -> Result<Cell> {
        Cell::of(self.mode, self.decoding, self.relation_source)
    }

    /// Search used for reported results.
    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            search: if self.decoding == Decoding::Greedy {
                Search::Greedy
            } else {
                Search::Beam { size: self.beam_size }
            },
            max_len: self.model.max_desc_len,
            length_normalize: true,
        }
    }

    /// Greedy search used for dev-set selection.
    pub fn selection_decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            search: Search::Greedy,
            ..self.decode_config()
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(d) = o.decoding {
            self.decoding = d;
        }
        if let Some(r) = o.relation_source {
            self.relation_source = r;
        }
        if let Some(b) = o.beam_size {
            self.beam_size = b;
        }
        if let Some(p) = &o.output_dir {
            self.output_dir = Some(p.clone());
        }
        self.validate()
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_root().join("data")
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.experiment_dir().join(format!("seed-{seed}"))
    }

    /// Model configuration of one seed: the seed drives initialization.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            init_seed: seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| VsdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| VsdError::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VsdError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            VsdError::Config(m) => VsdError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| VsdError::io(path, e))
    }
}
