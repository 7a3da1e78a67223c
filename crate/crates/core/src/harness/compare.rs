use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VsdError};

use super::config::{Cell, ExperimentConfig};
use super::experiment::{load_report, ExperimentReport, MeanStd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub cell: Cell,
    pub label: String,
    pub n_seeds: usize,
    pub bleu4: MeanStd,
    pub rouge_l: MeanStd,
    pub meteor_lite: MeanStd,
    pub cider: MeanStd,
    pub vsrc_accuracy: Option<MeanStd>,
}

/// Difference of mean BLEU-4 between two rows, `to − from`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub label: String,
    pub from: String,
    pub to: String,
    pub bleu4: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub data_hash: String,
    pub rows: Vec<CompareRow>,
    pub deltas: Vec<Delta>,
}

/// Aligns finished experiments into one table with the golden − base,
/// two-round − one-round and end2end − pipeline deltas where both rows
/// exist. All experiments must share one dataset.
pub fn compare_reports(reports: &[ExperimentReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(VsdError::InvalidInput("compare needs at least two experiments".into()));
    }
    let hash = &reports[0].data_hash;
    if let Some(r) = reports.iter().find(|r| &r.data_hash != hash) {
        return Err(VsdError::Incompatible(format!(
            "`{}` was evaluated on a different dataset than `{}`",
            r.name, reports[0].name
        )));
    }
    let rows: Vec<CompareRow> = reports
        .iter()
        .map(|r| CompareRow {
            name: r.name.clone(),
            cell: r.cell,
            label: r.label.clone(),
            n_seeds: r.seeds.len(),
            bleu4: r.summary.bleu4,
            rouge_l: r.summary.rouge_l,
            meteor_lite: r.summary.meteor_lite,
            cider: r.summary.cider,
            vsrc_accuracy: r.summary.vsrc_accuracy,
        })
        .collect();
    let find = |cells: &[Cell]| cells.iter().find_map(|c| rows.iter().find(|r| r.cell == *c));
    let mut deltas = Vec::new();
    let mut delta = |label: &str, from: Option<&CompareRow>, to: Option<&CompareRow>| {
        if let (Some(a), Some(b)) = (from, to) {
            deltas.push(Delta {
                label: label.into(),
                from: a.name.clone(),
                to: b.name.clone(),
                bleu4: b.bleu4.mean - a.bleu4.mean,
            });
        }
    };
    delta(
        "golden - base",
        find(&[Cell::Base]),
        find(&[Cell::PipelineGolden, Cell::End2endGolden]),
    );
    delta("two-round - one-round", find(&[Cell::OneRound]), find(&[Cell::TwoRound]));
    delta("end2end - pipeline", find(&[Cell::Pipeline]), find(&[Cell::TwoRound]));
    Ok(Comparison {
        data_hash: hash.clone(),
        rows,
        deltas,
    })
}

/// Loads each experiment's report; a missing one is named in the error.
pub fn cmd_compare(configs: &[ExperimentConfig]) -> Result<Comparison> {
    let reports = configs.iter().map(load_report).collect::<Result<Vec<_>>>()?;
    compare_reports(&reports)
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let f = |m: &MeanStd| format!("{:6.2} ± {:5.2}", m.mean, m.std);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<26} {:<16} {:>5}  {:<15} {:<15} {:<15} {:<15} {:<15}",
            "row", "experiment", "seeds", "BLEU-4", "ROUGE-L", "METEOR-lite", "CIDEr", "VSRC acc"
        );
        for r in &self.rows {
            let acc = r.vsrc_accuracy.as_ref().map_or_else(|| "-".to_string(), f);
            let _ = writeln!(
                out,
                "{:<26} {:<16} {:>5}  {:<15} {:<15} {:<15} {:<15} {:<15}",
                r.label,
                r.name,
                r.n_seeds,
                f(&r.bleu4),
                f(&r.rouge_l),
                f(&r.meteor_lite),
                f(&r.cider),
                acc
            );
        }
        if !self.deltas.is_empty() {
            let _ = writeln!(out);
            for d in &self.deltas {
                let _ = writeln!(out, "{:<24} BLEU-4 {:+.2}  ({} -> {})", d.label, d.bleu4, d.from, d.to);
            }
        }
        out
    }
}
