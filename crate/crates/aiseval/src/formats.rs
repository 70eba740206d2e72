//! Versioned on-disk formats: JSON-lines run histories and JSON reports.
//!
//! A history file is one JSON object per line, each tagged with `kind`:
//! a `header`, then `draw` records interleaved with `stage` markers, and a
//! closing `latest_proposal` (the proposal `q_N` the covariance estimator
//! needs).

use std::io::{BufRead, Write};

use aiseval_core::estimate::{estimate_g, EstimateOptions, EstimateReport};
use aiseval_core::history::{DrawRecord, RunHistory, SupportDelta};
use aiseval_core::measures::MeasureSpec;
use aiseval_core::measures::Measure;
use aiseval_core::pool::TestPool;
use aiseval_core::sampler::OracleMode;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const HISTORY_SCHEMA: &str = "aiseval.history.v1";
pub const REPORT_SCHEMA: &str = "aiseval.estimate.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryLine {
    Header {
        schema: String,
        n_items: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        measure: Option<MeasureSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        oracle: Option<OracleMode>,
    },
    Draw {
        #[serde(flatten)]
        record: DrawRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        item_id: Option<String>,
    },
    Stage {
        stage: usize,
        records: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        zero_mass_added: Vec<usize>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        zero_mass_removed: Vec<usize>,
    },
    LatestProposal {
        probs: Vec<f64>,
    },
}

/// A parsed history file.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryFile {
    pub n_items: usize,
    pub measure: Option<MeasureSpec>,
    pub seed: Option<u64>,
    pub oracle: Option<OracleMode>,
    pub records: Vec<DrawRecord>,
    pub item_ids: Vec<Option<String>>,
    pub stage_boundaries: Vec<usize>,
    pub latest_proposal: Option<Vec<f64>>,
}

pub struct HistoryMeta<'a> {
    pub measure: Option<&'a MeasureSpec>,
    pub seed: Option<u64>,
    pub oracle: Option<OracleMode>,
    pub pool: Option<&'a TestPool>,
}

pub fn write_history<W: Write>(
    mut out: W,
    history: &RunHistory,
    latest_proposal: &[f64],
    meta: &HistoryMeta<'_>,
) -> Result<()> {
    let mut line = |l: &HistoryLine| -> Result<()> {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))
    };
    line(&HistoryLine::Header {
        schema: HISTORY_SCHEMA.into(),
        n_items: history.n_items(),
        measure: meta.measure.cloned(),
        seed: meta.seed,
        oracle: meta.oracle,
    })?;
    let mut deltas = history.support_log().iter().peekable();
    let boundaries = history.stage_boundaries();
    let mut next_boundary = 0;
    let stage_line = |stage: usize, records: usize, delta: Option<&SupportDelta>| HistoryLine::Stage {
        stage,
        records,
        zero_mass_added: delta.map(|d| d.added.clone()).unwrap_or_default(),
        zero_mass_removed: delta.map(|d| d.removed.clone()).unwrap_or_default(),
    };
    // the initial proposal's support precedes any draw
    if let Some(d) = deltas.next_if(|d| d.stage == 0) {
        line(&stage_line(0, 0, Some(d)))?;
    }
    for (n, r) in history.records().iter().enumerate() {
        line(&HistoryLine::Draw {
            record: *r,
            item_id: meta.pool.map(|p| p.item(r.item).id.clone()),
        })?;
        while next_boundary < boundaries.len() && boundaries[next_boundary] == n + 1 {
            let stage = next_boundary + 1;
            let d = deltas.next_if(|d| d.stage == stage);
            line(&stage_line(stage, n + 1, d))?;
            next_boundary += 1;
        }
    }
    line(&HistoryLine::LatestProposal {
        probs: latest_proposal.to_vec(),
    })
}

pub fn read_history<R: BufRead>(input: R) -> Result<HistoryFile> {
    let mut file: Option<HistoryFile> = None;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: HistoryLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("history line {}: {e}", i + 1)))?;
        match (parsed, file.as_mut()) {
            (
                HistoryLine::Header {
                    schema,
                    n_items,
                    measure,
                    seed,
                    oracle,
                },
                None,
            ) => {
                if schema != HISTORY_SCHEMA {
                    return Err(Error::Format(format!("unsupported history schema `{schema}`")));
                }
                file = Some(HistoryFile {
                    n_items,
                    measure,
                    seed,
                    oracle,
                    records: Vec::new(),
                    item_ids: Vec::new(),
                    stage_boundaries: Vec::new(),
                    latest_proposal: None,
                });
            }
            (HistoryLine::Header { .. }, Some(_)) => return Err(Error::Format("duplicate history header".into())),
            (_, None) => return Err(Error::Format("history must start with a header".into())),
            (HistoryLine::Draw { record, item_id }, Some(f)) => {
                if record.item >= f.n_items {
                    return Err(Error::Format(format!("history line {}: item out of range", i + 1)));
                }
                f.records.push(record);
                f.item_ids.push(item_id);
            }
            (HistoryLine::Stage { stage, records, .. }, Some(f)) => {
                if stage > 0 {
                    f.stage_boundaries.push(records);
                }
            }
            (HistoryLine::LatestProposal { probs }, Some(f)) => {
                if probs.len() != f.n_items {
                    return Err(Error::Format("latest proposal has wrong length".into()));
                }
                f.latest_proposal = Some(probs);
            }
        }
    }
    file.ok_or_else(|| Error::Format("empty history file".into()))
}

impl HistoryFile {
    /// Per-item labels when every item was labelled consistently by a
    /// deterministic oracle.
    pub fn census_labels(&self) -> Option<Vec<usize>> {
        if self.oracle == Some(OracleMode::Stochastic) {
            return None;
        }
        let mut labels = vec![None; self.n_items];
        for r in &self.records {
            match labels[r.item] {
                None => labels[r.item] = Some(r.label),
                Some(y) if y != r.label => return None,
                Some(_) => {}
            }
        }
        labels.into_iter().collect()
    }

    /// Labels consumed: distinct items under a deterministic oracle, every
    /// draw otherwise.
    pub fn budget_consumed(&self) -> usize {
        match self.oracle {
            Some(OracleMode::Stochastic) => self.records.len(),
            _ => {
                let mut seen = vec![false; self.n_items];
                self.records.iter().filter(|r| !std::mem::replace(&mut seen[r.item], true)).count()
            }
        }
    }
}

/// Recomputes `Ĝ` from a saved history; matches the live estimate exactly.
pub fn replay_estimate(history: &HistoryFile, measure: &Measure, marginal: &[f64], alpha: f64) -> Result<EstimateReport> {
    if measure.n_items() != history.n_items || marginal.len() != history.n_items {
        return Err(Error::Format("history and pool disagree on the number of items".into()));
    }
    let census = history.census_labels();
    let options = EstimateOptions {
        alpha,
        latest_proposal: history.latest_proposal.as_deref(),
        marginal,
        census_labels: census.as_deref(),
        budget_consumed: history.budget_consumed(),
    };
    Ok(estimate_g(measure, &history.records, &options)?)
}

#[derive(Serialize)]
struct TaggedReport<'a> {
    schema: &'static str,
    #[serde(flatten)]
    report: &'a EstimateReport,
}

#[derive(Deserialize)]
struct TaggedReportOwned {
    schema: String,
    #[serde(flatten)]
    report: EstimateReport,
}

pub fn report_to_json(report: &EstimateReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&TaggedReport {
        schema: REPORT_SCHEMA,
        report,
    })?)
}

pub fn report_from_json(text: &str) -> Result<EstimateReport> {
    let tagged: TaggedReportOwned = serde_json::from_str(text)?;
    if tagged.schema != REPORT_SCHEMA {
        return Err(Error::Format(format!("unsupported report schema `{}`", tagged.schema)));
    }
    Ok(tagged.report)
}
