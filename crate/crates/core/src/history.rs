//! The sample log `𝓛` of an evaluation run.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::Measure;
use crate::proposal::Proposal;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub item: usize,
    pub label: usize,
    /// `p(x) / q_{t−1}(x)`.
    pub weight: f64,
    pub stage: usize,
    pub draw: usize,
    /// `q_{t−1}(x)` at draw time.
    pub proposal_prob: f64,
}

/// Changes to the zero-mass set between consecutive stage proposals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportDelta {
    pub stage: usize,
    pub added: Vec<usize>,
    pub removed: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunHistory {
    n_items: usize,
    records: Vec<DrawRecord>,
    /// Record counts at the close of each stage.
    stage_boundaries: Vec<usize>,
    budget_consumed: usize,
    support_log: Vec<SupportDelta>,
    #[serde(skip)]
    zero_mass: Vec<bool>,
}

// the zero-mass cache is derived from the support log
impl PartialEq for RunHistory {
    fn eq(&self, other: &Self) -> bool {
        self.n_items == other.n_items
            && self.records == other.records
            && self.stage_boundaries == other.stage_boundaries
            && self.budget_consumed == other.budget_consumed
            && self.support_log == other.support_log
    }
}

impl RunHistory {
    pub fn new(n_items: usize) -> Self {
        Self {
            n_items,
            ..Self::default()
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn records(&self) -> &[DrawRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn budget_consumed(&self) -> usize {
        self.budget_consumed
    }

    pub fn stage_boundaries(&self) -> &[usize] {
        &self.stage_boundaries
    }

    pub fn support_log(&self) -> &[SupportDelta] {
        &self.support_log
    }

    /// Appends a draw. `new_label` marks the first (budgeted) query of an
    /// item.
    pub fn push(&mut self, record: DrawRecord, new_label: bool) -> Result<()> {
        if !(record.weight > 0.0) || !record.weight.is_finite() {
            return Err(Error::InvalidWeight {
                index: self.records.len(),
                weight: record.weight,
            });
        }
        if record.item >= self.n_items {
            return Err(Error::ItemOutOfRange {
                item: record.item,
                size: self.n_items,
            });
        }
        self.records.push(record);
        if new_label {
            self.budget_consumed += 1;
        }
        Ok(())
    }

    pub fn close_stage(&mut self) {
        if self.stage_boundaries.last() != Some(&self.records.len()) {
            self.stage_boundaries.push(self.records.len());
        }
    }

    /// Logs the zero-mass items of the proposal for `stage`.
    pub fn log_support(&mut self, stage: usize, proposal: &Proposal) {
        if self.zero_mass.len() != proposal.len() {
            self.zero_mass = alloc::vec![false; proposal.len()];
        }
        let mut delta = SupportDelta {
            stage,
            ..SupportDelta::default()
        };
        for (i, was) in self.zero_mass.iter_mut().enumerate() {
            let now = !(proposal.prob(i) > 0.0);
            if now != *was {
                if now {
                    delta.added.push(i);
                } else {
                    delta.removed.push(i);
                }
                *was = now;
            }
        }
        self.support_log.push(delta);
    }

    /// Restores the skipped zero-mass cache after deserialization.
    pub fn rebuild_support_cache(&mut self) {
        let mut zero = alloc::vec![false; self.n_items];
        for delta in &self.support_log {
            for &i in &delta.removed {
                zero[i] = false;
            }
            for &i in &delta.added {
                zero[i] = true;
            }
        }
        self.zero_mass = zero;
    }

    /// Checks that every logged proposal gave positive mass to each item
    /// where `measure` can incur a nonzero loss, so the history can be
    /// reused to estimate it. Items with a logged label are checked at
    /// that label, others at every label.
    pub fn audit_support(&self, measure: &Measure) -> Result<()> {
        let mut labels: Vec<Option<usize>> = alloc::vec![None; self.n_items];
        for r in &self.records {
            labels[r.item].get_or_insert(r.label);
        }
        let mut zero = BTreeSet::new();
        let mut bad = BTreeSet::new();
        let mut buf = alloc::vec![0.0; measure.loss_dim()];
        let mut nonzero = |item: usize, label: usize| {
            measure.loss_into(item, label, &mut buf);
            buf.iter().any(|v| *v != 0.0)
        };
        for delta in &self.support_log {
            for i in &delta.removed {
                zero.remove(i);
            }
            zero.extend(delta.added.iter().copied());
            for &i in &zero {
                let needs = match labels[i] {
                    Some(y) => nonzero(i, y),
                    None => (0..measure.n_classes()).any(|y| nonzero(i, y)),
                };
                if needs {
                    bad.insert(i);
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::SupportViolation {
                items: bad.into_iter().collect(),
            })
        }
    }

    /// First observed label per item.
    pub fn observed_labels(&self) -> Vec<Option<usize>> {
        let mut labels = alloc::vec![None; self.n_items];
        for r in &self.records {
            labels[r.item].get_or_insert(r.label);
        }
        labels
    }
}
