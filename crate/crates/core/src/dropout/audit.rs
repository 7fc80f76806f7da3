use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::policies::MaskOutcome;
use crate::error::{Error, Result};

/// One dropout invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub batch: usize,
    pub slot: usize,
    pub units: usize,
    pub dropped: usize,
    /// Empty for the honest policy.
    pub budget: Option<usize>,
    pub overshoot: usize,
    pub clamped: bool,
}

/// A one-shot or blind routing that happened.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredEvent {
    pub epoch: usize,
    pub batch: usize,
    pub slot: usize,
    pub rows: Vec<usize>,
    /// True labels of `rows`; recorded for reporting, never shown to the blind policy.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub invocations: usize,
    pub units: u64,
    pub dropped: u64,
    pub overshoot_invocations: usize,
    pub overshoot_units: u64,
    pub clamped_invocations: usize,
    /// Invocations whose exact drop count differs from `round(r * N * M)`.
    pub budget_mismatches: usize,
}

#[derive(Clone, Debug, Default)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
    pub fired: Vec<FiredEvent>,
    dump_masks: bool,
    /// `(epoch, batch, slot, row-major 0/1 string per row)` when dumping is on.
    pub mask_dumps: Vec<(usize, usize, usize, Vec<String>)>,
}

impl AuditLog {
    pub fn new(dump_masks: bool) -> Self {
        Self {
            dump_masks,
            ..Self::default()
        }
    }

    pub(crate) fn record(&mut self, epoch: usize, batch: usize, slot: usize, outcome: &MaskOutcome) {
        let (rows, cols) = outcome.mask.shape();
        if outcome.overshoot > 0 {
            log::debug!(
                "epoch {epoch} batch {batch} slot {slot}: structural drops exceed budget by {}",
                outcome.overshoot
            );
        }
        self.records.push(AuditRecord {
            epoch,
            batch,
            slot,
            units: rows * cols,
            dropped: outcome.mask.dropped_count(),
            budget: outcome.budget,
            overshoot: outcome.overshoot,
            clamped: outcome.clamped,
        });
        if self.dump_masks {
            let lines = (0..rows)
                .map(|i| {
                    (0..cols)
                        .map(|j| if outcome.mask.is_kept(i, j) { '1' } else { '0' })
                        .collect()
                })
                .collect();
            self.mask_dumps.push((epoch, batch, slot, lines));
        }
    }

    pub fn summary(&self) -> AuditSummary {
        summarize(self.records.iter())
    }

    /// Summary of one dropout slot's invocations.
    pub fn slot_summary(&self, slot: usize) -> AuditSummary {
        summarize(self.records.iter().filter(|r| r.slot == slot))
    }
}

fn summarize<'a>(records: impl Iterator<Item = &'a AuditRecord>) -> AuditSummary {
    let mut s = AuditSummary::default();
    for r in records {
        s.invocations += 1;
        s.units += r.units as u64;
        s.dropped += r.dropped as u64;
        if r.overshoot > 0 {
            s.overshoot_invocations += 1;
            s.overshoot_units += r.overshoot as u64;
        }
        if r.clamped {
            s.clamped_invocations += 1;
        }
        if let Some(b) = r.budget {
            if b != r.dropped && r.overshoot == 0 && !r.clamped {
                s.budget_mismatches += 1;
            }
        }
    }
    s
}

impl AuditLog {
    /// `epoch,batch,slot,units,dropped,budget,overshoot,clamped`, one line per invocation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record([
            "epoch", "batch", "slot", "units", "dropped", "budget", "overshoot", "clamped",
        ])
        .map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.batch.to_string(),
                r.slot.to_string(),
                r.units.to_string(),
                r.dropped.to_string(),
                r.budget.map(|b| b.to_string()).unwrap_or_default(),
                r.overshoot.to_string(),
                r.clamped.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Full masks, `epoch,batch,slot,row,bits`. Large: one line per batch row.
    pub fn write_mask_dump(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "epoch,batch,slot,row,bits")?;
            for (epoch, batch, slot, lines) in &self.mask_dumps {
                for (row, bits) in lines.iter().enumerate() {
                    writeln!(w, "{epoch},{batch},{slot},{row},{bits}")?;
                }
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
