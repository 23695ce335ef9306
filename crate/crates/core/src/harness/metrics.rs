//! Six-class confusion matrix.

use crate::encoder::NUM_EXPRESSIONS;
use crate::error::Error;
use crate::Result;
use std::fmt::Write as _;
use std::path::Path;

/// Integer counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_EXPRESSIONS]; NUM_EXPRESSIONS],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut m = Self::new();
        for (truth, pred) in pairs {
            m.record(truth, pred)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for label in [truth, pred] {
            if label >= NUM_EXPRESSIONS {
                return Err(Error::LabelOutOfRange {
                    label,
                    limit: NUM_EXPRESSIONS,
                });
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_EXPRESSIONS).map(|i| self.counts[i][i]).sum()
    }

    /// Trace over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    /// Per-class recall; None for classes with no ground-truth samples.
    pub fn per_class_accuracy(&self) -> [Option<f64>; NUM_EXPRESSIONS] {
        let mut out = [None; NUM_EXPRESSIONS];
        for (e, row) in self.counts.iter().enumerate() {
            let row_total: u64 = row.iter().sum();
            if row_total > 0 {
                out[e] = Some(row[e] as f64 / row_total as f64);
            }
        }
        out
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..NUM_EXPRESSIONS {
            for p in 0..NUM_EXPRESSIONS {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    /// Tab-separated table with header row and truth-labelled rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("truth");
        for p in 0..NUM_EXPRESSIONS {
            let _ = write!(out, "\tpred{p}");
        }
        out.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{t}");
            for c in row {
                let _ = write!(out, "\t{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path.display(), e))
    }
}
