//! Dice overlap and continual-learning summaries of a train-test matrix.
//!
//! `dsc[i][j]` is the Dice score on the test split of dataset `j` after
//! training sequentially through dataset `i` (0-based here).
//!
//! * AVG: mean of the last row.
//! * ILM: mean of the lower triangle including the diagonal.
//! * BWT: `mean_{i<P} (p_Pi - p_ii)`; negative means forgetting.
//! * FWT: `mean_{j>1} p_(j-1)j`, the raw zero-shot score on each dataset
//!   just before it is trained on (no random-init baseline is subtracted).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dsc(pred: &[u8], gt: &[u8]) -> Result<f64> {
    ensure!(pred.len() == gt.len(), "mask sizes differ: {} vs {}", pred.len(), gt.len());
    ensure!(
        pred.iter().chain(gt).all(|&v| v <= 1),
        "masks must be binary"
    );
    let mut inter = 0usize;
    let mut sp = 0usize;
    let mut sg = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p & g) as usize;
        sp += p as usize;
        sg += g as usize;
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTestMatrix {
    pub dataset_ids: Vec<String>,
    pub dsc: Vec<Vec<f64>>,
}

impl TrainTestMatrix {
    pub fn new(dataset_ids: Vec<String>, dsc: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { dataset_ids, dsc };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dataset_ids.len();
        ensure!(p >= 1, "matrix needs at least one dataset");
        ensure!(self.dsc.len() == p, "matrix has {} rows, expected {p}", self.dsc.len());
        for (i, row) in self.dsc.iter().enumerate() {
            ensure!(row.len() == p, "row {i} has {} entries, expected {p}", row.len());
            ensure!(
                row.iter().all(|v| (0.0..=1.0).contains(v)),
                "row {i} has entries outside [0, 1]"
            );
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.dataset_ids.len()
    }

    pub fn avg(&self) -> f64 {
        avg(&self.dsc)
    }

    pub fn ilm(&self) -> f64 {
        ilm(&self.dsc)
    }

    pub fn bwt(&self) -> Result<f64> {
        bwt(&self.dsc)
    }

    pub fn fwt(&self) -> Result<f64> {
        fwt(&self.dsc)
    }

    /// `p_Pi - p_ii` for every dataset but the last.
    pub fn per_dataset_forgetting(&self) -> Vec<f64> {
        let p = self.size();
        (0..p.saturating_sub(1)).map(|i| self.dsc[p - 1][i] - self.dsc[i][i]).collect()
    }

    /// DSC of dataset `j` after each session from `j` on.
    pub fn forgetting_curve(&self, j: usize) -> Vec<f64> {
        (j..self.size()).map(|i| self.dsc[i][j]).collect()
    }

    pub fn summary(&self) -> Result<MetricsSummary> {
        Ok(MetricsSummary {
            avg: self.avg(),
            ilm: self.ilm(),
            bwt: self.bwt()?,
            fwt: self.fwt()?,
            per_dataset_forgetting: self.per_dataset_forgetting(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_session");
        for id in &self.dataset_ids {
            s.push(',');
            s.push_str(id);
        }
        s.push('\n');
        for (i, row) in self.dsc.iter().enumerate() {
            s.push_str(&self.dataset_ids[i]);
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn avg(m: &[Vec<f64>]) -> f64 {
    let last = &m[m.len() - 1];
    last.iter().sum::<f64>() / last.len() as f64
}

pub fn ilm(m: &[Vec<f64>]) -> f64 {
    let p = m.len();
    let sum: f64 = m.iter().enumerate().flat_map(|(i, row)| &row[..=i]).sum();
    2.0 * sum / (p * (p + 1)) as f64
}

pub fn bwt(m: &[Vec<f64>]) -> Result<f64> {
    let p = m.len();
    ensure!(p >= 2, "BWT needs at least two sessions");
    let sum: f64 = (0..p - 1).map(|i| m[p - 1][i] - m[i][i]).sum();
    Ok(sum / (p - 1) as f64)
}

pub fn fwt(m: &[Vec<f64>]) -> Result<f64> {
    let p = m.len();
    ensure!(p >= 2, "FWT needs at least two sessions");
    let sum: f64 = (1..p).map(|j| m[j - 1][j]).sum();
    Ok(sum / (p - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub avg: f64,
    pub ilm: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub per_dataset_forgetting: Vec<f64>,
}

/// Reads the `datasets`/`dsc` fields of a run's `matrix.json`.
pub fn read_matrix(path: &Path) -> Result<TrainTestMatrix> {
    #[derive(Deserialize)]
    struct Partial {
        datasets: Vec<String>,
        dsc: Vec<Vec<f64>>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: Partial = serde_json::from_str(&text)?;
    TrainTestMatrix::new(p.datasets, p.dsc)
}

pub fn write_metrics(path: &Path, summary: &MetricsSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
