//! Per-client accuracy and the metrics CSV.
//!
//! ```text
//! # fedbsd metrics v1
//! # <key> = <value>            one line per config key
//! round,client_id,accuracy
//! 1,0,0.85                     one row per (round, client)
//! finetune,0,0.9               only when fine-tuning ran
//! summary,last_10_mean,0.87
//! summary,finetune_mean,0.9    only when fine-tuning ran
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so the file is a pure
//! function of the logged values.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::SplitModel;
use crate::protocol::RoundReport;

pub const CSV_VERSION_LINE: &str = "# fedbsd metrics v1";

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of test samples whose argmax logit equals the label.
pub fn evaluate_client(model: &SplitModel, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let logits = model.logits(test.features())?;
    let correct = test.labels().iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    /// Config snapshot as `(key, value)` pairs.
    pub config: Vec<(String, String)>,
    /// `accuracies[t][k]`: client `k` after round `t + 1`.
    pub accuracies: Vec<Vec<f64>>,
    /// Per-client accuracy after head fine-tuning.
    pub finetuned: Option<Vec<f64>>,
    /// Window for the summary row.
    pub last_k: usize,
}

impl MetricsLog {
    pub fn rounds(&self) -> usize {
        self.accuracies.len()
    }

    pub fn round_means(&self) -> Vec<f64> {
        self.accuracies.iter().map(|r| mean(r)).collect()
    }

    /// Mean over the last `k` rounds of the per-round mean client accuracy.
    pub fn average_last_k(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if self.rounds() < k {
            return Err(Error::NotEnoughRounds { have: self.rounds(), need: k });
        }
        let means = self.round_means();
        Ok(mean(&means[means.len() - k..]))
    }

    pub fn finetune_mean(&self) -> Option<f64> {
        self.finetuned.as_deref().map(mean)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_VERSION_LINE}")?;
        for (k, v) in &self.config {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "round,client_id,accuracy")?;
        for (t, row) in self.accuracies.iter().enumerate() {
            for (k, a) in row.iter().enumerate() {
                writeln!(w, "{},{k},{a}", t + 1)?;
            }
        }
        if let Some(ft) = &self.finetuned {
            for (k, a) in ft.iter().enumerate() {
                writeln!(w, "finetune,{k},{a}")?;
            }
        }
        let k = self.last_k.min(self.rounds()).max(1);
        if self.rounds() > 0 {
            writeln!(w, "summary,last_{k}_mean,{}", self.average_last_k(k)?)?;
        }
        if let Some(m) = self.finetune_mean() {
            writeln!(w, "summary,finetune_mean,{m}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub fn write_metrics(log: &MetricsLog, path: &std::path::Path) -> Result<()> {
    log.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// One JSON object per round report, one per line.
pub fn write_round_reports<W: Write>(mut w: W, reports: &[RoundReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}
