//! Tab-separated reports with a JSON sidecar carrying the same numbers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::{Error, Result};

/// Accuracy per domain for one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub domains: Vec<String>,
    pub accuracy: Vec<f64>,
}

impl AccuracyTable {
    /// Mean over every domain except the first (the source domain).
    pub fn shifted_mean(&self) -> f64 {
        let shifted = &self.accuracy[1.min(self.accuracy.len())..];
        if shifted.is_empty() {
            return f64::NAN;
        }
        shifted.iter().sum::<f64>() / shifted.len() as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("domain\taccuracy\n");
        for (d, a) in self.domains.iter().zip(&self.accuracy) {
            let _ = writeln!(s, "{d}\t{a:.4}");
        }
        let _ = writeln!(s, "shifted_mean\t{:.4}", self.shifted_mean());
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Mean accuracy over seeds, one value per domain.
    pub mean: Vec<f64>,
    pub shifted_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub accuracy: Vec<f64>,
    pub shifted_mean: f64,
}

/// Per-seed comparison of the full pipeline against the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub seed: u64,
    pub baseline: f64,
    pub full: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub domains: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub raw: Vec<AblationCell>,
    pub trend: Vec<TrendCheck>,
    /// Seeds needed (out of `trend.len()`) for the trend to count as held.
    pub required: usize,
}

impl AblationReport {
    pub fn trend_count(&self) -> usize {
        self.trend.iter().filter(|t| t.holds).count()
    }

    pub fn trend_holds(&self) -> bool {
        self.trend_count() >= self.required
    }

    pub fn violations(&self) -> Vec<u64> {
        self.trend
            .iter()
            .filter(|t| !t.holds)
            .map(|t| t.seed)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let header = |s: &mut String, lead: &str| {
            s.push_str(lead);
            for d in &self.domains {
                s.push('\t');
                s.push_str(d);
            }
            s.push_str("\tshifted_mean\n");
        };
        header(&mut s, "variant");
        for r in &self.rows {
            s.push_str(&r.variant);
            for v in &r.mean {
                let _ = write!(s, "\t{v:.4}");
            }
            let _ = writeln!(s, "\t{:.4}", r.shifted_mean);
        }
        s.push('\n');
        header(&mut s, "variant\tseed");
        for c in &self.raw {
            let _ = write!(s, "{}\t{}", c.variant, c.seed);
            for v in &c.accuracy {
                let _ = write!(s, "\t{v:.4}");
            }
            let _ = writeln!(s, "\t{:.4}", c.shifted_mean);
        }
        s.push('\n');
        s.push_str("seed\tbaseline_shifted\tfull_shifted\tfull_ge_baseline\n");
        for t in &self.trend {
            let _ = writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{}",
                t.seed,
                t.baseline,
                t.full,
                if t.holds { "yes" } else { "VIOLATION" }
            );
        }
        let _ = writeln!(
            s,
            "# trend full >= baseline: {}/{} seeds (need {}): {}",
            self.trend_count(),
            self.trend.len(),
            self.required,
            if self.trend_holds() {
                "held"
            } else {
                "NOT HELD"
            }
        );
        s
    }
}

/// Sidecar path for a report: the same name with a `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `tsv` to `path` and `value` as pretty JSON next to it.
pub fn write_report<T: Serialize>(path: &Path, tsv: &str, value: &T) -> Result<PathBuf> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::state(format!("serializing report: {e}")))?;
    write_atomic(path, tsv.as_bytes())?;
    let side = sidecar_path(path);
    write_atomic(&side, format!("{json}\n").as_bytes())?;
    Ok(side)
}
