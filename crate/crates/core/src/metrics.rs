//! Monocular depth metrics over pixels with `0 < gt ≤ cap`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio threshold for `d1`; a pixel passes only when strictly below it.
pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub absrel: f64,
    pub sqrel: f64,
    pub rmse: f64,
    /// Fraction in `[0, 1]`.
    pub d1: f64,
    pub pixels: usize,
}

/// Accumulates per-pixel terms so reports can be pooled over many images.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    hits: usize,
    pixels: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64], cap: f64) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension {
                op: "depth_metrics",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if !(g > 0.0 && g <= cap) {
                continue;
            }
            if !(p > 0.0) {
                return Err(Error::Domain {
                    op: "depth_metrics",
                    message: format!("prediction {p} is not positive"),
                });
            }
            let diff = p - g;
            self.abs_rel += diff.abs() / g;
            self.sq_rel += diff * diff / g;
            self.sq += diff * diff;
            if (p / g).max(g / p) < DELTA_THRESHOLD {
                self.hits += 1;
            }
            self.pixels += 1;
        }
        Ok(())
    }

    pub fn finish(&self, cap: f64) -> Result<MetricReport> {
        if self.pixels == 0 {
            return Err(Error::EmptyMask { cap });
        }
        let n = self.pixels as f64;
        Ok(MetricReport {
            absrel: self.abs_rel / n,
            sqrel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            d1: self.hits as f64 / n,
            pixels: self.pixels,
        })
    }
}

pub fn depth_metrics(pred: &[f64], gt: &[f64], cap: f64) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, cap)?;
    acc.finish(cap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub absrel: f64,
    pub sqrel: f64,
    pub rmse: f64,
    pub d1: f64,
    pub d1_percent: f64,
    pub pixels: usize,
}

/// Rows in the given order; labels must be unique.
pub fn aggregate(reports: &[(String, MetricReport)]) -> Result<Vec<DomainRow>> {
    if reports.is_empty() {
        return Err(Error::Contract("no domain reports to aggregate".into()));
    }
    let mut seen = HashSet::new();
    reports
        .iter()
        .map(|(domain, r)| {
            if !seen.insert(domain.as_str()) {
                return Err(Error::Contract(format!("duplicate domain '{domain}' in report")));
            }
            Ok(DomainRow {
                domain: domain.clone(),
                absrel: r.absrel,
                sqrel: r.sqrel,
                rmse: r.rmse,
                d1: r.d1,
                d1_percent: 100.0 * r.d1,
                pixels: r.pixels,
            })
        })
        .collect()
}

pub fn format_table(rows: &[DomainRow]) -> String {
    let mut out = format!(
        "{:<12} {:>9} {:>9} {:>9} {:>8}\n",
        "domain", "absREL", "sqREL", "RMSE", "d1 (%)"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8.2}\n",
            r.domain, r.absrel, r.sqrel, r.rmse, r.d1_percent
        ));
    }
    out
}
