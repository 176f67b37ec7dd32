//! Replication summaries and rank statistics.

use std::fmt;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampling::stream;

/// Mean and sample standard deviation (`n − 1` denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Summary {
            mean,
            std,
            count: values.len(),
        })
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub m: usize,
    /// `None` when the estimator failed, with the reason in `status`.
    pub summary: Option<Summary>,
    pub status: String,
}

pub const SUMMARY_CSV_HEADER: &str = "estimator,M,mean,std,se,count,status";

/// One row per (estimator, M).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn row(&self, estimator: &str, m: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.m == m)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        for r in &self.rows {
            match r.summary {
                Some(s) => out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.estimator,
                    r.m,
                    s.mean,
                    s.std,
                    s.se(),
                    s.count,
                    r.status
                )),
                None => out.push_str(&format!("{},{},,,,0,{}\n", r.estimator, r.m, r.status)),
            }
        }
        out
    }
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>5} {:>26} {:>8}", "estimator", "M", "mean ± std", "count")?;
        for r in &self.rows {
            match r.summary {
                Some(s) => writeln!(
                    f,
                    "{:<14} {:>5} {:>12.6} ± {:<11.6} {:>8}",
                    r.estimator, r.m, s.mean, s.std, s.count
                )?,
                None => writeln!(f, "{:<14} {:>5} {:>26} {:>8}", r.estimator, r.m, r.status, 0)?,
            }
        }
        Ok(())
    }
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation; 0 when either variable is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length samples of size ≥ 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankTest {
    pub rho: f64,
    /// One-sided p-value for a negative association.
    pub p_value: f64,
}

/// Spearman correlation with a one-sided permutation p-value against the
/// alternative `ρ < 0`: `(1 + #{ρ_perm ≤ ρ_obs}) / (1 + n_perm)`.
pub fn spearman_decreasing_test(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<RankTest> {
    let rho = spearman(x, y)?;
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let mut rng = stream(seed);
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        ry.shuffle(&mut rng);
        if pearson(&rx, &ry) <= rho + 1e-12 {
            extreme += 1;
        }
    }
    Ok(RankTest {
        rho,
        p_value: (1 + extreme) as f64 / (1 + n_perm) as f64,
    })
}
