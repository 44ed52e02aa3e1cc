//! Statistics for cohort studies on hub data: Spearman correlation with
//! average ranks, Mann-Whitney U (exact for small samples), Fisher-z pooling
//! of per-stratum correlations, stratified group comparison and longitudinal
//! tracking of closed cohorts.
//!
//! All p-values are two-sided unless an [`Alternative`] says otherwise.

mod cohort;
mod mann_whitney;
mod stratified;

use std::fmt;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

pub use cohort::{track_cohort, CohortDefinition, CohortPoint, CohortSeries};
pub use mann_whitney::{mann_whitney, mann_whitney_with, EXACT_MAX_N};
pub use stratified::{fisher_combine, stratified_compare, Outcome, StratifiedComparison, StratumRow};

use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for StatsError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => StatsError::NotFound(id),
            other => StatsError::Store(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Spearman,
    MannWhitneyU,
    PooledCorrelation,
    StratifiedCompare,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Spearman => "spearman",
            Method::MannWhitneyU => "mann_whitney_u",
            Method::PooledCorrelation => "pooled_correlation",
            Method::StratifiedCompare => "stratified_compare",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alternative {
    #[default]
    TwoSided,
    /// First sample tends to be larger.
    Greater,
    /// First sample tends to be smaller.
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatResult {
    pub method: Method,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub n: Vec<usize>,
    pub notes: String,
}

/// 1-based average ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Sizes of each group of tied values (only groups larger than one).
pub(crate) fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > 1 {
            out.push(j - i);
        }
        i = j;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn check_finite(name: &str, v: &[f64]) -> Result<(), StatsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::Usage(format!("{name} contains non-finite values")))
    }
}

pub(crate) fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).min(1.0)
}

/// Spearman's rho: Pearson correlation of average ranks. The p-value uses
/// the t approximation with n-2 degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<StatResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Usage(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(StatsError::Usage(format!("spearman needs at least 3 pairs, got {}", x.len())));
    }
    check_finite("x", x)?;
    check_finite("y", y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    if rx.iter().all(|r| *r == rx[0]) || ry.iter().all(|r| *r == ry[0]) {
        return Err(StatsError::DegenerateInput("constant input".into()));
    }
    let rho = pearson(&rx, &ry);
    let n = x.len();
    let p = if rho.abs() >= 1.0 {
        0.0
    } else if n > 2 {
        let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, n as f64 - 2.0).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    } else {
        1.0
    };
    let ties = tie_groups(x).len() + tie_groups(y).len();
    Ok(StatResult {
        method: Method::Spearman,
        statistic: rho,
        p_value: Some(p),
        n: vec![n],
        notes: format!("average ranks; t approximation; tie groups={ties}"),
    })
}

/// Inverse-variance (n-3) weighted mean of Fisher-transformed correlations.
pub fn pooled_correlation(per_stratum: &[(f64, usize)]) -> Result<StatResult, StatsError> {
    if per_stratum.is_empty() {
        return Err(StatsError::Usage("no correlations to pool".into()));
    }
    for &(r, n) in per_stratum {
        if n < 4 {
            return Err(StatsError::Usage(format!("stratum with n={n} has no positive weight")));
        }
        if !r.is_finite() || r.abs() > 1.0 {
            return Err(StatsError::Usage(format!("correlation {r} outside [-1,1]")));
        }
        if r.abs() == 1.0 {
            return Err(StatsError::DegenerateInput("|r| = 1 has no finite Fisher transform".into()));
        }
    }
    let total_w: f64 = per_stratum.iter().map(|&(_, n)| n as f64 - 3.0).sum();
    let z = per_stratum.iter().map(|&(r, n)| (n as f64 - 3.0) * r.atanh()).sum::<f64>() / total_w;
    let first = per_stratum[0].0;
    let statistic = if per_stratum.iter().all(|&(r, _)| r == first) { first } else { z.tanh() };
    Ok(StatResult {
        method: Method::PooledCorrelation,
        statistic,
        p_value: Some(normal_two_sided(z * total_w.sqrt())),
        n: per_stratum.iter().map(|&(_, n)| n).collect(),
        notes: format!("fisher-z pooling, weights n-3, strata={}", per_stratum.len()),
    })
}
