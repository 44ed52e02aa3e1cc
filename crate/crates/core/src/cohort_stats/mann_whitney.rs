use statrs::distribution::{ContinuousCDF, Normal};

use super::{average_ranks, check_finite, tie_groups, Alternative, Method, StatResult, StatsError};

/// Largest combined sample size for which the permutation distribution is
/// enumerated exhaustively.
pub const EXACT_MAX_N: usize = 16;

/// Two-sided Mann-Whitney U test. `statistic` is U of the first sample,
/// counting ties as one half.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<StatResult, StatsError> {
    mann_whitney_with(a, b, Alternative::TwoSided)
}

pub fn mann_whitney_with(a: &[f64], b: &[f64], alternative: Alternative) -> Result<StatResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Usage("both samples must be non-empty".into()));
    }
    check_finite("a", a)?;
    check_finite("b", b)?;
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    // Doubled midranks are integers, so U can be compared exactly.
    let ranks2: Vec<u64> = average_ranks(&pooled).iter().map(|r| (r * 2.0) as u64).collect();
    let offset2 = (n1 * (n1 + 1)) as u64;
    let u2_obs = ranks2[..n1].iter().sum::<u64>() - offset2;
    let u = u2_obs as f64 / 2.0;
    let ties = tie_groups(&pooled);

    let (p, path) = if n <= EXACT_MAX_N {
        (exact_p(&ranks2, n1, n2, u2_obs, alternative), "exact enumeration")
    } else {
        (normal_p(u, n1, n2, &ties, alternative), "normal approximation, tie and continuity corrected")
    };
    Ok(StatResult {
        method: Method::MannWhitneyU,
        statistic: u,
        p_value: Some(p),
        n: vec![n1, n2],
        notes: format!("{path}; tie groups={}", ties.len()),
    })
}

/// Share of the C(n, n1) ways of drawing the first sample's ranks whose U is
/// at least as extreme as observed.
fn exact_p(ranks2: &[u64], n1: usize, n2: usize, u2_obs: u64, alternative: Alternative) -> f64 {
    let n = ranks2.len();
    let offset2 = (n1 * (n1 + 1)) as u64;
    let mean2 = (n1 * n2) as i64;
    let obs_dev = (u2_obs as i64 - mean2).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        total += 1;
        let sum2: u64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks2[i]).sum();
        let u2 = sum2 - offset2;
        let extreme = match alternative {
            Alternative::TwoSided => (u2 as i64 - mean2).abs() >= obs_dev,
            Alternative::Greater => u2 >= u2_obs,
            Alternative::Less => u2 <= u2_obs,
        };
        if extreme {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

fn normal_p(u: f64, n1: usize, n2: usize, ties: &[usize], alternative: Alternative) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let n = n1f + n2f;
    let mean = n1f * n2f / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = n1f * n2f / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    let normal = Normal::standard();
    match alternative {
        Alternative::TwoSided => {
            let z = ((u - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * normal.sf(z)).min(1.0)
        }
        Alternative::Greater => normal.sf((u - mean - 0.5) / sd),
        Alternative::Less => normal.cdf((u - mean + 0.5) / sd),
    }
}
