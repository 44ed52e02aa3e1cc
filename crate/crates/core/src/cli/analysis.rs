use std::collections::{BTreeMap, BTreeSet};

use crate::cohort_stats::{pooled_correlation, spearman, stratified_compare, Outcome};
use crate::preprocess::EnrichedRecord;
use crate::stratifier::{SampledModel, Selector, Stratum, StratumKey};

use super::report::StatsRow;

/// Strata of the drawn sample, with proportions relative to the sample.
pub fn sample_strata(sample: &[SampledModel]) -> Vec<Stratum> {
    let mut by_key: BTreeMap<&StratumKey, BTreeSet<String>> = BTreeMap::new();
    for s in sample {
        by_key.entry(&s.stratum).or_default().insert(s.model_id.clone());
    }
    let n = sample.len().max(1) as f64;
    by_key
        .into_iter()
        .map(|(key, member_ids)| Stratum { key: key.clone(), proportion: member_ids.len() as f64 / n, member_ids })
        .collect()
}

/// Stratified comparison of `outcome` by `group`, plus per-stratum
/// Spearman correlations pooled across strata for each pair.
pub fn analyze(
    records: &[EnrichedRecord],
    strata: &[Stratum],
    outcome: &Outcome,
    group: Selector,
    correlations: &[(Outcome, Outcome)],
) -> (Vec<StatsRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();

    match stratified_compare(records, outcome, group, strata) {
        Ok(cmp) => {
            for r in &cmp.table {
                rows.push(StatsRow {
                    method: "mann_whitney_u".into(),
                    stratum: r.key.to_string(),
                    statistic: r.u,
                    p_value: Some(r.p_value),
                    n1: Some(r.n1),
                    n2: Some(r.n2),
                    notes: format!("{outcome} by {group}: {} vs {}; {}", r.groups.0, r.groups.1, r.notes),
                });
            }
            rows.push(StatsRow {
                method: cmp.result.method.to_string(),
                stratum: "*".into(),
                statistic: cmp.result.statistic,
                p_value: cmp.result.p_value,
                n1: cmp.result.n.first().copied(),
                n2: cmp.result.n.get(1).copied(),
                notes: cmp.result.notes.clone(),
            });
            skipped.extend(cmp.skipped.iter().map(|(k, why)| format!("mann_whitney_u {k}: {why}")));
        }
        Err(e) => skipped.push(format!("stratified_compare: {e}")),
    }

    let by_id: BTreeMap<&str, &EnrichedRecord> = records.iter().map(|r| (r.record.model_id.as_str(), r)).collect();
    for (x, y) in correlations {
        let mut per_stratum = Vec::new();
        for s in strata {
            let (xs, ys): (Vec<f64>, Vec<f64>) = s
                .member_ids
                .iter()
                .filter_map(|id| by_id.get(id.as_str()))
                .filter_map(|r| Some((x.value_of(r)?, y.value_of(r)?)))
                .unzip();
            match spearman(&xs, &ys) {
                Ok(res) => {
                    if xs.len() >= 4 && res.statistic.abs() < 1.0 {
                        per_stratum.push((res.statistic, xs.len()));
                    }
                    rows.push(StatsRow {
                        method: res.method.to_string(),
                        stratum: s.key.to_string(),
                        statistic: res.statistic,
                        p_value: res.p_value,
                        n1: Some(xs.len()),
                        n2: None,
                        notes: format!("{x} ~ {y}; {}", res.notes),
                    });
                }
                Err(e) => skipped.push(format!("spearman {x} ~ {y} in {}: {e}", s.key)),
            }
        }
        match pooled_correlation(&per_stratum) {
            Ok(res) => rows.push(StatsRow {
                method: res.method.to_string(),
                stratum: "*".into(),
                statistic: res.statistic,
                p_value: res.p_value,
                n1: Some(res.n.iter().sum()),
                n2: None,
                notes: format!("{x} ~ {y}; {}", res.notes),
            }),
            Err(e) => skipped.push(format!("pooled_correlation {x} ~ {y}: {e}")),
        }
    }
    (rows, skipped)
}
