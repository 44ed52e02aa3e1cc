use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{mann_whitney, Method, StatResult, StatsError};
use crate::preprocess::EnrichedRecord;
use crate::stratifier::{Selector, Stratum, StratumKey};

/// Numeric attribute compared between groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Downloads,
    Likes,
    Popularity,
    CommitCount,
    DiscussionCount,
    SizeBytes,
    Co2eGrams,
    Metric(String),
}

impl Outcome {
    pub fn value_of(&self, r: &EnrichedRecord) -> Option<f64> {
        let m = &r.record;
        match self {
            Outcome::Downloads => Some(m.downloads as f64),
            Outcome::Likes => Some(m.likes as f64),
            Outcome::Popularity => Some(r.popularity),
            Outcome::CommitCount => Some(m.commit_count as f64),
            Outcome::DiscussionCount => Some(m.discussion_count as f64),
            Outcome::SizeBytes => m.size_bytes.map(|s| s as f64),
            Outcome::Co2eGrams => m.co2e_grams,
            Outcome::Metric(name) => m.metrics.get(name).copied(),
        }
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "downloads" => Outcome::Downloads,
            "likes" => Outcome::Likes,
            "popularity" => Outcome::Popularity,
            "commit_count" => Outcome::CommitCount,
            "discussion_count" => Outcome::DiscussionCount,
            "size_bytes" => Outcome::SizeBytes,
            "co2e_grams" => Outcome::Co2eGrams,
            other => match other.strip_prefix("metric:") {
                Some(name) if !name.is_empty() => Outcome::Metric(name.to_owned()),
                _ => return Err(format!("unknown outcome attribute `{other}`")),
            },
        })
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Downloads => f.write_str("downloads"),
            Outcome::Likes => f.write_str("likes"),
            Outcome::Popularity => f.write_str("popularity"),
            Outcome::CommitCount => f.write_str("commit_count"),
            Outcome::DiscussionCount => f.write_str("discussion_count"),
            Outcome::SizeBytes => f.write_str("size_bytes"),
            Outcome::Co2eGrams => f.write_str("co2e_grams"),
            Outcome::Metric(m) => write!(f, "metric:{m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumRow {
    pub key: StratumKey,
    /// Group values, first sample first.
    pub groups: (String, String),
    pub u: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedComparison {
    pub result: StatResult,
    pub table: Vec<StratumRow>,
    /// Strata left out, with the reason.
    pub skipped: Vec<(StratumKey, String)>,
}

/// Fisher's method: -2 Σ ln p against chi-square with 2k degrees of freedom.
/// Returns (statistic, combined p).
pub fn fisher_combine(p_values: &[f64]) -> (f64, f64) {
    let x2: f64 = p_values.iter().map(|p| -2.0 * p.max(f64::MIN_POSITIVE).ln()).sum();
    let chi = ChiSquared::new(2.0 * p_values.len() as f64).expect("positive df");
    (x2, chi.sf(x2).clamp(0.0, 1.0))
}

/// Mann-Whitney within each stratum between the two values of `group`,
/// combined across strata by Fisher's method.
///
/// Strata where the group attribute does not take exactly two values are
/// skipped and listed. With a single analyzable stratum the result is that
/// stratum's Mann-Whitney U and p.
pub fn stratified_compare(
    records: &[EnrichedRecord],
    outcome: &Outcome,
    group: Selector,
    strata: &[Stratum],
) -> Result<StratifiedComparison, StatsError> {
    let by_id: HashMap<&str, &EnrichedRecord> = records.iter().map(|r| (r.record.model_id.as_str(), r)).collect();
    let mut sorted: Vec<&Stratum> = strata.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));

    let mut table = Vec::new();
    let mut skipped = Vec::new();
    for s in sorted {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for id in &s.member_ids {
            let Some(r) = by_id.get(id.as_str()) else { continue };
            if let Some(v) = outcome.value_of(r) {
                groups.entry(group.value_of(r)).or_default().push(v);
            }
        }
        if groups.len() != 2 {
            let values: BTreeSet<&String> = groups.keys().collect();
            skipped.push((s.key.clone(), format!("{group} takes {} value(s) {values:?}", groups.len())));
            continue;
        }
        let mut it = groups.into_iter();
        let (ga, a) = it.next().expect("two groups");
        let (gb, b) = it.next().expect("two groups");
        let mw = mann_whitney(&a, &b)?;
        table.push(StratumRow {
            key: s.key.clone(),
            groups: (ga, gb),
            u: mw.statistic,
            p_value: mw.p_value.expect("Mann-Whitney defines a p-value"),
            n1: a.len(),
            n2: b.len(),
            notes: mw.notes,
        });
    }

    if table.is_empty() {
        return Err(StatsError::DegenerateInput(format!("no stratum has both values of {group}")));
    }
    let n = vec![table.iter().map(|r| r.n1).sum(), table.iter().map(|r| r.n2).sum()];
    let result = if let [only] = table.as_slice() {
        StatResult {
            method: Method::StratifiedCompare,
            statistic: only.u,
            p_value: Some(only.p_value),
            n,
            notes: format!("single stratum, Mann-Whitney U of {outcome} by {group}; {}", only.notes),
        }
    } else {
        let ps: Vec<f64> = table.iter().map(|r| r.p_value).collect();
        let (x2, p) = fisher_combine(&ps);
        StatResult {
            method: Method::StratifiedCompare,
            statistic: x2,
            p_value: Some(p),
            n,
            notes: format!(
                "Fisher combination of {} per-stratum Mann-Whitney tests of {outcome} by {group}; skipped={}",
                table.len(),
                skipped.len()
            ),
        }
    };
    Ok(StratifiedComparison { result, table, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{Bin, MaintenanceLabel};
    use crate::record::ModelRecord;
    use chrono::DateTime;

    fn er(id: &str, downloads: u64, label: MaintenanceLabel) -> EnrichedRecord {
        let mut r = ModelRecord::new(id, DateTime::UNIX_EPOCH);
        r.downloads = downloads;
        EnrichedRecord {
            record: r,
            popularity: 0.0,
            size_bin: Bin::Q1,
            popularity_bin: Bin::Q1,
            carbon_label: None,
            maintenance_label: Some(label),
            tag_vector: vec![],
        }
    }

    fn stratum(key: &str, ids: &[String], n: usize) -> Stratum {
        Stratum {
            key: StratumKey(vec![key.into()]),
            member_ids: ids.iter().cloned().collect(),
            proportion: ids.len() as f64 / n as f64,
        }
    }

    /// Group High sits above Low within each stratum, but High members are
    /// concentrated in the low-baseline stratum.
    fn simpson_fixture() -> (Vec<EnrichedRecord>, Vec<Stratum>) {
        use MaintenanceLabel::*;
        let mut recs = Vec::new();
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        for (i, v) in (4..12).enumerate() {
            recs.push(er(&format!("s1-h{i}"), v, High));
            s1.push(format!("s1-h{i}"));
        }
        for (i, v) in [0, 1, 2].into_iter().enumerate() {
            recs.push(er(&format!("s1-l{i}"), v, Low));
            s1.push(format!("s1-l{i}"));
        }
        for (i, v) in [28, 29, 30].into_iter().enumerate() {
            recs.push(er(&format!("s2-h{i}"), v, High));
            s2.push(format!("s2-h{i}"));
        }
        for (i, v) in (20..28).enumerate() {
            recs.push(er(&format!("s2-l{i}"), v, Low));
            s2.push(format!("s2-l{i}"));
        }
        let n = recs.len();
        (recs, vec![stratum("a", &s1, n), stratum("b", &s2, n)])
    }

    #[test]
    fn single_stratum_reduces_to_mann_whitney() {
        use MaintenanceLabel::*;
        let recs = vec![er("a", 1, High), er("b", 2, High), er("c", 3, Low), er("d", 4, Low)];
        let ids: Vec<String> = recs.iter().map(|r| r.record.model_id.clone()).collect();
        let out = stratified_compare(&recs, &Outcome::Downloads, Selector::MaintenanceLabel, &[stratum("s", &ids, 4)]).unwrap();
        let plain = mann_whitney(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(out.result.statistic, plain.statistic);
        assert_eq!(out.result.p_value, plain.p_value);
        assert_eq!(out.table.len(), 1);
    }

    #[test]
    fn identical_group_distributions_combine_to_one() {
        use MaintenanceLabel::*;
        let mut recs = Vec::new();
        let mut strata = Vec::new();
        for s in ["a", "b"] {
            let mut ids = Vec::new();
            for (i, v) in [1, 2, 3].into_iter().enumerate() {
                for label in [High, Low] {
                    let id = format!("{s}-{i}-{label:?}");
                    recs.push(er(&id, v, label));
                    ids.push(id);
                }
            }
            strata.push(stratum(s, &ids, 12));
        }
        let out = stratified_compare(&recs, &Outcome::Downloads, Selector::MaintenanceLabel, &strata).unwrap();
        assert!(out.table.iter().all(|r| r.p_value == 1.0));
        assert_eq!(out.result.p_value, Some(1.0));
        assert_eq!(fisher_combine(&[1.0, 1.0]), (0.0, 1.0));
    }

    #[test]
    fn stratification_reveals_masked_shift() {
        let (recs, strata) = simpson_fixture();
        let out = stratified_compare(&recs, &Outcome::Downloads, Selector::MaintenanceLabel, &strata).unwrap();
        // Enumeration oracle: High owns the top 8 of 11 ranks in each
        // stratum, so two of the C(11,3) = 165 relabelings are as extreme.
        for row in &out.table {
            assert_eq!(row.p_value, 2.0 / 165.0);
        }
        assert!(out.result.p_value.unwrap() < 0.01);

        let all: Vec<String> = recs.iter().map(|r| r.record.model_id.clone()).collect();
        let pooled = stratified_compare(&recs, &Outcome::Downloads, Selector::MaintenanceLabel, &[stratum("all", &all, all.len())]).unwrap();
        assert!(pooled.result.p_value.unwrap() > 0.5);
    }

    #[test]
    fn nothing_analyzable_is_degenerate() {
        let recs = vec![er("a", 1, MaintenanceLabel::High), er("b", 2, MaintenanceLabel::High)];
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let err = stratified_compare(&recs, &Outcome::Downloads, Selector::MaintenanceLabel, &[stratum("s", &ids, 2)]);
        assert!(matches!(err, Err(StatsError::DegenerateInput(_))));
    }

    #[test]
    fn outcome_names_round_trip() {
        for s in ["downloads", "likes", "popularity", "commit_count", "size_bytes", "co2e_grams", "metric:f1"] {
            assert_eq!(s.parse::<Outcome>().unwrap().to_string(), s);
        }
        assert!("wat".parse::<Outcome>().is_err());
    }
}
