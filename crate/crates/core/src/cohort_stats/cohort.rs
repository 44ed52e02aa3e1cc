use std::collections::{BTreeMap, BTreeSet};

use crate::classifier::RuleTable;
use crate::preprocess::{median, Preprocessor};
use crate::record::MaintenanceCategory;
use crate::store::{SnapshotId, Store};
use crate::stratifier::Selector;

use super::StatsError;

/// A closed cohort: members are the records of the entry snapshot matching
/// every `(attribute, value)` condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDefinition {
    pub name: String,
    pub predicate: Vec<(Selector, String)>,
    pub entry: SnapshotId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortPoint {
    pub snapshot: SnapshotId,
    pub member_count: usize,
    /// Members of the entry set absent from this snapshot.
    pub attrition: usize,
    /// Median per-member downloads change since the previous tracked
    /// snapshot, over members present in both. `None` at the first point.
    pub median_downloads_delta: Option<f64>,
    pub category_mix: BTreeMap<MaintenanceCategory, usize>,
    pub metric_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSeries {
    pub name: String,
    pub members: BTreeSet<String>,
    pub points: Vec<CohortPoint>,
}

impl CohortSeries {
    pub fn snapshots(&self) -> Vec<&SnapshotId> {
        self.points.iter().map(|p| &p.snapshot).collect()
    }

    pub fn member_counts(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.member_count).collect()
    }

    pub fn attrition(&self) -> usize {
        self.points.last().map_or(0, |p| p.attrition)
    }

    pub fn median_delta_series(&self) -> Vec<f64> {
        self.points.iter().filter_map(|p| p.median_downloads_delta).collect()
    }
}

/// Follows a closed cohort across `snapshots`. Membership is evaluated once,
/// on the enriched entry snapshot; later snapshots only lose members.
pub fn track_cohort(
    store: &Store,
    preprocessor: &Preprocessor,
    definition: &CohortDefinition,
    snapshots: &[SnapshotId],
) -> Result<CohortSeries, StatsError> {
    for w in snapshots.windows(2) {
        if w[0] >= w[1] {
            return Err(StatsError::Usage(format!("snapshots out of order: {} then {}", w[0], w[1])));
        }
    }
    if let Some(first) = snapshots.first().filter(|s| **s < definition.entry) {
        return Err(StatsError::Usage(format!("snapshot {first} precedes cohort entry {}", definition.entry)));
    }

    let entry = store.read_snapshot(&definition.entry)?;
    let population: Vec<_> = entry.records.values().cloned().collect();
    let members: BTreeSet<String> = if population.is_empty() {
        BTreeSet::new()
    } else {
        let enriched = preprocessor
            .enrich(&population)
            .map_err(|e| StatsError::Usage(format!("enriching entry snapshot: {e}")))?;
        enriched
            .records
            .iter()
            .filter(|r| definition.predicate.iter().all(|(sel, want)| sel.value_of(r) == *want))
            .map(|r| r.record.model_id.clone())
            .collect()
    };

    let table = RuleTable::default();
    let mut points = Vec::with_capacity(snapshots.len());
    let mut previous: Option<BTreeMap<String, u64>> = None;
    for id in snapshots {
        let snap = store.read_snapshot(id)?;
        let surviving: Vec<_> = members.iter().filter_map(|m| snap.records.get(m)).collect();
        let downloads: BTreeMap<String, u64> =
            surviving.iter().map(|r| (r.model_id.clone(), r.downloads)).collect();
        let median_downloads_delta = previous.as_ref().and_then(|prev| {
            let deltas: Vec<f64> = downloads
                .iter()
                .filter_map(|(m, d)| prev.get(m).map(|p| *d as f64 - *p as f64))
                .collect();
            median(&deltas)
        });

        let mut category_mix: BTreeMap<MaintenanceCategory, usize> =
            MaintenanceCategory::PRIORITY.into_iter().map(|c| (c, 0)).collect();
        for c in snap.commit_log.iter().filter(|c| members.contains(&c.model_id)) {
            *category_mix.entry(c.category.unwrap_or_else(|| table.classify(&c.message))).or_default() += 1;
        }

        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &surviving {
            for (k, v) in &r.metrics {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        points.push(CohortPoint {
            snapshot: id.clone(),
            member_count: surviving.len(),
            attrition: members.len() - surviving.len(),
            median_downloads_delta,
            category_mix,
            metric_means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        });
        previous = Some(downloads);
    }
    Ok(CohortSeries { name: definition.name.clone(), members, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{CommitRecord, ModelRecord};
    use chrono::{DateTime, TimeZone, Utc};

    fn t(day: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, day, 12, 0, 0).unwrap()
    }

    fn population(n: usize, downloads: u64, prefix: &str, tag: &str) -> Vec<ModelRecord> {
        (0..n)
            .map(|i| {
                let mut r = ModelRecord::new(format!("{prefix}{i:02}"), t(1));
                r.downloads = downloads + i as u64;
                r.tags = vec![tag.to_owned()];
                r
            })
            .collect()
    }

    fn def(entry: SnapshotId) -> CohortDefinition {
        CohortDefinition { name: "nlp".into(), predicate: vec![(Selector::Domain, "NLP".into())], entry }
    }

    #[test]
    fn flat_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut recs = population(10, 100, "nlp", "text-generation");
        recs.extend(population(5, 100, "cv", "image-classification"));
        let ids: Vec<SnapshotId> =
            (1..=3).map(|d| store.write_snapshot(&recs, &[], t(d)).unwrap()).collect();
        let s = track_cohort(&store, &Preprocessor::default(), &def(ids[0].clone()), &ids).unwrap();
        assert_eq!(s.member_counts(), vec![10, 10, 10]);
        assert_eq!(s.attrition(), 0);
        assert_eq!(s.median_delta_series(), vec![0.0, 0.0]);
        assert!(s.members.iter().all(|m| m.starts_with("nlp")));
    }

    #[test]
    fn deletions_and_drift() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let base = population(10, 100, "nlp", "text-generation");
        let commit = CommitRecord {
            model_id: "nlp00".into(),
            sha: "ab".into(),
            message: "fix crash".into(),
            timestamp: t(1),
            files_edited: None,
            category: None,
        };
        let s1 = store.write_snapshot(&base, std::slice::from_ref(&commit), t(1)).unwrap();
        let mut second: Vec<ModelRecord> = base[2..].to_vec();
        second.iter_mut().for_each(|r| r.downloads += 10);
        // A model created later never joins the closed cohort.
        second.extend(population(1, 0, "late", "text-generation"));
        let s2 = store.write_snapshot(&second, &[], t(2)).unwrap();
        let mut third = second.clone();
        third.iter_mut().for_each(|r| r.downloads += 10);
        let s3 = store.write_snapshot(&third, &[], t(3)).unwrap();

        let ids = vec![s1.clone(), s2, s3];
        let series = track_cohort(&store, &Preprocessor::default(), &def(s1), &ids).unwrap();
        assert_eq!(series.member_counts(), vec![10, 8, 8]);
        assert_eq!(series.attrition(), 2);
        assert_eq!(series.median_delta_series(), vec![10.0, 10.0]);
        assert_eq!(series.points[0].category_mix[&MaintenanceCategory::Corrective], 1);
        assert!(!series.members.contains("late00"));
    }

    #[test]
    fn unknown_snapshot_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let s1 = store.write_snapshot(&population(3, 1, "m", "fill-mask"), &[], t(1)).unwrap();
        let missing = SnapshotId::from_time(t(9));
        let err = track_cohort(&store, &Preprocessor::default(), &def(s1.clone()), &[s1, missing]);
        assert!(matches!(err, Err(StatsError::NotFound(_))));
    }
}
