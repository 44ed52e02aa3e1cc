//! Append-only snapshot store.
//!
//! Layout under the store root:
//!
//! ```text
//! index.txt                    one snapshot id per line, ascending
//! <snapshot_id>/models.jsonl   canonical ModelRecord lines, sorted by id
//! <snapshot_id>/commits.jsonl  CommitRecord lines
//! ```
//!
//! Snapshot directories are written once through a temporary directory and
//! an atomic rename, and are never touched again. Writers take an exclusive
//! `.lock` file; readers do not lock.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

use crate::record::{CommitRecord, ModelRecord};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("snapshot {0} already exists")]
    Conflict(SnapshotId),
    #[error("snapshot {new} is not later than the latest snapshot {latest}")]
    OutOfOrder { new: SnapshotId, latest: SnapshotId },
    #[error("snapshot {0} not found")]
    NotFound(String),
    #[error("store is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("{file}:{line}: cannot decode: {detail}")]
    Decode { file: PathBuf, line: usize, detail: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("commit-file import, row {row}: {detail}")]
    Import { row: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// ISO-8601 UTC timestamp at second precision, e.g. `2023-11-06T00:00:00Z`.
/// String order equals chronological order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SnapshotId(String);

impl SnapshotId {
    pub fn from_time(at: DateTime<Utc>) -> Self {
        SnapshotId(at.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn parse(s: &str) -> Result<Self, StoreError> {
        let t = DateTime::parse_from_rfc3339(s.trim())
            .map_err(|e| StoreError::Usage(format!("`{s}` is not an ISO-8601 timestamp: {e}")))?;
        Ok(SnapshotId::from_time(t.with_timezone(&Utc)))
    }

    pub fn time(&self) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(&self.0).expect("snapshot ids are valid timestamps").with_timezone(&Utc)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SnapshotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub id: SnapshotId,
    pub records: BTreeMap<String, ModelRecord>,
    pub commit_log: Vec<CommitRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldChange {
    Numeric { before: u64, after: u64, delta: i64 },
    Value { before: Value, after: Value },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnapshotDelta {
    pub added: BTreeSet<String>,
    pub removed: BTreeSet<String>,
    pub changed: BTreeMap<String, BTreeMap<String, FieldChange>>,
}

impl SnapshotDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

const NUMERIC_FIELDS: [&str; 3] = ["downloads", "likes", "commit_count"];

/// Field-level differences between two versions of one record.
pub fn diff_records(a: &ModelRecord, b: &ModelRecord) -> BTreeMap<String, FieldChange> {
    let (Value::Object(va), Value::Object(vb)) =
        (serde_json::to_value(a).expect("serializable"), serde_json::to_value(b).expect("serializable"))
    else {
        unreachable!("records serialize to objects")
    };
    let mut out = BTreeMap::new();
    for (k, before) in &va {
        let after = vb.get(k).unwrap_or(&Value::Null);
        if before == after {
            continue;
        }
        let change = match (NUMERIC_FIELDS.contains(&k.as_str()), before.as_u64(), after.as_u64()) {
            (true, Some(x), Some(y)) => FieldChange::Numeric { before: x, after: y, delta: y as i64 - x as i64 },
            _ => FieldChange::Value { before: before.clone(), after: after.clone() },
        };
        out.insert(k.clone(), change);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImportReport {
    pub enriched: usize,
    /// (row number, sha, model id) of rows naming no known commit.
    pub unmatched: Vec<(usize, String, String)>,
}

/// Attaches file lists from a headerless `sha,model_id,file_path` CSV export
/// to matching commits. Returns how many commits gained files.
pub fn import_commit_files(path: &Path, commits: &mut [CommitRecord]) -> Result<ImportReport, StoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| StoreError::Import { row: 0, detail: e.to_string() })?;
    let index: HashMap<(String, String), usize> = commits
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.sha.clone(), c.model_id.clone()), i))
        .collect();
    let mut touched = BTreeSet::new();
    let mut report = ImportReport::default();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| StoreError::Import { row: row_no, detail: e.to_string() })?;
        if row.len() != 3 {
            return Err(StoreError::Import { row: row_no, detail: format!("expected 3 columns, found {}", row.len()) });
        }
        let (sha, model, file) = (row[0].trim(), row[1].trim(), row[2].trim());
        if sha.is_empty() || model.is_empty() || file.is_empty() {
            return Err(StoreError::Import { row: row_no, detail: "empty column".into() });
        }
        match index.get(&(sha.to_owned(), model.to_owned())) {
            Some(&c) => {
                commits[c].files_edited.get_or_insert_with(Vec::new).push(file.to_owned());
                touched.insert(c);
            }
            None => report.unmatched.push((row_no, sha.to_owned(), model.to_owned())),
        }
    }
    report.enriched = touched.len();
    Ok(report)
}

struct WriteLock {
    path: PathBuf,
}

impl WriteLock {
    fn acquire(root: &Path) -> Result<WriteLock, StoreError> {
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(WriteLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(StoreError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.txt")
    }

    pub fn snapshot_dir(&self, id: &SnapshotId) -> PathBuf {
        self.root.join(id.as_str())
    }

    pub fn list_snapshots(&self) -> Result<Vec<SnapshotId>, StoreError> {
        let text = match fs::read_to_string(self.index_path()) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        text.lines().filter(|l| !l.trim().is_empty()).map(SnapshotId::parse).collect()
    }

    pub fn latest(&self) -> Result<Option<SnapshotId>, StoreError> {
        Ok(self.list_snapshots()?.pop())
    }

    /// Resolves a user-supplied id, or the latest snapshot when `None`.
    pub fn resolve(&self, id: Option<&str>) -> Result<SnapshotId, StoreError> {
        let known = self.list_snapshots()?;
        match id {
            None => known.last().cloned().ok_or_else(|| StoreError::NotFound("(store is empty)".into())),
            Some(s) => {
                let id = SnapshotId::parse(s).map_err(|_| StoreError::NotFound(s.to_owned()))?;
                if known.contains(&id) { Ok(id) } else { Err(StoreError::NotFound(s.to_owned())) }
            }
        }
    }

    pub fn write_snapshot(
        &self,
        records: &[ModelRecord],
        commits: &[CommitRecord],
        at: DateTime<Utc>,
    ) -> Result<SnapshotId, StoreError> {
        let id = SnapshotId::from_time(at);
        let mut by_id: BTreeMap<&str, &ModelRecord> = BTreeMap::new();
        for r in records {
            if by_id.insert(&r.model_id, r).is_some() {
                return Err(StoreError::Usage(format!("duplicate model id {}", r.model_id)));
            }
        }

        let _lock = WriteLock::acquire(&self.root)?;
        let known = self.list_snapshots()?;
        if known.contains(&id) || self.snapshot_dir(&id).exists() {
            return Err(StoreError::Conflict(id));
        }
        if let Some(latest) = known.last().filter(|l| **l > id) {
            return Err(StoreError::OutOfOrder { new: id, latest: latest.clone() });
        }

        let tmp = self.root.join(format!(".tmp-{}", id.as_str()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        write_lines(&tmp.join("models.jsonl"), by_id.values())?;
        write_lines(&tmp.join("commits.jsonl"), commits.iter())?;
        fs::rename(&tmp, self.snapshot_dir(&id))?;

        let mut index = OpenOptions::new().create(true).append(true).open(self.index_path())?;
        writeln!(index, "{id}")?;
        index.sync_all()?;
        Ok(id)
    }

    pub fn read_snapshot(&self, id: &SnapshotId) -> Result<Snapshot, StoreError> {
        if !self.list_snapshots()?.contains(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let dir = self.snapshot_dir(id);
        let models: Vec<ModelRecord> = read_lines(&dir.join("models.jsonl"))?;
        let commit_log: Vec<CommitRecord> = read_lines(&dir.join("commits.jsonl"))?;
        let records = models.into_iter().map(|r| (r.model_id.clone(), r)).collect();
        Ok(Snapshot { id: id.clone(), records, commit_log })
    }

    /// Delta from snapshot `a` to the later snapshot `b`.
    pub fn diff_snapshots(&self, a: &SnapshotId, b: &SnapshotId) -> Result<SnapshotDelta, StoreError> {
        if a > b {
            return Err(StoreError::Usage(format!("diff order reversed: {a} is later than {b}")));
        }
        let sa = self.read_snapshot(a)?;
        let sb = self.read_snapshot(b)?;
        Ok(diff(&sa, &sb))
    }
}

pub fn diff(a: &Snapshot, b: &Snapshot) -> SnapshotDelta {
    let mut delta = SnapshotDelta::default();
    for (id, ra) in &a.records {
        match b.records.get(id) {
            None => {
                delta.removed.insert(id.clone());
            }
            Some(rb) => {
                let changes = diff_records(ra, rb);
                if !changes.is_empty() {
                    delta.changed.insert(id.clone(), changes);
                }
            }
        }
    }
    delta.added = b.records.keys().filter(|id| !a.records.contains_key(*id)).cloned().collect();
    delta
}

fn write_lines<'a, T: Serialize + 'a>(path: &Path, items: impl Iterator<Item = &'a T>) -> Result<(), StoreError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    let file = w.into_inner().map_err(|e| e.into_error())?;
    file.sync_all()?;
    Ok(())
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Decode {
                file: path.to_owned(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(day: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, day, 0, 0, 0).unwrap()
    }

    fn rec(id: &str, downloads: u64) -> ModelRecord {
        let mut r = ModelRecord::new(id, t(1));
        r.downloads = downloads;
        r
    }

    fn commit(model: &str, sha: &str) -> CommitRecord {
        CommitRecord {
            model_id: model.into(),
            sha: sha.into(),
            message: "msg".into(),
            timestamp: t(1),
            files_edited: None,
            category: None,
        }
    }

    #[test]
    fn write_then_list_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let records = vec![rec("b", 1), rec("a", 2), rec("c", 3)];
        let id = store.write_snapshot(&records, &[commit("a", "ab")], t(2)).unwrap();
        assert_eq!(id.as_str(), "2024-01-02T00:00:00Z");
        assert_eq!(store.list_snapshots().unwrap(), vec![id.clone()]);
        let snap = store.read_snapshot(&id).unwrap();
        assert_eq!(snap.records.len(), 3);
        assert_eq!(snap.records["a"], records[1]);
        assert_eq!(snap.commit_log.len(), 1);
        assert!(!dir.path().join(".lock").exists());
    }

    #[test]
    fn rewrite_same_id_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.write_snapshot(&[rec("a", 1)], &[], t(2)).unwrap();
        assert!(matches!(store.write_snapshot(&[rec("a", 1)], &[], t(2)), Err(StoreError::Conflict(_))));
        assert!(matches!(store.write_snapshot(&[], &[], t(1)), Err(StoreError::OutOfOrder { .. })));
    }

    #[test]
    fn duplicate_record_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.write_snapshot(&[rec("a", 1), rec("a", 2)], &[], t(2)), Err(StoreError::Usage(_))));
    }

    #[test]
    fn held_lock_blocks_writer() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let _held = WriteLock::acquire(dir.path()).unwrap();
        assert!(matches!(store.write_snapshot(&[], &[], t(2)), Err(StoreError::Locked(_))));
    }

    #[test]
    fn unknown_snapshot_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = SnapshotId::from_time(t(5));
        assert!(matches!(store.read_snapshot(&id), Err(StoreError::NotFound(_))));
        assert!(matches!(store.resolve(Some("2024-01-05T00:00:00Z")), Err(StoreError::NotFound(_))));
        assert!(matches!(store.resolve(None), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn corrupted_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.write_snapshot(&[rec("a", 1), rec("b", 2), rec("c", 3)], &[], t(2)).unwrap();
        let path = store.snapshot_dir(&id).join("models.jsonl");
        let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(str::to_owned).collect();
        lines[1] = "{\"model_id\": \"b\", oops".into();
        fs::write(&path, lines.join("\n")).unwrap();
        match store.read_snapshot(&id) {
            Err(StoreError::Decode { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn tolerates_unknown_trailing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.write_snapshot(&[rec("a", 1)], &[], t(2)).unwrap();
        let path = store.snapshot_dir(&id).join("models.jsonl");
        let line = fs::read_to_string(&path).unwrap();
        let extended = line.trim_end().trim_end_matches('}').to_owned() + ",\"future_field\":[1,2]}\n";
        fs::write(&path, extended).unwrap();
        assert_eq!(store.read_snapshot(&id).unwrap().records["a"], rec("a", 1));
    }

    #[test]
    fn diff_identity_and_numeric_delta() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.write_snapshot(&[rec("m", 100)], &[], t(2)).unwrap();
        let b = store.write_snapshot(&[rec("m", 150)], &[], t(3)).unwrap();
        assert!(store.diff_snapshots(&a, &a).unwrap().is_empty());
        let d = store.diff_snapshots(&a, &b).unwrap();
        assert_eq!(d.changed["m"]["downloads"], FieldChange::Numeric { before: 100, after: 150, delta: 50 });
        assert!(matches!(store.diff_snapshots(&b, &a), Err(StoreError::Usage(_))));
    }

    #[test]
    fn diff_counts_match_planted_changes() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let base: Vec<ModelRecord> = (0..50).map(|i| rec(&format!("m{i:02}"), i)).collect();
        let mut next: Vec<ModelRecord> = base[5..].to_vec();
        for r in next.iter_mut().take(20) {
            r.likes += 1;
        }
        next.extend((0..10).map(|i| rec(&format!("new{i}"), 0)));
        let a = store.write_snapshot(&base, &[], t(2)).unwrap();
        let b = store.write_snapshot(&next, &[], t(3)).unwrap();
        let d = store.diff_snapshots(&a, &b).unwrap();
        assert_eq!((d.added.len(), d.removed.len(), d.changed.len()), (10, 5, 20));
        assert!(d.added.is_disjoint(&d.removed));
    }

    #[test]
    fn import_enriches_matching_commits() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("files.csv");
        fs::write(&csv, "aa,m,config.json\nbb,m,model.bin\ncc,m,x.txt\n").unwrap();
        let mut commits = vec![commit("m", "aa"), commit("m", "bb")];
        let report = import_commit_files(&csv, &mut commits).unwrap();
        assert_eq!(report.enriched, 2);
        assert_eq!(report.unmatched, vec![(3, "cc".into(), "m".into())]);
        assert_eq!(commits[0].files_edited.as_deref().unwrap(), ["config.json"]);

        fs::write(&csv, "").unwrap();
        assert_eq!(import_commit_files(&csv, &mut commits).unwrap().enriched, 0);

        fs::write(&csv, "aa,m\n").unwrap();
        assert!(matches!(import_commit_files(&csv, &mut commits), Err(StoreError::Import { row: 1, .. })));
    }
}
