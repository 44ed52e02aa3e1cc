//! Turns parsed records into analysis-ready ones: tag filtering, domain
//! mapping, one-hot tag vectors, popularity scores and the population-level
//! labels (size/popularity quartiles, carbon A-E, maintenance High/Low).
//!
//! Population statistics are computed in one sequential pass before any
//! per-record labeling, so the output depends only on the input set.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::record::{Domain, ModelRecord};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("domain map line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error("reading domain map: {0}")]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_DOMAIN_MAP: &str = include_str!("../config/domain_map.tsv");

const ISO_639_1: &str = "aa ab ae af ak am an ar as av ay az ba be bg bh bi bm bn bo br bs ca ce ch co cr cs cu cv cy \
da de dv dz ee el en eo es et eu fa ff fi fj fo fr fy ga gd gl gn gu gv ha he hi ho hr ht hu hy hz ia id ie ig ii ik \
io is it iu ja jv ka kg ki kj kk kl km kn ko kr ks ku kv kw ky la lb lg li ln lo lt lu lv mg mh mi mk ml mn mr ms mt \
my na nb nd ne ng nl nn no nr nv ny oc oj om or os pa pi pl ps pt qu rm rn ro ru rw sa sc sd se sg si sk sl sm sn so \
sq sr ss st su sv sw ta te tg th ti tk tl tn to tr ts tt tw ty ug uk ur uz ve vi vo wa wo xh yi yo za zh zu";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pattern {
    Glob(String),
    Iso639,
}

impl Pattern {
    fn parse(s: &str) -> Pattern {
        match s {
            "<iso639-1>" => Pattern::Iso639,
            _ => Pattern::Glob(s.to_lowercase()),
        }
    }

    fn matches(&self, tag: &str) -> bool {
        match self {
            Pattern::Iso639 => tag.len() == 2 && ISO_639_1.split(' ').any(|c| c == tag),
            Pattern::Glob(p) => glob_match(p.as_bytes(), tag.as_bytes()),
        }
    }
}

fn glob_match(pat: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pat.len() && (pat[p] == b'?' || pat[p] == text[t]) {
            p += 1;
            t += 1;
        } else if p < pat.len() && pat[p] == b'*' {
            star = Some((p, t));
            p += 1;
        } else if let Some((sp, st)) = star {
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pat[p..].iter().all(|&c| c == b'*')
}

/// Ordered tag-to-domain rules plus the deny-list of auxiliary tags.
#[derive(Debug, Clone)]
pub struct DomainMap {
    rules: Vec<(Pattern, Domain)>,
    deny: Vec<Pattern>,
}

impl DomainMap {
    pub fn parse(text: &str) -> Result<DomainMap, PreprocessError> {
        let mut rules = Vec::new();
        let mut deny = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (pattern, target) = line.split_once('\t').ok_or_else(|| PreprocessError::Config {
                line: i + 1,
                detail: "expected `pattern<TAB>domain`".into(),
            })?;
            let pattern = Pattern::parse(pattern.trim());
            match target.trim() {
                "DENY" => deny.push(pattern),
                d => {
                    let domain = Domain::from_str(d)
                        .map_err(|detail| PreprocessError::Config { line: i + 1, detail })?;
                    rules.push((pattern, domain));
                }
            }
        }
        Ok(DomainMap { rules, deny })
    }

    pub fn load(path: &Path) -> Result<DomainMap, PreprocessError> {
        DomainMap::parse(&std::fs::read_to_string(path)?)
    }

    pub fn is_denied(&self, tag: &str) -> bool {
        self.deny.iter().any(|p| p.matches(tag))
    }

    /// Lower-cases, drops deny-listed tags and collapses duplicates, keeping
    /// first-seen order.
    pub fn filter_tags<S: AsRef<str>>(&self, tags: &[S]) -> Vec<String> {
        let mut seen = HashSet::new();
        tags.iter()
            .map(|t| t.as_ref().trim().to_lowercase())
            .filter(|t| !t.is_empty() && !self.is_denied(t))
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }

    /// Domain of the first rule (in table order) that matches any tag.
    pub fn map_domain<S: AsRef<str>>(&self, tags: &[S]) -> Domain {
        self.rules
            .iter()
            .find(|(p, _)| tags.iter().any(|t| p.matches(&t.as_ref().to_lowercase())))
            .map(|(_, d)| *d)
            .unwrap_or(Domain::Unknown)
    }
}

impl Default for DomainMap {
    fn default() -> Self {
        DomainMap::parse(DEFAULT_DOMAIN_MAP).expect("bundled domain map is valid")
    }
}

/// Sorted, duplicate-free tag vocabulary for one-hot encoding.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary(Vec<String>);

impl Vocabulary {
    pub fn new<I: IntoIterator<Item = String>>(tags: I) -> Self {
        let set: BTreeSet<String> = tags.into_iter().collect();
        Vocabulary(set.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.0.binary_search_by(|t| t.as_str().cmp(tag)).ok()
    }
}

/// Returns the 0/1 vector over `vocabulary` and the number of tags that were
/// not in it.
pub fn one_hot<S: AsRef<str>>(tags: &[S], vocabulary: &Vocabulary) -> (Vec<u8>, usize) {
    let mut bits = vec![0u8; vocabulary.len()];
    let mut oov = 0;
    for t in tags {
        match vocabulary.index_of(t.as_ref()) {
            Some(i) => bits[i] = 1,
            None => oov += 1,
        }
    }
    (bits, oov)
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect()
}

/// Normalized downloads plus normalized likes, each min-max scaled over the
/// input population. A term with zero range contributes 0.
pub fn popularity(records: &[ModelRecord]) -> Result<Vec<f64>, PreprocessError> {
    if records.is_empty() {
        return Err(PreprocessError::Usage("popularity needs at least one record".into()));
    }
    let downloads: Vec<f64> = records.iter().map(|r| r.downloads as f64).collect();
    let likes: Vec<f64> = records.iter().map(|r| r.likes as f64).collect();
    Ok(min_max(&downloads)
        .into_iter()
        .zip(min_max(&likes))
        .map(|(d, l)| d + l)
        .collect())
}

/// Same as [`popularity`] but normalizing within each domain.
pub fn popularity_per_domain(records: &[ModelRecord], domains: &[Domain]) -> Result<Vec<f64>, PreprocessError> {
    if records.is_empty() {
        return Err(PreprocessError::Usage("popularity needs at least one record".into()));
    }
    let mut out = vec![0.0; records.len()];
    let mut groups: BTreeMap<Domain, Vec<usize>> = BTreeMap::new();
    for (i, d) in domains.iter().enumerate() {
        groups.entry(*d).or_default().push(i);
    }
    for idx in groups.values() {
        let subset: Vec<ModelRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        for (&i, p) in idx.iter().zip(popularity(&subset)?) {
            out[i] = p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bin {
    Q1,
    Q2,
    Q3,
    Q4,
    Missing,
}

impl Bin {
    pub fn as_str(self) -> &'static str {
        match self {
            Bin::Q1 => "Q1",
            Bin::Q2 => "Q2",
            Bin::Q3 => "Q3",
            Bin::Q4 => "Q4",
            Bin::Missing => "Missing",
        }
    }
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Quantile with linear interpolation at h = (n-1)q over sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The three quartile cut points of the non-missing values.
pub fn quartile_cuts(values: &[Option<f64>]) -> Result<[f64; 3], PreprocessError> {
    let mut sorted: Vec<f64> = values.iter().flatten().copied().collect();
    if sorted.len() < 4 {
        return Err(PreprocessError::Usage(format!(
            "quartile binning needs at least 4 values, got {}",
            sorted.len()
        )));
    }
    sorted.sort_by(f64::total_cmp);
    Ok([0.25, 0.5, 0.75].map(|q| quantile_sorted(&sorted, q)))
}

pub fn quartile_bins(values: &[Option<f64>]) -> Result<Vec<Bin>, PreprocessError> {
    let [c1, c2, c3] = quartile_cuts(values)?;
    Ok(values
        .iter()
        .map(|v| match *v {
            None => Bin::Missing,
            Some(v) if v <= c1 => Bin::Q1,
            Some(v) if v <= c2 => Bin::Q2,
            Some(v) if v <= c3 => Bin::Q3,
            Some(_) => Bin::Q4,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CarbonLabel {
    A,
    B,
    C,
    D,
    E,
}

impl CarbonLabel {
    pub const ALL: [CarbonLabel; 5] = [CarbonLabel::A, CarbonLabel::B, CarbonLabel::C, CarbonLabel::D, CarbonLabel::E];

    pub fn as_str(self) -> &'static str {
        ["A", "B", "C", "D", "E"][self as usize]
    }
}

/// Quintile of reported emissions among reporting records, A lowest. Tied
/// emissions share the label of their first rank.
pub fn carbon_labels(records: &[ModelRecord]) -> Vec<Option<CarbonLabel>> {
    let mut reporters: Vec<(f64, usize)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.co2e_grams.map(|g| (g, i)))
        .collect();
    reporters.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let m = reporters.len();
    let mut out = vec![None; records.len()];
    let mut first_rank = 0;
    for (rank, &(g, i)) in reporters.iter().enumerate() {
        if rank > 0 && reporters[rank - 1].0 != g {
            first_rank = rank;
        }
        out[i] = Some(CarbonLabel::ALL[first_rank * 5 / m]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MaintenanceLabel {
    High,
    Low,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 })
}

/// High iff the commit count is strictly above the population median.
pub fn maintenance_labels(records: &[ModelRecord]) -> Vec<MaintenanceLabel> {
    let counts: Vec<f64> = records.iter().map(|r| r.commit_count as f64).collect();
    let Some(med) = median(&counts) else { return Vec::new() };
    counts
        .iter()
        .map(|&c| if c > med { MaintenanceLabel::High } else { MaintenanceLabel::Low })
        .collect()
}

/// A record with all derived analysis attributes attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedRecord {
    #[serde(flatten)]
    pub record: ModelRecord,
    pub popularity: f64,
    pub size_bin: Bin,
    pub popularity_bin: Bin,
    pub carbon_label: Option<CarbonLabel>,
    pub maintenance_label: Option<MaintenanceLabel>,
    pub tag_vector: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityScope {
    #[default]
    Global,
    PerDomain,
}

#[derive(Debug, Clone, Default)]
pub struct Preprocessor {
    pub domain_map: DomainMap,
    pub popularity_scope: PopularityScope,
    /// Fixed vocabulary; when absent it is built from the filtered tags of
    /// the input population.
    pub vocabulary: Option<Vocabulary>,
}

#[derive(Debug, Clone)]
pub struct Enrichment {
    pub records: Vec<EnrichedRecord>,
    pub vocabulary: Vocabulary,
    pub out_of_vocabulary: usize,
    pub warnings: Vec<String>,
}

impl Preprocessor {
    pub fn new(domain_map: DomainMap) -> Self {
        Preprocessor { domain_map, ..Default::default() }
    }

    /// Enriches a population. Records are returned sorted by model id.
    pub fn enrich(&self, records: &[ModelRecord]) -> Result<Enrichment, PreprocessError> {
        let mut records = records.to_vec();
        records.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        let mut warnings = Vec::new();

        let filtered: Vec<Vec<String>> = records.iter().map(|r| self.domain_map.filter_tags(&r.tags)).collect();
        for (r, tags) in records.iter_mut().zip(&filtered) {
            r.domain = self.domain_map.map_domain(tags);
        }
        let vocabulary = match &self.vocabulary {
            Some(v) => v.clone(),
            None => Vocabulary::new(filtered.iter().flatten().cloned()),
        };

        let popularity = match self.popularity_scope {
            PopularityScope::Global => popularity(&records)?,
            PopularityScope::PerDomain => {
                let domains: Vec<Domain> = records.iter().map(|r| r.domain).collect();
                popularity_per_domain(&records, &domains)?
            }
        };

        let sizes: Vec<Option<f64>> = records.iter().map(|r| r.size_bytes.map(|s| s as f64)).collect();
        let size_bins = quartile_bins(&sizes).unwrap_or_else(|e| {
            warnings.push(format!("size bins: {e}; all sizes labeled Missing"));
            vec![Bin::Missing; records.len()]
        });
        let pops: Vec<Option<f64>> = popularity.iter().copied().map(Some).collect();
        let pop_bins = quartile_bins(&pops).unwrap_or_else(|e| {
            warnings.push(format!("popularity bins: {e}; all popularity labeled Missing"));
            vec![Bin::Missing; records.len()]
        });
        let carbon = carbon_labels(&records);
        let maintenance = maintenance_labels(&records);

        let mut out_of_vocabulary = 0;
        let enriched = records
            .into_iter()
            .enumerate()
            .map(|(i, record)| {
                let (tag_vector, oov) = one_hot(&filtered[i], &vocabulary);
                out_of_vocabulary += oov;
                EnrichedRecord {
                    record,
                    popularity: popularity[i],
                    size_bin: size_bins[i],
                    popularity_bin: pop_bins[i],
                    carbon_label: carbon[i],
                    maintenance_label: Some(maintenance[i]),
                    tag_vector,
                }
            })
            .collect();
        Ok(Enrichment { records: enriched, vocabulary, out_of_vocabulary, warnings })
    }
}

pub fn write_enriched_jsonl<W: std::io::Write>(mut w: W, records: &[EnrichedRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_enriched_jsonl(text: &str) -> Result<Vec<EnrichedRecord>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}
