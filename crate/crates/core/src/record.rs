//! Canonical data model for hub models and their commits, plus parsing of
//! raw hub documents (metadata JSON and model-card text) into validated
//! records.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("required field `{0}` is missing")]
    RequiredField(&'static str),
    #[error("field `{field}` out of range: {detail}")]
    Range { field: &'static str, detail: String },
    #[error("field `{field}` has the wrong type or format: {detail}")]
    Format { field: &'static str, detail: String },
}

/// Application domain of a model, derived from its tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub enum Domain {
    #[serde(rename = "NLP")]
    Nlp,
    ComputerVision,
    Multimodal,
    Audio,
    ReinforcementLearning,
    #[default]
    Unknown,
}

impl Domain {
    pub const ALL: [Domain; 6] = [
        Domain::Nlp,
        Domain::ComputerVision,
        Domain::Multimodal,
        Domain::Audio,
        Domain::ReinforcementLearning,
        Domain::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Nlp => "NLP",
            Domain::ComputerVision => "ComputerVision",
            Domain::Multimodal => "Multimodal",
            Domain::Audio => "Audio",
            Domain::ReinforcementLearning => "ReinforcementLearning",
            Domain::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown domain `{s}`"))
    }
}

/// Swanson maintenance category of a commit, plus a catch-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MaintenanceCategory {
    Corrective,
    Adaptive,
    Perfective,
    Unclassified,
}

impl MaintenanceCategory {
    /// Priority order, highest first.
    pub const PRIORITY: [MaintenanceCategory; 4] = [
        MaintenanceCategory::Corrective,
        MaintenanceCategory::Adaptive,
        MaintenanceCategory::Perfective,
        MaintenanceCategory::Unclassified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaintenanceCategory::Corrective => "Corrective",
            MaintenanceCategory::Adaptive => "Adaptive",
            MaintenanceCategory::Perfective => "Perfective",
            MaintenanceCategory::Unclassified => "Unclassified",
        }
    }
}

impl fmt::Display for MaintenanceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaintenanceCategory {
    type Err = String;

    /// Exact, case-sensitive match: this is also the plugin wire format.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::PRIORITY
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("invalid label `{s}`"))
    }
}

/// One hub model. Field order here is the canonical JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub created_at: DateTime<Utc>,
    pub last_modified: Option<DateTime<Utc>>,
    pub size_bytes: Option<u64>,
    pub downloads: u64,
    pub likes: u64,
    pub tags: Vec<String>,
    pub domain: Domain,
    pub metrics: BTreeMap<String, f64>,
    pub co2e_grams: Option<f64>,
    pub hardware: Option<String>,
    pub region: Option<String>,
    pub card_text: String,
    pub commit_count: u64,
    pub discussion_count: u64,
    pub discussion_titles: Vec<String>,
    pub library: Option<String>,
}

impl ModelRecord {
    pub fn new(model_id: impl Into<String>, created_at: DateTime<Utc>) -> Self {
        ModelRecord {
            model_id: model_id.into(),
            created_at,
            last_modified: None,
            size_bytes: None,
            downloads: 0,
            likes: 0,
            tags: Vec::new(),
            domain: Domain::Unknown,
            metrics: BTreeMap::new(),
            co2e_grams: None,
            hardware: None,
            region: None,
            card_text: String::new(),
            commit_count: 0,
            discussion_count: 0,
            discussion_titles: Vec::new(),
            library: None,
        }
    }

    /// Canonical single-line JSON encoding.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub model_id: String,
    pub sha: String,
    pub message: String,
    pub timestamp: DateTime<Utc>,
    pub files_edited: Option<Vec<String>>,
    pub category: Option<MaintenanceCategory>,
}

/// Emissions context pulled from structured metadata or card text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CarbonInfo {
    pub co2e_grams: Option<f64>,
    pub hardware: Option<String>,
    pub region: Option<String>,
    pub warnings: Vec<String>,
}

/// Everything recovered from one raw detail document.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDocument {
    pub record: ModelRecord,
    pub commits: Vec<CommitRecord>,
    pub warnings: Vec<String>,
}

fn field<'a>(doc: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| doc.get(*n))
}

fn present<'a>(doc: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    field(doc, names).filter(|v| !v.is_null())
}

fn count(doc: &Map<String, Value>, names: &[&str], name: &'static str) -> Result<Option<u64>, ParseError> {
    match present(doc, names) {
        None => Ok(None),
        Some(v) => {
            if let Some(n) = v.as_u64() {
                Ok(Some(n))
            } else if v.as_i64().is_some_and(|n| n < 0) || v.as_f64().is_some_and(|n| n < 0.0) {
                Err(ParseError::Range { field: name, detail: format!("negative value {v}") })
            } else {
                Err(ParseError::Format { field: name, detail: format!("expected integer, got {v}") })
            }
        }
    }
}

fn string(doc: &Map<String, Value>, names: &[&str], name: &'static str) -> Result<Option<String>, ParseError> {
    match present(doc, names) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(v) => Err(ParseError::Format { field: name, detail: format!("expected string, got {v}") }),
    }
}

fn timestamp(doc: &Map<String, Value>, names: &[&str], name: &'static str) -> Result<Option<DateTime<Utc>>, ParseError> {
    match string(doc, names, name)? {
        None => Ok(None),
        Some(s) => DateTime::parse_from_rfc3339(&s)
            .map(|t| Some(t.with_timezone(&Utc)))
            .map_err(|e| ParseError::Format { field: name, detail: format!("{s}: {e}") }),
    }
}

fn string_list(v: &Value, name: &'static str) -> Result<Vec<String>, ParseError> {
    let items = v
        .as_array()
        .ok_or_else(|| ParseError::Format { field: name, detail: "expected array".into() })?;
    items
        .iter()
        .map(|t| {
            t.as_str()
                .map(str::to_owned)
                .ok_or_else(|| ParseError::Format { field: name, detail: format!("expected string, got {t}") })
        })
        .collect()
}

/// Parses a raw hub document (or a canonical record line) into a record.
pub fn parse_model_record(raw: &Value) -> Result<ModelRecord, ParseError> {
    parse_model_document(raw).map(|p| p.record)
}

/// Parses a raw hub detail document into a record plus its commit list.
///
/// Accepts both hub field names (`id`, `createdAt`, `library_name`, ...) and
/// the canonical ones, so canonical lines parse back to the same value. A
/// canonical field that is present (even as `null`) is taken as-is, and only
/// absent fields are derived from the card text.
pub fn parse_model_document(raw: &Value) -> Result<ParsedDocument, ParseError> {
    let doc = raw
        .as_object()
        .ok_or_else(|| ParseError::Format { field: "document", detail: "expected a JSON object".into() })?;
    let mut warnings = Vec::new();

    let model_id = string(doc, &["model_id", "id", "modelId"], "model_id")?
        .filter(|s| !s.is_empty())
        .ok_or(ParseError::RequiredField("model_id"))?;

    let last_modified = timestamp(doc, &["last_modified", "lastModified"], "last_modified")?;
    let created_at = match timestamp(doc, &["created_at", "createdAt"], "created_at")? {
        Some(t) => t,
        None => {
            warnings.push("created_at absent; using last_modified or epoch".to_owned());
            last_modified.unwrap_or(DateTime::UNIX_EPOCH)
        }
    };

    let card_text = string(doc, &["card_text", "card", "cardText"], "card_text")?.unwrap_or_default();

    let tags = match present(doc, &["tags"]) {
        Some(v) => string_list(v, "tags")?,
        None => Vec::new(),
    };
    let domain = match present(doc, &["domain"]) {
        Some(Value::String(s)) => s
            .parse()
            .map_err(|detail| ParseError::Format { field: "domain", detail })?,
        Some(v) => return Err(ParseError::Format { field: "domain", detail: v.to_string() }),
        None => Domain::Unknown,
    };

    let metrics = match field(doc, &["metrics"]) {
        Some(Value::Object(m)) => {
            let mut out = BTreeMap::new();
            for (k, v) in m {
                let x = v
                    .as_f64()
                    .ok_or_else(|| ParseError::Format { field: "metrics", detail: format!("{k}: {v}") })?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(ParseError::Range { field: "metrics", detail: format!("{k}={x} outside [0,1]") });
                }
                out.insert(k.clone(), x);
            }
            out
        }
        Some(Value::Null) => BTreeMap::new(),
        Some(v) => return Err(ParseError::Format { field: "metrics", detail: v.to_string() }),
        None => extract_metrics(&card_text),
    };

    let (co2e_grams, hardware, region) = if doc.contains_key("co2e_grams") {
        let co2 = match present(doc, &["co2e_grams"]) {
            None => None,
            Some(v) => {
                let x = v
                    .as_f64()
                    .ok_or_else(|| ParseError::Format { field: "co2e_grams", detail: v.to_string() })?;
                if x < 0.0 {
                    return Err(ParseError::Range { field: "co2e_grams", detail: format!("negative value {x}") });
                }
                Some(x)
            }
        };
        (co2, string(doc, &["hardware"], "hardware")?, string(doc, &["region"], "region")?)
    } else {
        let carbon = extract_carbon(raw, &card_text);
        warnings.extend(carbon.warnings);
        (carbon.co2e_grams, carbon.hardware, carbon.region)
    };

    let commits = match present(doc, &["commits"]) {
        Some(v) => parse_commits(&model_id, v, &mut warnings)?,
        None => Vec::new(),
    };
    let commit_count = count(doc, &["commit_count"], "commit_count")?.unwrap_or(commits.len() as u64);

    let discussions = present(doc, &["discussions"]).and_then(Value::as_object);
    let discussion_count = match discussions {
        Some(d) => count(d, &["count"], "discussions.count")?,
        None => count(doc, &["discussion_count"], "discussion_count")?,
    }
    .unwrap_or(0);
    let discussion_titles = match discussions.and_then(|d| present(d, &["titles"])) {
        Some(v) => string_list(v, "discussions.titles")?,
        None => match present(doc, &["discussion_titles"]) {
            Some(v) => string_list(v, "discussion_titles")?,
            None => Vec::new(),
        },
    };

    let record = ModelRecord {
        model_id,
        created_at,
        last_modified,
        size_bytes: count(doc, &["size_bytes", "usedStorage", "size"], "size_bytes")?,
        downloads: count(doc, &["downloads"], "downloads")?.unwrap_or(0),
        likes: count(doc, &["likes"], "likes")?.unwrap_or(0),
        tags,
        domain,
        metrics,
        co2e_grams,
        hardware,
        region,
        card_text,
        commit_count,
        discussion_count,
        discussion_titles,
        library: string(doc, &["library", "library_name"], "library")?,
    };
    Ok(ParsedDocument { record, commits, warnings })
}

fn parse_commits(model_id: &str, v: &Value, warnings: &mut Vec<String>) -> Result<Vec<CommitRecord>, ParseError> {
    let items = v
        .as_array()
        .ok_or_else(|| ParseError::Format { field: "commits", detail: "expected array".into() })?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let c = item
            .as_object()
            .ok_or_else(|| ParseError::Format { field: "commits", detail: "expected object".into() })?;
        let sha = string(c, &["sha", "commit_id", "id"], "commits.sha")?.ok_or(ParseError::RequiredField("commits.sha"))?;
        if sha.is_empty() || !sha.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ParseError::Format { field: "commits.sha", detail: format!("`{sha}` is not hex") });
        }
        if !seen.insert(sha.clone()) {
            warnings.push(format!("duplicate commit {sha} dropped"));
            continue;
        }
        let message = string(c, &["message", "title"], "commits.message")?.unwrap_or_default();
        let timestamp = timestamp(c, &["timestamp", "date", "created_at"], "commits.timestamp")?
            .ok_or(ParseError::RequiredField("commits.timestamp"))?;
        let files_edited = match present(c, &["files_edited", "files"]) {
            Some(v) => Some(string_list(v, "commits.files_edited")?),
            None => None,
        };
        let category = match present(c, &["category"]) {
            Some(Value::String(s)) => Some(
                s.parse()
                    .map_err(|detail| ParseError::Format { field: "commits.category", detail })?,
            ),
            _ => None,
        };
        out.push(CommitRecord { model_id: model_id.to_owned(), sha, message, timestamp, files_edited, category });
    }
    Ok(out)
}

static METRIC_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(accuracy|f1|rouge1)(?:\s*[:=]\s*|\s+)(\d+(?:\.\d+)?)").unwrap()
});

/// Pulls `accuracy`, `f1` and `rouge1` values out of free text.
///
/// Values above 1 are read as percentages. The first mention of each name
/// wins, and anything that still falls outside [0,1] is dropped.
pub fn extract_metrics(card_text: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for cap in METRIC_RE.captures_iter(card_text) {
        let name = cap[1].to_ascii_lowercase();
        if out.contains_key(&name) {
            continue;
        }
        let Ok(mut value) = cap[2].parse::<f64>() else { continue };
        if value > 1.0 {
            value /= 100.0;
        }
        if (0.0..=1.0).contains(&value) {
            out.insert(name, value);
        }
    }
    out
}

static CARD_CO2_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)co2[_ ]?(?:eq)?[^\d\n]*?(\d+(?:\.\d+)?)(?:\s*(kilograms?|kg|grams?|g|tonnes?|tons?|t)\b)?").unwrap()
});
static CARD_HARDWARE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bhardware(?:[_ ]used)?\s*[:=]\s*([^,;\n]+)").unwrap());
static CARD_REGION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:region|geographical[_ ]location|location)\s*[:=]\s*([^,;\n]+)").unwrap()
});
static QUANTITY_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(\d+(?:\.\d+)?)\s*(kilograms?|kg|grams?|g|tonnes?|tons?|t)?\s*$").unwrap()
});

fn unit_factor(unit: &str) -> f64 {
    match unit.to_ascii_lowercase().as_str() {
        "kg" | "kilogram" | "kilograms" => 1e3,
        "t" | "tonne" | "tonnes" | "ton" | "tons" => 1e6,
        _ => 1.0,
    }
}

/// Converts a value with an optional unit to grams. Without a unit, values
/// of 100 or more are grams and smaller ones kilograms; both cases warn.
fn to_grams(value: f64, unit: Option<&str>, warnings: &mut Vec<String>) -> f64 {
    match unit {
        Some(u) => value * unit_factor(u),
        None if value >= 100.0 => {
            warnings.push(format!("emissions {value} without unit; assumed grams"));
            value
        }
        None => {
            warnings.push(format!("emissions {value} without unit; assumed kilograms"));
            value * 1e3
        }
    }
}

fn structured_quantity(v: &Value, unit_hint: Option<&str>, warnings: &mut Vec<String>) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64().map(|x| to_grams(x, unit_hint, warnings)),
        Value::String(s) => {
            let cap = QUANTITY_RE.captures(s)?;
            let x: f64 = cap[1].parse().ok()?;
            let unit = cap.get(2).map(|m| m.as_str()).or(unit_hint);
            Some(to_grams(x, unit, warnings))
        }
        _ => None,
    }
}

fn structured_carbon(raw: &Value, warnings: &mut Vec<String>) -> CarbonInfo {
    let mut info = CarbonInfo::default();
    let Some(doc) = raw.as_object() else { return info };
    let card_data = doc.get("cardData").and_then(Value::as_object);
    let entry = doc
        .get("co2_eq_emissions")
        .or_else(|| card_data.and_then(|c| c.get("co2_eq_emissions")));
    match entry {
        Some(Value::Object(o)) => {
            let unit = o.get("unit").and_then(Value::as_str);
            info.co2e_grams = o.get("emissions").and_then(|e| structured_quantity(e, unit, warnings));
            info.hardware = o.get("hardware_used").or_else(|| o.get("hardware")).and_then(Value::as_str).map(str::to_owned);
            info.region = o
                .get("geographical_location")
                .or_else(|| o.get("region"))
                .and_then(Value::as_str)
                .map(str::to_owned);
        }
        Some(v) => info.co2e_grams = structured_quantity(v, None, warnings),
        None => {}
    }
    info.co2e_grams = info.co2e_grams.filter(|g| *g >= 0.0);
    info
}

fn card_carbon(card_text: &str, warnings: &mut Vec<String>) -> CarbonInfo {
    let co2e_grams = CARD_CO2_RE.captures(card_text).and_then(|cap| {
        let value: f64 = cap[1].parse().ok()?;
        Some(to_grams(value, cap.get(2).map(|m| m.as_str()), warnings))
    });
    let grab = |re: &Regex| re.captures(card_text).map(|c| c[1].trim().to_owned()).filter(|s| !s.is_empty());
    CarbonInfo { co2e_grams, hardware: grab(&CARD_HARDWARE_RE), region: grab(&CARD_REGION_RE), warnings: Vec::new() }
}

/// Emissions, hardware and region. Structured metadata wins over card text;
/// disagreement is kept as a warning.
pub fn extract_carbon(raw: &Value, card_text: &str) -> CarbonInfo {
    let mut warnings = Vec::new();
    let structured = structured_carbon(raw, &mut warnings);
    let mut card_warnings = Vec::new();
    let card = card_carbon(card_text, &mut card_warnings);

    let mut pick = |name: &str, s: Option<f64>, c: Option<f64>| match (s, c) {
        (Some(s), Some(c)) => {
            if (s - c).abs() > 1e-9 * s.abs().max(1.0) {
                warnings.push(format!("{name}: structured {s} conflicts with card {c}; kept structured"));
            }
            Some(s)
        }
        (Some(s), None) => Some(s),
        (None, c) => c,
    };
    let co2e_grams = pick("co2e_grams", structured.co2e_grams, card.co2e_grams);
    if structured.co2e_grams.is_none() && card.co2e_grams.is_some() {
        warnings.append(&mut card_warnings);
    }
    let mut pick_str = |name: &str, s: Option<String>, c: Option<String>| match (s, c) {
        (Some(s), Some(c)) => {
            if s != c {
                warnings.push(format!("{name}: structured `{s}` conflicts with card `{c}`; kept structured"));
            }
            Some(s)
        }
        (s, c) => s.or(c),
    };
    let hardware = pick_str("hardware", structured.hardware, card.hardware);
    let region = pick_str("region", structured.region, card.region);
    CarbonInfo { co2e_grams, hardware, region, warnings }
}
