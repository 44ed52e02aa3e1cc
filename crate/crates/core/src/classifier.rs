//! Maintenance-category labeling of commit messages.
//!
//! The built-in [`RuleTable`] is a keyword classifier. Keywords are word
//! stems: a keyword matches when a word of the message starts with it, and a
//! multi-word keyword matches consecutive words. Categories are tried in
//! priority order Corrective, Adaptive, Perfective.
//!
//! An external classifier can be plugged in through [`ClassifierPlugin`],
//! which speaks a line protocol: one message per line in, one label per line
//! out.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Stdio;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};

use crate::record::{CommitRecord, MaintenanceCategory};

pub const CORRECTIVE_KEYWORDS: &[&str] = &["fix", "bug", "error", "fail", "crash", "patch", "defect", "repair"];
pub const ADAPTIVE_KEYWORDS: &[&str] =
    &["upgrade", "update dependency", "migrate", "bump", "compatib", "deprecat", "port"];
pub const PERFECTIVE_KEYWORDS: &[&str] =
    &["improve", "refactor", "clean", "optimi", "perf", "enhance", "document", "readme", "add"];

#[derive(Debug, Clone)]
pub struct RuleTable {
    rules: Vec<(MaintenanceCategory, Vec<Vec<String>>)>,
}

impl Default for RuleTable {
    fn default() -> Self {
        let cat = |c, kws: &[&str]| {
            (c, kws.iter().map(|k| k.split_whitespace().map(str::to_owned).collect()).collect())
        };
        RuleTable {
            rules: vec![
                cat(MaintenanceCategory::Corrective, CORRECTIVE_KEYWORDS),
                cat(MaintenanceCategory::Adaptive, ADAPTIVE_KEYWORDS),
                cat(MaintenanceCategory::Perfective, PERFECTIVE_KEYWORDS),
            ],
        }
    }
}

fn words(message: &str) -> Vec<String> {
    message
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn phrase_matches(words: &[String], stems: &[String]) -> bool {
    words.windows(stems.len()).any(|w| w.iter().zip(stems).all(|(word, stem)| word.starts_with(stem.as_str())))
}

impl RuleTable {
    pub fn classify(&self, message: &str) -> MaintenanceCategory {
        let words = words(message);
        self.rules
            .iter()
            .find(|(_, kws)| kws.iter().any(|k| phrase_matches(&words, k)))
            .map(|(c, _)| *c)
            .unwrap_or(MaintenanceCategory::Unclassified)
    }
}

pub fn classify_commit(message: &str) -> MaintenanceCategory {
    RuleTable::default().classify(message)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusSummary {
    pub counts: BTreeMap<MaintenanceCategory, usize>,
    pub majority: BTreeMap<String, MaintenanceCategory>,
}

impl CorpusSummary {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Majority label with ties going to the higher-priority category.
pub fn majority(counts: &BTreeMap<MaintenanceCategory, usize>) -> MaintenanceCategory {
    MaintenanceCategory::PRIORITY
        .into_iter()
        .rev()
        .max_by_key(|c| counts.get(c).copied().unwrap_or(0))
        .expect("non-empty priority list")
}

/// Counts per category and the majority category of each model. Commits
/// carrying a category keep it; the rest are classified with `table`.
pub fn classify_corpus(commits: &[CommitRecord], table: &RuleTable) -> CorpusSummary {
    let mut counts: BTreeMap<MaintenanceCategory, usize> =
        MaintenanceCategory::PRIORITY.into_iter().map(|c| (c, 0)).collect();
    let mut per_model: BTreeMap<String, BTreeMap<MaintenanceCategory, usize>> = BTreeMap::new();
    for c in commits {
        let label = c.category.unwrap_or_else(|| table.classify(&c.message));
        *counts.entry(label).or_default() += 1;
        *per_model.entry(c.model_id.clone()).or_default().entry(label).or_default() += 1;
    }
    let majority = per_model.into_iter().map(|(m, c)| (m, majority(&c))).collect();
    CorpusSummary { counts, majority }
}

#[derive(Debug, thiserror::Error)]
pub enum PluginError {
    #[error("plugin timed out after {0:?}")]
    Timeout(Duration),
    #[error("plugin protocol violation: {0}")]
    Protocol(String),
    #[error("plugin unreachable: {0}")]
    Unreachable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PluginTarget {
    /// Executable fed messages on stdin.
    Command(PathBuf),
    /// HTTP endpoint receiving messages as a POST body.
    Endpoint(String),
}

#[derive(Debug, Clone)]
pub struct ClassifierPlugin {
    pub target: PluginTarget,
    pub batch_size: usize,
    pub timeout: Duration,
}

fn encode_batch(messages: &[String]) -> String {
    let mut body = String::new();
    for m in messages {
        body.extend(m.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }));
        body.push('\n');
    }
    body
}

fn decode_labels(output: &str, expected: usize) -> Result<Vec<MaintenanceCategory>, PluginError> {
    let labels = output
        .lines()
        .map(|l| l.trim().parse::<MaintenanceCategory>().map_err(PluginError::Protocol))
        .collect::<Result<Vec<_>, _>>()?;
    if labels.len() != expected {
        return Err(PluginError::Protocol(format!("expected {expected} labels, got {}", labels.len())));
    }
    Ok(labels)
}

impl ClassifierPlugin {
    async fn run_batch(&self, batch: &[String]) -> Result<Vec<MaintenanceCategory>, PluginError> {
        let body = encode_batch(batch);
        let output = match &self.target {
            PluginTarget::Command(path) => tokio::time::timeout(self.timeout, run_command(path, body))
                .await
                .map_err(|_| PluginError::Timeout(self.timeout))??,
            PluginTarget::Endpoint(url) => {
                let client = reqwest::Client::builder()
                    .timeout(self.timeout)
                    .build()
                    .map_err(|e| PluginError::Unreachable(e.to_string()))?;
                let resp = client
                    .post(url)
                    .header("content-type", "text/plain; charset=utf-8")
                    .body(body)
                    .send()
                    .await
                    .map_err(|e| if e.is_timeout() { PluginError::Timeout(self.timeout) } else { PluginError::Unreachable(e.to_string()) })?;
                if !resp.status().is_success() {
                    return Err(PluginError::Protocol(format!("HTTP {}", resp.status())));
                }
                resp.text().await.map_err(|e| if e.is_timeout() { PluginError::Timeout(self.timeout) } else { PluginError::Protocol(e.to_string()) })?
            }
        };
        decode_labels(&output, batch.len())
    }

    /// Labels `messages` in sequential batches of `batch_size`.
    pub async fn classify(&self, messages: &[String]) -> Result<Vec<MaintenanceCategory>, PluginError> {
        let mut out = Vec::with_capacity(messages.len());
        for batch in messages.chunks(self.batch_size.max(1)) {
            out.extend(self.run_batch(batch).await?);
        }
        Ok(out)
    }
}

async fn run_command(path: &PathBuf, input: String) -> Result<String, PluginError> {
    let mut child = tokio::process::Command::new(path)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| PluginError::Unreachable(format!("{}: {e}", path.display())))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let mut stdout = child.stdout.take().expect("piped stdout");
    let writer = async move {
        // A plugin may exit without draining its input.
        let _ = stdin.write_all(input.as_bytes()).await;
        drop(stdin);
    };
    let mut buf = String::new();
    let reader = stdout.read_to_string(&mut buf);
    let (_, read) = tokio::join!(writer, reader);
    read.map_err(|e| PluginError::Protocol(format!("reading plugin output: {e}")))?;
    let status = child.wait().await.map_err(|e| PluginError::Protocol(e.to_string()))?;
    if !status.success() {
        return Err(PluginError::Protocol(format!("plugin exited with {status}")));
    }
    Ok(buf)
}

pub async fn classify_via_plugin(
    plugin: &ClassifierPlugin,
    messages: &[String],
) -> Result<Vec<MaintenanceCategory>, PluginError> {
    plugin.classify(messages).await
}
