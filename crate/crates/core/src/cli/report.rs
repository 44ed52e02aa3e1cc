use std::collections::BTreeMap;
use std::fmt::Write;

use chrono::{DateTime, SecondsFormat, Utc};

use crate::preprocess::EnrichedRecord;
use crate::record::{Domain, MaintenanceCategory};
use crate::stratifier::{SampledModel, StratumKey};

/// Header line of the strata table; rows follow as `key | size | proportion | allocated`.
pub const STRATA_HEADER: &str = "stratum_key | size | proportion | allocated";
pub const PROVENANCE_MARKER: &str = "== Provenance ==";

#[derive(Debug, Clone, PartialEq)]
pub struct StrataRow {
    pub key: StratumKey,
    pub size: usize,
    pub proportion: f64,
    pub allocated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub method: String,
    pub stratum: String,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub snapshots: Vec<String>,
    pub generated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default)]
pub struct Analyses {
    pub categories: Option<BTreeMap<MaintenanceCategory, usize>>,
    pub strata: Vec<StrataRow>,
    pub sample: Vec<SampledModel>,
    pub stats: Vec<StatsRow>,
    pub skipped: Vec<String>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "stratum", "statistic", "p_value", "n1", "n2", "notes"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.stratum.clone(),
            r.statistic.to_string(),
            opt(r.p_value),
            opt(r.n1),
            opt(r.n2),
            r.notes.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn strata_csv(rows: &[StrataRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stratum_key", "size", "proportion", "allocated"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.key.to_string(), r.size.to_string(), r.proportion.to_string(), r.allocated.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn population_section(out: &mut String, population: &[EnrichedRecord], categories: Option<&BTreeMap<MaintenanceCategory, usize>>) {
    let n = population.len();
    let count = |f: &dyn Fn(&EnrichedRecord) -> bool| population.iter().filter(|r| f(r)).count();
    writeln!(out, "== Population ==").unwrap();
    writeln!(out, "records: {n}").unwrap();
    writeln!(out, "with size: {}", count(&|r| r.record.size_bytes.is_some())).unwrap();
    writeln!(out, "with metrics: {}", count(&|r| !r.record.metrics.is_empty())).unwrap();
    writeln!(out, "with co2e: {}", count(&|r| r.record.co2e_grams.is_some())).unwrap();
    writeln!(out, "commits: {}", population.iter().map(|r| r.record.commit_count).sum::<u64>()).unwrap();
    writeln!(out, "discussions: {}", population.iter().map(|r| r.record.discussion_count).sum::<u64>()).unwrap();
    writeln!(out, "\ndomain | models").unwrap();
    for d in Domain::ALL {
        writeln!(out, "{d} | {}", count(&|r| r.record.domain == d)).unwrap();
    }
    if let Some(cats) = categories {
        writeln!(out, "\ncommit category | commits").unwrap();
        for c in MaintenanceCategory::PRIORITY {
            writeln!(out, "{c} | {}", cats.get(&c).copied().unwrap_or(0)).unwrap();
        }
    }
}

/// Renders the report. Everything above the provenance block depends only
/// on the inputs, never on wall-clock time.
pub fn emit_report(population: &[EnrichedRecord], analyses: &Analyses, provenance: &Provenance) -> String {
    let mut out = String::from("HUBCOHORT REPORT\n\n");
    population_section(&mut out, population, analyses.categories.as_ref());

    if !analyses.strata.is_empty() {
        writeln!(out, "\n== Strata ==\n{STRATA_HEADER}").unwrap();
        for r in &analyses.strata {
            writeln!(out, "{} | {} | {:.6} | {}", r.key, r.size, r.proportion, r.allocated).unwrap();
        }
        let size: usize = analyses.strata.iter().map(|r| r.size).sum();
        let allocated: usize = analyses.strata.iter().map(|r| r.allocated).sum();
        writeln!(out, "strata: {}  population: {size}  allocated: {allocated}", analyses.strata.len()).unwrap();
    }

    if !analyses.sample.is_empty() {
        writeln!(out, "\n== Sample manifest ==\nsampled: {}\nmodel_id | stratum_key", analyses.sample.len()).unwrap();
        for s in &analyses.sample {
            writeln!(out, "{} | {}", s.model_id, s.stratum).unwrap();
        }
    }

    if !analyses.stats.is_empty() || !analyses.skipped.is_empty() {
        writeln!(out, "\n== Statistics ==").unwrap();
        writeln!(out, "Stratified associations and longitudinal description only; no causal estimates.").unwrap();
        writeln!(out, "Raw two-sided p-values; {} tests, no multiple-comparison correction.", analyses.stats.len()).unwrap();
        writeln!(out, "method | stratum | statistic | p_value | n1 | n2 | notes").unwrap();
        for r in &analyses.stats {
            writeln!(
                out,
                "{} | {} | {} | {} | {} | {} | {}",
                r.method,
                r.stratum,
                r.statistic,
                opt(r.p_value),
                opt(r.n1),
                opt(r.n2),
                r.notes
            )
            .unwrap();
        }
        for s in &analyses.skipped {
            writeln!(out, "skipped: {s}").unwrap();
        }
    }

    writeln!(out, "\n{PROVENANCE_MARKER}").unwrap();
    writeln!(out, "config_sha256: {}", provenance.config_sha256).unwrap();
    writeln!(out, "seed: {}", provenance.seed).unwrap();
    writeln!(out, "snapshots: {}", provenance.snapshots.join(",")).unwrap();
    writeln!(out, "generated_at: {}", provenance.generated_at.to_rfc3339_opts(SecondsFormat::Secs, true)).unwrap();
    out
}

/// The report with its provenance block removed.
pub fn report_body(report: &str) -> &str {
    report.split(PROVENANCE_MARKER).next().unwrap_or(report)
}

/// Parses the strata table back out of a rendered report.
pub fn parse_strata_table(report: &str) -> Vec<(String, usize, usize)> {
    let mut lines = report.lines().skip_while(|l| *l != STRATA_HEADER).skip(1);
    let mut out = Vec::new();
    for line in lines.by_ref() {
        let cols: Vec<&str> = line.rsplitn(4, " | ").collect();
        let [allocated, _, size, key] = cols.as_slice() else { break };
        let (Ok(size), Ok(allocated)) = (size.parse(), allocated.parse()) else { break };
        out.push((key.to_string(), size, allocated));
    }
    out
}
