//! Command-line pipeline: crawl → store → preprocess → classify → stratify
//! → sample → analyze → report, driven by one TOML config.
//!
//! Exit codes: 0 on success, 1 when a stage fails, 2 on bad usage.

mod analysis;
pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};

use crate::classifier::{classify_corpus, RuleTable};
use crate::cohort_stats::Outcome;
use crate::hub_client::{HubClient, MemorySink};
use crate::mock_hub::{FaultPlan, MockHub};
use crate::preprocess::{read_enriched_jsonl, write_enriched_jsonl, EnrichedRecord};
use crate::record::{parse_model_document, MaintenanceCategory};
use crate::store::{import_commit_files, SnapshotId, Store};
use crate::stratifier::{
    draw_sample, form_strata, plan_sample, sample_csv, sample_size, SamplePlan, SampleSizeSpec, SampledModel, Stratum,
};

pub use analysis::{analyze, sample_strata};
pub use config::{ConfigError, LoadedConfig, PipelineConfig};
pub use report::{emit_report, Analyses, Provenance, StatsRow, StrataRow};

#[derive(Debug, Parser)]
#[command(name = "hubcohort", version, about = "Model-hub mining and cohort analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Crawl the hub and write a new snapshot.
    Crawl(CrawlArgs),
    /// Derive analysis attributes for a snapshot.
    Preprocess(Target),
    /// Label the snapshot's commits with maintenance categories.
    Classify(Target),
    /// Form strata and the proportional allocation.
    Stratify(Seeded),
    /// Draw the stratified sample.
    Sample(Seeded),
    /// Run the statistics over the sample.
    Analyze(Seeded),
    /// Write the report and its CSV companions.
    Report(Seeded),
    /// Run every stage in order.
    Pipeline(PipelineArgs),
    /// Serve a synthetic population over loopback HTTP.
    MockHub(MockHubArgs),
}

#[derive(Debug, Args)]
struct Target {
    #[arg(long)]
    config: PathBuf,
    /// Snapshot id; defaults to the latest.
    #[arg(long)]
    snapshot: Option<String>,
}

#[derive(Debug, Args)]
struct Seeded {
    #[command(flatten)]
    target: Target,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
struct CrawlOverrides {
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    max_requests_per_second: Option<f64>,
    #[arg(long)]
    max_concurrent_requests: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    backoff_base_ms: Option<u64>,
    #[arg(long)]
    page_size: Option<usize>,
    /// Only models modified at or after this RFC 3339 time.
    #[arg(long)]
    since: Option<DateTime<Utc>>,
    /// Crawl changes since the latest snapshot and merge them into it.
    #[arg(long)]
    incremental: bool,
    /// Snapshot time; defaults to now.
    #[arg(long)]
    at: Option<DateTime<Utc>>,
    /// Headerless CSV of `sha,model_id,path` rows adding edited files to commits.
    #[arg(long)]
    commit_files: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CrawlArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    crawl: CrawlOverrides,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    crawl: CrawlOverrides,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MockHubArgs {
    #[arg(long, default_value_t = 1000)]
    models: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 8765)]
    port: u16,
    #[arg(long, default_value_t = 0.0)]
    rate_429: f64,
    #[arg(long, default_value_t = 0.0)]
    rate_500: f64,
    /// Stop after this many seconds; runs until killed otherwise.
    #[arg(long)]
    duration_secs: Option<u64>,
}

/// A failure tagged with the stage that raised it.
#[derive(Debug)]
struct StageError {
    stage: &'static str,
    message: String,
}

type StageResult<T> = Result<T, StageError>;

fn fail<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |e| StageError { stage, message: e.to_string() }
}

struct Ctx {
    loaded: LoadedConfig,
    store: Store,
    seed: u64,
}

/// Everything downstream of a snapshot's enrichment, recomputed on demand.
struct Planned {
    enriched: Vec<EnrichedRecord>,
    strata: Vec<Stratum>,
    plan: SamplePlan,
    sample: Vec<SampledModel>,
}

impl Ctx {
    fn new(config: &Path, seed: Option<u64>) -> StageResult<Ctx> {
        let loaded = LoadedConfig::load(config).map_err(fail("config"))?;
        let store = Store::open(&loaded.config.store_path).map_err(fail("config"))?;
        let seed = seed.unwrap_or(loaded.config.seed);
        Ok(Ctx { loaded, store, seed })
    }

    fn cfg(&self) -> &PipelineConfig {
        &self.loaded.config
    }

    fn out_dir(&self, snap: &SnapshotId) -> StageResult<PathBuf> {
        // Colons are legal on the platforms we target, but keep names portable.
        let dir = self.cfg().work_dir().join(snap.as_str().replace(':', "-"));
        fs::create_dir_all(&dir).map_err(fail("io"))?;
        Ok(dir)
    }

    fn resolve(&self, stage: &'static str, snapshot: Option<&str>) -> StageResult<SnapshotId> {
        self.store.resolve(snapshot).map_err(fail(stage))
    }

    fn log_run(&self, stage: &str, snapshots: &[SnapshotId], status: &str) {
        let path = self.cfg().run_log();
        let ids: Vec<&str> = snapshots.iter().map(SnapshotId::as_str).collect();
        let line = format!(
            "{}\tstage={stage}\tconfig_sha256={}\tseed={}\tsnapshots={}\tstatus={status}\n",
            Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            self.loaded.sha256,
            self.seed,
            ids.join(",")
        );
        let res = fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))
            .and_then(|_| OpenOptions::new().create(true).append(true).open(&path))
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = res {
            log::warn!("cannot append run log {}: {e}", path.display());
        }
    }

    fn runtime(&self) -> StageResult<tokio::runtime::Runtime> {
        tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(fail("io"))
    }

    fn crawl(&self, o: &CrawlOverrides) -> StageResult<SnapshotId> {
        const STAGE: &str = "crawl";
        let mut c = self.cfg().crawl.clone();
        if let Some(v) = &o.base_url {
            c.base_url = v.clone();
        }
        c.max_requests_per_second = o.max_requests_per_second.unwrap_or(c.max_requests_per_second);
        c.max_concurrent_requests = o.max_concurrent_requests.unwrap_or(c.max_concurrent_requests);
        c.max_retries = o.max_retries.unwrap_or(c.max_retries);
        c.backoff_base_ms = o.backoff_base_ms.unwrap_or(c.backoff_base_ms);
        c.page_size = o.page_size.unwrap_or(c.page_size);
        c.since = o.since.or(c.since);
        let base = if o.incremental { self.store.latest().map_err(fail(STAGE))? } else { None };
        if let Some(b) = &base {
            c.since = c.since.or(Some(b.time()));
        }

        let client = HubClient::new(c).map_err(fail(STAGE))?;
        let sink = MemorySink::new();
        let report = self.runtime()?.block_on(client.crawl_all(&sink)).map_err(fail(STAGE))?;
        eprintln!(
            "crawl: fetched={} requests={} retries={} failures={} wall_ms={} peak_rps={}",
            report.models_fetched,
            report.requests_made,
            report.retries,
            report.failures.len(),
            report.wall_time_ms,
            report.observed_peak_rps
        );
        for (id, class) in &report.failures {
            eprintln!("crawl: failed {id} ({class})");
        }

        let mut records = BTreeMap::new();
        let mut commits = Vec::new();
        if let Some(b) = &base {
            let snap = self.store.read_snapshot(b).map_err(fail(STAGE))?;
            records = snap.records;
            commits = snap.commit_log;
        }
        let mut fetched = BTreeMap::new();
        for (id, doc) in sink.into_documents() {
            match parse_model_document(&doc) {
                Ok(p) => {
                    p.warnings.iter().for_each(|w| log::warn!("{id}: {w}"));
                    fetched.insert(p.record.model_id.clone(), (p.record, p.commits));
                }
                Err(e) => eprintln!("crawl: cannot parse {id}: {e}"),
            }
        }
        commits.retain(|c| !fetched.contains_key(&c.model_id));
        for (id, (record, cs)) in fetched {
            records.insert(id, record);
            commits.extend(cs);
        }
        if let Some(path) = &o.commit_files {
            let r = import_commit_files(path, &mut commits).map_err(fail(STAGE))?;
            eprintln!("crawl: commit files enriched={} unmatched={}", r.enriched, r.unmatched.len());
        }
        let records: Vec<_> = records.into_values().collect();
        let at = o.at.unwrap_or_else(Utc::now);
        let id = self.store.write_snapshot(&records, &commits, at).map_err(fail(STAGE))?;
        println!("{id}");
        Ok(id)
    }

    fn preprocess(&self, snap: &SnapshotId) -> StageResult<Vec<EnrichedRecord>> {
        const STAGE: &str = "preprocess";
        let s = self.store.read_snapshot(snap).map_err(fail(STAGE))?;
        let records: Vec<_> = s.records.into_values().collect();
        let pre = self.cfg().preprocessor().map_err(fail(STAGE))?;
        let e = pre.enrich(&records).map_err(fail(STAGE))?;
        e.warnings.iter().for_each(|w| eprintln!("preprocess: {w}"));
        let dir = self.out_dir(snap)?;
        let mut buf = Vec::new();
        write_enriched_jsonl(&mut buf, &e.records).map_err(fail(STAGE))?;
        fs::write(dir.join("enriched.jsonl"), buf).map_err(fail(STAGE))?;
        let vocab: String = e.vocabulary.terms().iter().map(|t| format!("{t}\n")).collect();
        fs::write(dir.join("vocabulary.txt"), vocab).map_err(fail(STAGE))?;
        Ok(e.records)
    }

    fn enriched(&self, snap: &SnapshotId) -> StageResult<Vec<EnrichedRecord>> {
        let path = self.out_dir(snap)?.join("enriched.jsonl");
        match fs::read_to_string(&path) {
            Ok(text) => read_enriched_jsonl(&text)
                .map_err(|(line, e)| StageError { stage: "preprocess", message: format!("{}:{line}: {e}", path.display()) }),
            Err(_) => self.preprocess(snap),
        }
    }

    fn classify(&self, snap: &SnapshotId) -> StageResult<BTreeMap<MaintenanceCategory, usize>> {
        const STAGE: &str = "classify";
        let s = self.store.read_snapshot(snap).map_err(fail(STAGE))?;
        let mut commits = s.commit_log;
        if let Some(plugin) = self.cfg().plugin() {
            let pending: Vec<usize> = (0..commits.len()).filter(|&i| commits[i].category.is_none()).collect();
            let messages: Vec<String> = pending.iter().map(|&i| commits[i].message.clone()).collect();
            let labels = self.runtime()?.block_on(plugin.classify(&messages)).map_err(fail(STAGE))?;
            for (i, label) in pending.into_iter().zip(labels) {
                commits[i].category = Some(label);
            }
        }
        let table = RuleTable::default();
        let summary = classify_corpus(&commits, &table);

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model_id", "sha", "category"]).map_err(fail(STAGE))?;
        for c in &commits {
            let label = c.category.unwrap_or_else(|| table.classify(&c.message));
            w.write_record([c.model_id.as_str(), c.sha.as_str(), label.as_str()]).map_err(fail(STAGE))?;
        }
        let dir = self.out_dir(snap)?;
        fs::write(dir.join("commit_labels.csv"), w.into_inner().map_err(fail(STAGE))?).map_err(fail(STAGE))?;
        let counts: String = std::iter::once("category,commits\n".to_owned())
            .chain(summary.counts.iter().map(|(c, n)| format!("{c},{n}\n")))
            .collect();
        fs::write(dir.join("category_counts.csv"), counts).map_err(fail(STAGE))?;
        Ok(summary.counts)
    }

    fn categories(&self, snap: &SnapshotId) -> StageResult<BTreeMap<MaintenanceCategory, usize>> {
        let path = self.out_dir(snap)?.join("category_counts.csv");
        let Ok(text) = fs::read_to_string(&path) else { return self.classify(snap) };
        text.lines()
            .skip(1)
            .map(|l| {
                let (c, n) = l.split_once(',').ok_or_else(|| format!("bad line `{l}`"))?;
                Ok((c.parse::<MaintenanceCategory>()?, n.parse::<usize>().map_err(|e| e.to_string())?))
            })
            .collect::<Result<_, String>>()
            .map_err(|m| StageError { stage: "classify", message: format!("{}: {m}", path.display()) })
    }

    fn plan(&self, snap: &SnapshotId) -> StageResult<Planned> {
        const STAGE: &str = "stratify";
        let enriched = self.enriched(snap)?;
        let strata = form_strata(&enriched, &self.cfg().criteria()).map_err(fail(STAGE))?;
        let sizing = &self.cfg().sizing;
        let total_n = match sizing.total_n {
            Some(n) => n,
            None => {
                let mut spec = SampleSizeSpec::with_population(enriched.len() as u64);
                spec.confidence_z = sizing.confidence_z.unwrap_or(spec.confidence_z);
                spec.expected_proportion_p = sizing.expected_proportion_p.unwrap_or(spec.expected_proportion_p);
                spec.margin_e = sizing.margin_e.unwrap_or(spec.margin_e);
                sample_size(&spec).map_err(fail(STAGE))? as usize
            }
        };
        let plan = plan_sample(&strata, total_n, self.seed).map_err(fail(STAGE))?;
        let sample = draw_sample(&strata, &plan).map_err(fail("sample"))?;
        Ok(Planned { enriched, strata, plan, sample })
    }

    fn strata_rows(p: &Planned) -> Vec<StrataRow> {
        p.strata
            .iter()
            .map(|s| StrataRow {
                key: s.key.clone(),
                size: s.size(),
                proportion: s.proportion,
                allocated: p.plan.allocation.get(&s.key).copied().unwrap_or(0),
            })
            .collect()
    }

    fn stratify(&self, snap: &SnapshotId) -> StageResult<()> {
        let p = self.plan(snap)?;
        let csv = report::strata_csv(&Self::strata_rows(&p));
        fs::write(self.out_dir(snap)?.join("strata.csv"), csv).map_err(fail("stratify"))
    }

    fn sample(&self, snap: &SnapshotId) -> StageResult<()> {
        let p = self.plan(snap)?;
        fs::write(self.out_dir(snap)?.join("sample.csv"), sample_csv(&p.sample)).map_err(fail("sample"))
    }

    fn statistics(&self, p: &Planned) -> StageResult<(Vec<StatsRow>, Vec<String>)> {
        const STAGE: &str = "analyze";
        let outcome = self.cfg().outcome().map_err(fail(STAGE))?;
        let pairs = self
            .cfg()
            .analysis
            .correlations
            .iter()
            .map(|[x, y]| Ok((x.parse::<Outcome>()?, y.parse::<Outcome>()?)))
            .collect::<Result<Vec<_>, String>>()
            .map_err(fail(STAGE))?;
        let ids: std::collections::HashSet<&str> = p.sample.iter().map(|s| s.model_id.as_str()).collect();
        let sampled: Vec<EnrichedRecord> =
            p.enriched.iter().filter(|r| ids.contains(r.record.model_id.as_str())).cloned().collect();
        Ok(analyze(&sampled, &sample_strata(&p.sample), &outcome, self.cfg().analysis.group, &pairs))
    }

    fn analyze(&self, snap: &SnapshotId) -> StageResult<()> {
        let p = self.plan(snap)?;
        let (rows, skipped) = self.statistics(&p)?;
        if !skipped.is_empty() {
            eprintln!("analyze: {} analyses skipped; reasons are listed in the report", skipped.len());
        }
        fs::write(self.out_dir(snap)?.join("stats.csv"), report::stats_csv(&rows)).map_err(fail("analyze"))
    }

    fn report(&self, snap: &SnapshotId) -> StageResult<PathBuf> {
        const STAGE: &str = "report";
        let p = self.plan(snap)?;
        let (stats, skipped) = self.statistics(&p)?;
        let analyses = Analyses {
            categories: Some(self.categories(snap)?),
            strata: Self::strata_rows(&p),
            sample: p.sample.clone(),
            stats,
            skipped,
        };
        let provenance = Provenance {
            config_sha256: self.loaded.sha256.clone(),
            seed: self.seed,
            snapshots: vec![snap.to_string()],
            generated_at: Utc::now(),
        };
        let text = emit_report(&p.enriched, &analyses, &provenance);
        let path = &self.cfg().report_path;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(fail(STAGE))?;
        }
        fs::write(path, text).map_err(fail(STAGE))?;
        let companion = |suffix: &str| path.with_extension(format!("{suffix}.csv"));
        fs::write(companion("strata"), report::strata_csv(&analyses.strata)).map_err(fail(STAGE))?;
        fs::write(companion("sample"), sample_csv(&analyses.sample)).map_err(fail(STAGE))?;
        fs::write(companion("stats"), report::stats_csv(&analyses.stats)).map_err(fail(STAGE))?;
        Ok(path.clone())
    }
}

/// Runs one stage under run logging.
fn logged<T>(ctx: &Ctx, stage: &str, snaps: &[SnapshotId], f: impl FnOnce() -> StageResult<T>) -> StageResult<T> {
    let r = f();
    match &r {
        Ok(_) => ctx.log_run(stage, snaps, "ok"),
        Err(e) => ctx.log_run(stage, snaps, &format!("error: {}", e.message.replace(['\t', '\n'], " "))),
    }
    r
}

fn dispatch(command: Command) -> StageResult<()> {
    match command {
        Command::Crawl(a) => {
            let ctx = Ctx::new(&a.config, None)?;
            let snap = ctx.crawl(&a.crawl);
            let ids: Vec<SnapshotId> = snap.iter().cloned().collect();
            logged(&ctx, "crawl", &ids, || snap).map(drop)
        }
        Command::Preprocess(t) => {
            let ctx = Ctx::new(&t.config, None)?;
            let snap = ctx.resolve("preprocess", t.snapshot.as_deref())?;
            logged(&ctx, "preprocess", std::slice::from_ref(&snap), || ctx.preprocess(&snap)).map(drop)
        }
        Command::Classify(t) => {
            let ctx = Ctx::new(&t.config, None)?;
            let snap = ctx.resolve("classify", t.snapshot.as_deref())?;
            logged(&ctx, "classify", std::slice::from_ref(&snap), || ctx.classify(&snap)).map(drop)
        }
        Command::Stratify(s) => seeded(s, "stratify", Ctx::stratify),
        Command::Sample(s) => seeded(s, "sample", Ctx::sample),
        Command::Analyze(s) => seeded(s, "analyze", Ctx::analyze),
        Command::Report(s) => seeded(s, "report", |c, snap| c.report(snap).map(drop)),
        Command::Pipeline(a) => {
            let ctx = Ctx::new(&a.config, a.seed)?;
            let snap = ctx.crawl(&a.crawl);
            let ids: Vec<SnapshotId> = snap.iter().cloned().collect();
            let snap = logged(&ctx, "crawl", &ids, || snap)?;
            let s = [snap.clone()];
            logged(&ctx, "preprocess", &s, || ctx.preprocess(&snap))?;
            logged(&ctx, "classify", &s, || ctx.classify(&snap))?;
            logged(&ctx, "stratify", &s, || ctx.stratify(&snap))?;
            logged(&ctx, "sample", &s, || ctx.sample(&snap))?;
            logged(&ctx, "analyze", &s, || ctx.analyze(&snap))?;
            let path = logged(&ctx, "report", &s, || ctx.report(&snap))?;
            eprintln!("report: {}", path.display());
            Ok(())
        }
        Command::MockHub(m) => {
            let faults = FaultPlan { seed: m.seed, rate_429: m.rate_429, rate_500: m.rate_500, ..FaultPlan::default() };
            let hub = MockHub::start_on(crate::fixture::generate(m.models, m.seed), faults, m.port).map_err(fail("mock-hub"))?;
            println!("{}", hub.base_url());
            match m.duration_secs {
                Some(s) => std::thread::sleep(Duration::from_secs(s)),
                None => loop {
                    std::thread::sleep(Duration::from_secs(3600));
                },
            }
            Ok(())
        }
    }
}

fn seeded(s: Seeded, stage: &'static str, f: impl FnOnce(&Ctx, &SnapshotId) -> StageResult<()>) -> StageResult<()> {
    let ctx = Ctx::new(&s.target.config, s.seed)?;
    let snap = ctx.resolve(stage, s.target.snapshot.as_deref())?;
    logged(&ctx, stage, std::slice::from_ref(&snap), || f(&ctx, &snap))
}

/// Parses `argv` (without the program name) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once(std::ffi::OsString::from("hubcohort")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.stage, e.message);
            1
        }
    }
}
