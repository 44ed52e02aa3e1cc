//! Cross-product stratification, sample sizing, proportional apportionment
//! and seeded within-stratum draws.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::preprocess::{EnrichedRecord, MaintenanceLabel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StratifyError {
    #[error("usage: {0}")]
    Usage(String),
}

/// Separator used when a stratum key is rendered as one string.
pub const KEY_SEPARATOR: &str = "|";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Domain,
    SizeBin,
    PopularityBin,
    CarbonLabel,
    MaintenanceLabel,
    Library,
}

impl Selector {
    pub const ALL: [Selector; 6] = [
        Selector::Domain,
        Selector::SizeBin,
        Selector::PopularityBin,
        Selector::CarbonLabel,
        Selector::MaintenanceLabel,
        Selector::Library,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Domain => "domain",
            Selector::SizeBin => "size_bin",
            Selector::PopularityBin => "popularity_bin",
            Selector::CarbonLabel => "carbon_label",
            Selector::MaintenanceLabel => "maintenance_label",
            Selector::Library => "library",
        }
    }

    /// Attribute value of `r`; absent values read as `Missing`.
    pub fn value_of(self, r: &EnrichedRecord) -> String {
        match self {
            Selector::Domain => r.record.domain.to_string(),
            Selector::SizeBin => r.size_bin.to_string(),
            Selector::PopularityBin => r.popularity_bin.to_string(),
            Selector::CarbonLabel => r.carbon_label.map_or("Missing", |c| c.as_str()).to_owned(),
            Selector::MaintenanceLabel => match r.maintenance_label {
                Some(MaintenanceLabel::High) => "High".to_owned(),
                Some(MaintenanceLabel::Low) => "Low".to_owned(),
                None => "Missing".to_owned(),
            },
            Selector::Library => r.record.library.clone().unwrap_or_else(|| "Missing".to_owned()),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Selector::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown stratification attribute `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratificationCriteria(Vec<Selector>);

impl StratificationCriteria {
    pub fn new(selectors: Vec<Selector>) -> Result<Self, StratifyError> {
        if selectors.is_empty() {
            return Err(StratifyError::Usage("at least one stratification attribute is required".into()));
        }
        let distinct: BTreeSet<Selector> = selectors.iter().copied().collect();
        if distinct.len() != selectors.len() {
            return Err(StratifyError::Usage("stratification attributes must be distinct".into()));
        }
        Ok(StratificationCriteria(selectors))
    }

    pub fn parse_list(s: &str) -> Result<Self, StratifyError> {
        let selectors = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Selector::from_str)
            .collect::<Result<Vec<_>, _>>()
            .map_err(StratifyError::Usage)?;
        Self::new(selectors)
    }

    pub fn selectors(&self) -> &[Selector] {
        &self.0
    }

    pub fn key_of(&self, r: &EnrichedRecord) -> StratumKey {
        StratumKey(self.0.iter().map(|s| s.value_of(r)).collect())
    }
}

impl fmt::Display for StratificationCriteria {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|s| s.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

/// One attribute value per selector. Orders lexicographically by component.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StratumKey(pub Vec<String>);

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(KEY_SEPARATOR))
    }
}

impl FromStr for StratumKey {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(StratumKey(s.split(KEY_SEPARATOR).map(str::to_owned).collect()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub key: StratumKey,
    pub member_ids: BTreeSet<String>,
    pub proportion: f64,
}

impl Stratum {
    pub fn size(&self) -> usize {
        self.member_ids.len()
    }
}

/// Groups records into the non-empty cells of the criteria cross product,
/// sorted by key.
pub fn form_strata(records: &[EnrichedRecord], criteria: &StratificationCriteria) -> Result<Vec<Stratum>, StratifyError> {
    if records.is_empty() {
        return Err(StratifyError::Usage("cannot stratify an empty population".into()));
    }
    let mut cells: BTreeMap<StratumKey, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        cells.entry(criteria.key_of(r)).or_default().insert(r.record.model_id.clone());
    }
    let n = records.len() as f64;
    Ok(cells
        .into_iter()
        .map(|(key, member_ids)| Stratum { proportion: member_ids.len() as f64 / n, key, member_ids })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeSpec {
    pub population_n: u64,
    pub confidence_z: f64,
    pub expected_proportion_p: f64,
    pub margin_e: f64,
}

impl SampleSizeSpec {
    pub fn with_population(population_n: u64) -> Self {
        SampleSizeSpec { population_n, confidence_z: 1.96, expected_proportion_p: 0.5, margin_e: 0.05 }
    }

    pub fn validate(&self) -> Result<(), StratifyError> {
        let ok = self.population_n > 0
            && self.confidence_z.is_finite()
            && self.confidence_z > 0.0
            && self.expected_proportion_p > 0.0
            && self.expected_proportion_p < 1.0
            && self.margin_e > 0.0
            && self.margin_e < 1.0;
        if ok { Ok(()) } else { Err(StratifyError::Usage(format!("invalid sample size parameters {self:?}"))) }
    }

    /// Infinite-population size z²p(1-p)/e².
    pub fn initial_size(&self) -> f64 {
        let p = self.expected_proportion_p;
        self.confidence_z.powi(2) * p * (1.0 - p) / self.margin_e.powi(2)
    }

    /// Size after the finite-population correction, before rounding.
    pub fn corrected_size(&self) -> f64 {
        let n0 = self.initial_size();
        n0 / (1.0 + (n0 - 1.0) / self.population_n as f64)
    }
}

/// Cochran's sample size with finite-population correction, rounded up and
/// capped at the population size.
pub fn sample_size(spec: &SampleSizeSpec) -> Result<u64, StratifyError> {
    spec.validate()?;
    let n = spec.corrected_size().ceil() as u64;
    Ok(n.clamp(1, spec.population_n))
}

/// Allocation of sample seats to strata, in key order.
pub type Allocation = BTreeMap<StratumKey, usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub total_n: usize,
    pub allocation: Allocation,
    pub seed: u64,
}

/// Largest-remainder apportionment of `seats` over `weights`, ties going to
/// the earlier index.
fn hamilton(weights: &[f64], seats: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || seats == 0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| seats as f64 * w / sum).collect()
    } else {
        vec![seats as f64 / weights.len() as f64; weights.len()]
    };
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let given: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(seats.saturating_sub(given)) {
        alloc[i] += 1;
    }
    alloc
}

/// Proportional allocation of `total_n` seats by largest remainder.
///
/// Quotas come from each stratum's `proportion`. A stratum that would get
/// more seats than it has members is capped at its size, and the deficit is
/// apportioned again among the uncapped strata by the same rule.
pub fn allocate(strata: &[Stratum], total_n: usize) -> Result<Allocation, StratifyError> {
    let population: usize = strata.iter().map(Stratum::size).sum();
    if total_n > population {
        return Err(StratifyError::Usage(format!("total_n {total_n} exceeds population {population}")));
    }
    let mut sorted: Vec<&Stratum> = strata.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));

    let mut fixed: Vec<Option<usize>> = vec![None; sorted.len()];
    loop {
        let active: Vec<usize> = (0..sorted.len()).filter(|&i| fixed[i].is_none()).collect();
        let remaining = total_n - fixed.iter().flatten().sum::<usize>();
        let weights: Vec<f64> = active.iter().map(|&i| sorted[i].proportion).collect();
        let weights = if weights.iter().sum::<f64>() > 0.0 {
            weights
        } else {
            active.iter().map(|&i| sorted[i].size() as f64).collect()
        };
        let shares = hamilton(&weights, remaining);
        let over: Vec<usize> = active
            .iter()
            .zip(&shares)
            .filter(|(&i, &s)| s > sorted[i].size())
            .map(|(&i, _)| i)
            .collect();
        if over.is_empty() {
            for (&i, s) in active.iter().zip(shares) {
                fixed[i] = Some(s);
            }
            break;
        }
        for i in over {
            fixed[i] = Some(sorted[i].size());
        }
    }
    Ok(sorted
        .iter()
        .zip(fixed)
        .map(|(s, n)| (s.key.clone(), n.expect("every stratum allocated")))
        .collect())
}

pub fn plan_sample(strata: &[Stratum], total_n: usize, seed: u64) -> Result<SamplePlan, StratifyError> {
    Ok(SamplePlan { total_n, allocation: allocate(strata, total_n)?, seed })
}

/// Seed of the independent generator for one stratum.
pub fn stratum_seed(master: u64, key: &StratumKey) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(key.to_string().as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledModel {
    pub model_id: String,
    pub stratum: StratumKey,
}

/// Uniform without-replacement draw of each stratum's allocation. Output is
/// grouped by stratum key, in draw order within a stratum.
pub fn draw_sample(strata: &[Stratum], plan: &SamplePlan) -> Result<Vec<SampledModel>, StratifyError> {
    let by_key: BTreeMap<&StratumKey, &Stratum> = strata.iter().map(|s| (&s.key, s)).collect();
    let mut out = Vec::with_capacity(plan.total_n);
    for (key, &count) in &plan.allocation {
        let stratum = by_key
            .get(key)
            .ok_or_else(|| StratifyError::Usage(format!("allocation names unknown stratum {key}")))?;
        if count > stratum.size() {
            return Err(StratifyError::Usage(format!(
                "allocation {count} exceeds size {} of stratum {key}",
                stratum.size()
            )));
        }
        let members: Vec<&String> = stratum.member_ids.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stratum_seed(plan.seed, key));
        for i in rand::seq::index::sample(&mut rng, members.len(), count) {
            out.push(SampledModel { model_id: members[i].clone(), stratum: key.clone() });
        }
    }
    Ok(out)
}

/// CSV body `model_id,stratum_key`, with header.
pub fn sample_csv(sample: &[SampledModel]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model_id", "stratum_key"]).expect("in-memory write");
    for s in sample {
        w.write_record([s.model_id.as_str(), s.stratum.to_string().as_str()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
