// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Keep-alive platform simulator and cold-start latency model.
//!
//! Times in profiles and reports are seconds; trace timestamps and the
//! keep-alive window are minutes, as in [`crate::workload`]. Sizes are in MB
//! of 10^6 bytes.

pub mod calibrate;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::restore::RestorePolicy;
use crate::workload::InvocationTrace;

const MB: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid profile {name:?}: {message}")]
    InvalidProfile { name: String, message: String },
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("no profile for function {0:?}")]
    MissingProfile(String),
    #[error("duplicate profile {0:?}")]
    DuplicateProfile(String),
    #[error("profiles sharing dependency {0:?} disagree on its image size")]
    InconsistentLabel(String),
    #[error("invalid keep-alive window {0}")]
    InvalidKeepAlive(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Latency components and sizes of one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionProfile {
    pub name: String,
    pub dep_label: String,
    pub network_s: f64,
    pub container_create_s: f64,
    pub boot_s: f64,
    pub dep_init_s: f64,
    pub execution_s: f64,
    pub container_image_mb: f64,
    pub checkpoint_image_mb: f64,
    pub metadata_mb: f64,
    /// Size of the whole-container checkpoint used by Prebaking. Defaults to
    /// `container_image_mb`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prebake_image_mb: Option<f64>,
    pub total_pages: u64,
    pub distinct_pages_touched: u64,
    /// Pages that fault during a lazy cold start.
    pub faults_expected: u64,
}

impl FunctionProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |message: String| SimError::InvalidProfile {
            name: self.name.clone(),
            message,
        };
        if self.name.is_empty() {
            return Err(bad("empty name".into()));
        }
        let fields = [
            ("network_s", self.network_s),
            ("container_create_s", self.container_create_s),
            ("boot_s", self.boot_s),
            ("dep_init_s", self.dep_init_s),
            ("execution_s", self.execution_s),
            ("container_image_mb", self.container_image_mb),
            ("checkpoint_image_mb", self.checkpoint_image_mb),
            ("metadata_mb", self.metadata_mb),
            ("prebake_image_mb", self.prebake_image_mb.unwrap_or(0.0)),
        ];
        for (field, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("{field} = {v} must be finite and >= 0")));
            }
        }
        if self.distinct_pages_touched > self.total_pages {
            return Err(bad(format!(
                "distinct_pages_touched {} exceeds total_pages {}",
                self.distinct_pages_touched, self.total_pages
            )));
        }
        if self.faults_expected > self.distinct_pages_touched {
            return Err(bad(format!(
                "faults_expected {} exceeds distinct_pages_touched {}",
                self.faults_expected, self.distinct_pages_touched
            )));
        }
        Ok(())
    }

    pub fn prebake_image_mb(&self) -> f64 {
        self.prebake_image_mb.unwrap_or(self.container_image_mb)
    }

    /// Pages a lazily restored instance still faults on during its first
    /// warm start.
    pub fn lazy_warm_faults(&self) -> u64 {
        self.distinct_pages_touched - self.faults_expected
    }
}

/// Platform parameters shared by all functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub network_bandwidth_mb_s: f64,
    pub per_fault_rtt_ms: f64,
    pub metadata_base_ms: f64,
    pub disk_bandwidth_mb_s: f64,
    pub prebake_restore_overhead_s: f64,
    pub per_image_pool_overhead_mb: f64,
    /// Container creation under Prebaking, which restores a whole container.
    pub prebake_container_create_s: f64,
    /// Fixed cost of rebuilding the process skeleton from metadata.
    pub restore_base_s: f64,
    /// Skeleton rebuild cost per MB of metadata.
    pub restore_s_per_metadata_mb: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            network_bandwidth_mb_s: 250.0,
            per_fault_rtt_ms: 0.5,
            metadata_base_ms: 25.0,
            disk_bandwidth_mb_s: 500.0,
            prebake_restore_overhead_s: 0.0,
            per_image_pool_overhead_mb: 0.0,
            prebake_container_create_s: 1.0,
            restore_base_s: 0.0,
            restore_s_per_metadata_mb: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("network_bandwidth_mb_s", self.network_bandwidth_mb_s),
            ("per_fault_rtt_ms", self.per_fault_rtt_ms),
            ("metadata_base_ms", self.metadata_base_ms),
            ("disk_bandwidth_mb_s", self.disk_bandwidth_mb_s),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidCost(format!("{field} = {v} must be > 0")));
            }
        }
        let non_negative = [
            (
                "prebake_restore_overhead_s",
                self.prebake_restore_overhead_s,
            ),
            (
                "per_image_pool_overhead_mb",
                self.per_image_pool_overhead_mb,
            ),
            (
                "prebake_container_create_s",
                self.prebake_container_create_s,
            ),
            ("restore_base_s", self.restore_base_s),
            ("restore_s_per_metadata_mb", self.restore_s_per_metadata_mb),
        ];
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidCost(format!("{field} = {v} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn fault_rtt_s(&self) -> f64 {
        self.per_fault_rtt_ms / 1e3
    }

    /// Time to receive the process metadata.
    pub fn communication_s(&self, metadata_mb: f64) -> f64 {
        self.metadata_base_ms / 1e3 + metadata_mb / self.network_bandwidth_mb_s
    }

    /// Time to rebuild the process skeleton from metadata.
    pub fn skeleton_s(&self, metadata_mb: f64) -> f64 {
        self.restore_base_s + self.restore_s_per_metadata_mb * metadata_mb
    }
}

/// How cold starts are served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Boot the runtime and import dependencies from scratch.
    Baseline,
    /// Migrate a live dependency image from the pool.
    WarmSwap(RestorePolicy),
    /// Restore a per-function whole-container checkpoint.
    Prebaking,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Self::Baseline,
        Self::WarmSwap(RestorePolicy::BulkRestore),
        Self::WarmSwap(RestorePolicy::LazyRestore),
        Self::WarmSwap(RestorePolicy::EagerFull),
        Self::WarmSwap(RestorePolicy::FileCopy),
        Self::Prebaking,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Baseline => f.write_str("baseline"),
            Self::WarmSwap(p) => write!(f, "warmswap-{p}"),
            Self::Prebaking => f.write_str("prebaking"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "prebaking" => Ok(Self::Prebaking),
            "warmswap" => Ok(Self::WarmSwap(RestorePolicy::BulkRestore)),
            _ => match s.strip_prefix("warmswap-") {
                Some(p) => Ok(Self::WarmSwap(p.parse()?)),
                None => Err(format!(
                    "unknown strategy {s:?} (expected baseline, prebaking or warmswap-<policy>)"
                )),
            },
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartKind {
    Cold,
    Warm,
}

impl fmt::Display for StartKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cold => "cold",
            Self::Warm => "warm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub phase: String,
    pub seconds: f64,
}

/// Latency of one invocation split into named phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub kind: StartKind,
    pub components: Vec<Phase>,
    pub total: f64,
}

impl LatencyBreakdown {
    fn new(kind: StartKind, parts: &[(&str, f64)]) -> Self {
        let components: Vec<Phase> = parts
            .iter()
            .map(|&(phase, seconds)| Phase {
                phase: phase.to_owned(),
                seconds,
            })
            .collect();
        let total = components.iter().map(|p| p.seconds).sum();
        Self {
            kind,
            components,
            total,
        }
    }

    pub fn get(&self, phase: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|p| p.phase == phase)
            .map(|p| p.seconds)
    }
}

/// Cold-start latency of `profile` under `strategy`.
pub fn cold_start_latency(
    profile: &FunctionProfile,
    strategy: Strategy,
    cost: &CostModel,
) -> LatencyBreakdown {
    let p = profile;
    let rtt = cost.fault_rtt_s();
    match strategy {
        Strategy::Baseline => LatencyBreakdown::new(
            StartKind::Cold,
            &[
                ("network", p.network_s),
                ("container", p.container_create_s),
                ("boot", p.boot_s),
                ("dep_init", p.dep_init_s),
                ("execution", p.execution_s),
            ],
        ),
        Strategy::WarmSwap(policy) => {
            let communication = cost.communication_s(p.metadata_mb);
            let skeleton = cost.skeleton_s(p.metadata_mb);
            let image_net_s = p.checkpoint_image_mb / cost.network_bandwidth_mb_s;
            let (migration, execution) = match policy {
                RestorePolicy::LazyRestore => {
                    (skeleton, p.execution_s + p.faults_expected as f64 * rtt)
                }
                RestorePolicy::BulkRestore => (
                    skeleton + (image_net_s - p.execution_s).max(0.0),
                    p.execution_s + rtt,
                ),
                RestorePolicy::EagerFull => (skeleton + image_net_s, p.execution_s),
                RestorePolicy::FileCopy => (
                    skeleton + p.checkpoint_image_mb / cost.disk_bandwidth_mb_s,
                    p.execution_s,
                ),
            };
            LatencyBreakdown::new(
                StartKind::Cold,
                &[
                    ("network", p.network_s),
                    ("container", p.container_create_s),
                    ("communication", communication),
                    ("migration", migration),
                    ("execution", execution),
                ],
            )
        }
        Strategy::Prebaking => LatencyBreakdown::new(
            StartKind::Cold,
            &[
                ("container", cost.prebake_container_create_s),
                ("restore", p.prebake_image_mb() / cost.disk_bandwidth_mb_s),
                ("overhead", cost.prebake_restore_overhead_s),
                ("execution", p.execution_s),
            ],
        ),
    }
}

/// Warm-start latency. `first_warm` is true for the first warm start after a
/// cold start of the same instance.
pub fn warm_start_latency(
    profile: &FunctionProfile,
    strategy: Strategy,
    cost: &CostModel,
    first_warm: bool,
) -> LatencyBreakdown {
    let mut parts = vec![("execution", profile.execution_s)];
    if first_warm && strategy == Strategy::WarmSwap(RestorePolicy::LazyRestore) {
        let pending = profile.lazy_warm_faults();
        if pending > 0 {
            parts.push(("page_faults", pending as f64 * cost.fault_rtt_s()));
        }
    }
    LatencyBreakdown::new(StartKind::Warm, &parts)
}

/// Cold-start time spent outside network transfer and container creation:
/// boot + dependency initialization + execution for Baseline, communication +
/// migration + execution for WarmSwap.
pub fn startup_latency(profile: &FunctionProfile, strategy: Strategy, cost: &CostModel) -> f64 {
    let b = cold_start_latency(profile, strategy, cost);
    b.total - b.get("network").unwrap_or(0.0) - b.get("container").unwrap_or(0.0)
}

/// Dependency-boot time: boot + dependency initialization for Baseline,
/// communication + migration plus any fault time added to execution for
/// WarmSwap.
pub fn dependency_boot_latency(
    profile: &FunctionProfile,
    strategy: Strategy,
    cost: &CostModel,
) -> f64 {
    startup_latency(profile, strategy, cost) - profile.execution_s
}

/// Bytes of pre-warmed state the provider keeps for `profiles`.
pub fn memory_footprint(profiles: &[FunctionProfile], strategy: Strategy, cost: &CostModel) -> u64 {
    match strategy {
        Strategy::Baseline => 0,
        Strategy::WarmSwap(_) => {
            let mut seen = BTreeSet::new();
            profiles
                .iter()
                .filter(|p| seen.insert(p.dep_label.as_str()))
                .map(|p| {
                    ((p.checkpoint_image_mb + p.metadata_mb + cost.per_image_pool_overhead_mb) * MB)
                        .round() as u64
                })
                .sum()
        }
        Strategy::Prebaking => profiles
            .iter()
            .map(|p| (p.prebake_image_mb() * MB).round() as u64)
            .sum(),
    }
}

/// One simulated invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub function: String,
    /// Minutes.
    pub timestamp: f64,
    pub breakdown: LatencyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionReport {
    pub function: String,
    pub invocations: u64,
    pub cold_starts: u64,
    pub warm_starts: u64,
    pub mean_cold_latency_s: f64,
    /// Mean of each cold-start phase.
    pub mean_cold_breakdown: Vec<Phase>,
    pub mean_warm_latency_s: f64,
    pub total_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub strategy: Strategy,
    pub keep_alive_minutes: f64,
    pub functions: Vec<FunctionReport>,
    pub cold_starts: u64,
    pub warm_starts: u64,
    /// Sum over functions of the mean cold-start latency.
    pub accumulated_cold_latency_s: f64,
    /// Sum of every invocation's latency, in event order.
    pub total_latency_s: f64,
    pub memory_bytes: u64,
    #[serde(skip)]
    pub invocations: Vec<InvocationRecord>,
}

impl SimulationReport {
    pub fn function(&self, name: &str) -> Option<&FunctionReport> {
        self.functions.iter().find(|f| f.function == name)
    }

    /// Per-invocation phases as `function,timestamp,kind,phase,seconds`.
    pub fn write_breakdown_csv<W: io::Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["function", "timestamp", "kind", "phase", "seconds"])?;
        for inv in &self.invocations {
            for p in &inv.breakdown.components {
                w.write_record([
                    inv.function.as_str(),
                    &inv.timestamp.to_string(),
                    &inv.breakdown.kind.to_string(),
                    &p.phase,
                    &p.seconds.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_inputs<'a>(
    traces: &[InvocationTrace],
    profiles: &'a [FunctionProfile],
    cost: &CostModel,
    keep_alive: f64,
) -> Result<HashMap<&'a str, &'a FunctionProfile>, SimError> {
    cost.validate()?;
    if !(keep_alive.is_finite() && keep_alive >= 0.0) {
        return Err(SimError::InvalidKeepAlive(keep_alive));
    }
    let mut by_name = HashMap::new();
    let mut by_label: HashMap<&str, &FunctionProfile> = HashMap::new();
    for p in profiles {
        p.validate()?;
        if by_name.insert(p.name.as_str(), p).is_some() {
            return Err(SimError::DuplicateProfile(p.name.clone()));
        }
        if let Some(other) = by_label.insert(p.dep_label.as_str(), p) {
            if other.checkpoint_image_mb != p.checkpoint_image_mb
                || other.metadata_mb != p.metadata_mb
            {
                return Err(SimError::InconsistentLabel(p.dep_label.clone()));
            }
        }
    }
    for t in traces {
        if !by_name.contains_key(t.function_id.as_str()) {
            return Err(SimError::MissingProfile(t.function_id.clone()));
        }
    }
    Ok(by_name)
}

struct Instance {
    last_use: f64,
    first_warm_pending: bool,
}

#[derive(Default)]
struct Tally {
    invocations: u64,
    cold: u64,
    warm: u64,
    cold_sum: f64,
    warm_sum: f64,
    cold_phases: Vec<Phase>,
    total: f64,
}

/// Runs every invocation in timestamp order. Each function has at most one
/// instance; an invocation is warm iff the previous invocation of the same
/// function was at most `keep_alive` minutes earlier.
pub fn simulate(
    traces: &[InvocationTrace],
    profiles: &[FunctionProfile],
    strategy: Strategy,
    cost: &CostModel,
    keep_alive: f64,
) -> Result<SimulationReport, SimError> {
    let by_name = check_inputs(traces, profiles, cost, keep_alive)?;

    let mut events: Vec<(f64, &str, usize)> = traces
        .iter()
        .flat_map(|t| {
            t.timestamps
                .iter()
                .enumerate()
                .map(move |(i, &ts)| (ts, t.function_id.as_str(), i))
        })
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));

    let mut instances: HashMap<&str, Instance> = HashMap::new();
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut invocations = Vec::with_capacity(events.len());
    let mut total_latency = 0.0;
    for (ts, function, _) in events {
        let profile = by_name[function];
        let warm_instance = instances
            .get_mut(function)
            .filter(|inst| ts - inst.last_use <= keep_alive);
        let breakdown = match warm_instance {
            Some(inst) => {
                let b = warm_start_latency(profile, strategy, cost, inst.first_warm_pending);
                inst.first_warm_pending = false;
                inst.last_use = ts;
                b
            }
            None => {
                instances.insert(
                    function,
                    Instance {
                        last_use: ts,
                        first_warm_pending: true,
                    },
                );
                cold_start_latency(profile, strategy, cost)
            }
        };
        let tally = tallies.entry(function).or_default();
        tally.invocations += 1;
        tally.total += breakdown.total;
        match breakdown.kind {
            StartKind::Cold => {
                tally.cold += 1;
                tally.cold_sum += breakdown.total;
                if tally.cold_phases.is_empty() {
                    tally.cold_phases = breakdown.components.clone();
                } else {
                    for (acc, p) in tally.cold_phases.iter_mut().zip(&breakdown.components) {
                        acc.seconds += p.seconds;
                    }
                }
            }
            StartKind::Warm => {
                tally.warm += 1;
                tally.warm_sum += breakdown.total;
            }
        }
        total_latency += breakdown.total;
        invocations.push(InvocationRecord {
            function: function.to_owned(),
            timestamp: ts,
            breakdown,
        });
    }

    let mean = |sum: f64, n: u64| if n == 0 { 0.0 } else { sum / n as f64 };
    let functions: Vec<FunctionReport> = tallies
        .into_iter()
        .map(|(name, t)| FunctionReport {
            function: name.to_owned(),
            invocations: t.invocations,
            cold_starts: t.cold,
            warm_starts: t.warm,
            mean_cold_latency_s: mean(t.cold_sum, t.cold),
            mean_cold_breakdown: t
                .cold_phases
                .into_iter()
                .map(|p| Phase {
                    phase: p.phase,
                    seconds: mean(p.seconds, t.cold),
                })
                .collect(),
            mean_warm_latency_s: mean(t.warm_sum, t.warm),
            total_latency_s: t.total,
        })
        .collect();

    let active: Vec<FunctionProfile> = functions
        .iter()
        .map(|f| by_name[f.function.as_str()].clone())
        .collect();
    Ok(SimulationReport {
        strategy,
        keep_alive_minutes: keep_alive,
        cold_starts: functions.iter().map(|f| f.cold_starts).sum(),
        warm_starts: functions.iter().map(|f| f.warm_starts).sum(),
        accumulated_cold_latency_s: functions.iter().map(|f| f.mean_cold_latency_s).sum(),
        total_latency_s: total_latency,
        memory_bytes: memory_footprint(&active, strategy, cost),
        functions,
        invocations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub cold_starts: u64,
    pub warm_starts: u64,
    pub accumulated_cold_latency_s: f64,
    pub total_latency_s: f64,
    pub memory_bytes: u64,
}

impl From<&SimulationReport> for ComparisonRow {
    fn from(r: &SimulationReport) -> Self {
        Self {
            strategy: r.strategy,
            cold_starts: r.cold_starts,
            warm_starts: r.warm_starts,
            accumulated_cold_latency_s: r.accumulated_cold_latency_s,
            total_latency_s: r.total_latency_s,
            memory_bytes: r.memory_bytes,
        }
    }
}

/// Simulates the same traces under each strategy.
pub fn compare_strategies(
    traces: &[InvocationTrace],
    profiles: &[FunctionProfile],
    strategies: &[Strategy],
    cost: &CostModel,
    keep_alive: f64,
) -> Result<Vec<ComparisonRow>, SimError> {
    strategies
        .iter()
        .map(|&s| simulate(traces, profiles, s, cost, keep_alive).map(|r| ComparisonRow::from(&r)))
        .collect()
}

pub fn write_comparison_csv<W: io::Write>(
    rows: &[ComparisonRow],
    writer: W,
) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "strategy",
        "cold_starts",
        "warm_starts",
        "accumulated_cold_latency_s",
        "total_latency_s",
        "memory_bytes",
    ])?;
    for r in rows {
        w.write_record([
            r.strategy.to_string(),
            r.cold_starts.to_string(),
            r.warm_starts.to_string(),
            r.accumulated_cold_latency_s.to_string(),
            r.total_latency_s.to_string(),
            r.memory_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
