// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Fitting the cost model and function profiles to measured timings.
//!
//! The inputs are per-function measurements of the heavy functions: restore
//! timings under each policy, sizes, and the two reported speedups over a
//! conventional start (whole cold start, and dependency boot alone). The
//! procedure:
//!
//! 1. With `C` the bulk-restore cold time, `s_t` the cold-start speedup and
//!    `s_d` the dependency-boot speedup, the execution part is
//!    `E = C (s_d - s_t) / (s_d - 1)`, the migration part `M = C - E`, and the
//!    conventional boot plus dependency initialization `B = s_d M`.
//! 2. `M` is modeled as `base + meta/bw + R + k meta + rtt + max(0, image/bw - E)`.
//!    `base` and `rtt` are fixed; `bw` is grid-searched (1 MB/s steps) over
//!    the range that keeps communication inside the observed band, and for
//!    each `bw` the non-negative least-squares `(R, k)` is taken. The `bw`
//!    with the smallest squared error wins.
//! 3. Lazy-restore fault counts come from the lazy minus bulk cold time, and
//!    the pages still missing at the first warm start from the lazy minus bulk
//!    warm time, both in units of `rtt`.
//! 4. Disk bandwidth is the least-squares fit of the file-copy minus bulk cold
//!    time against image size.
//! 5. The pool overhead per image is what is left of the shared pool size
//!    after the image and its metadata, and the Prebaking restore overhead is
//!    solved so that Prebaking is `prebake_ratio` times slower than bulk
//!    WarmSwap on the shared-image scenario.

use serde::{Deserialize, Serialize};

use super::{
    cold_start_latency, dependency_boot_latency, startup_latency, CostModel, FunctionProfile,
    SimError, Strategy,
};
use crate::image::PAGE_SIZE;
use crate::restore::RestorePolicy;

/// Measurements of one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredFunction {
    pub name: String,
    pub dep_label: String,
    pub metadata_mb: f64,
    pub image_mb: f64,
    pub container_image_mb: f64,
    pub bulk_cold_s: f64,
    pub lazy_cold_s: f64,
    pub file_copy_cold_s: f64,
    pub bulk_warm_s: f64,
    pub lazy_warm_s: f64,
    pub cold_speedup: f64,
    pub dep_boot_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub functions: Vec<MeasuredFunction>,
    pub per_fault_rtt_ms: f64,
    pub metadata_base_ms: f64,
    /// Upper end of the observed communication band.
    pub max_communication_ms: f64,
    /// Upper end of the bandwidth search.
    pub max_bandwidth_mb_s: f64,
    pub boot_s: f64,
    pub network_s: f64,
    pub container_create_s: f64,
    pub prebake_container_create_s: f64,
    /// Function whose image the pool scenario shares.
    pub pool_function: String,
    pub pool_functions: usize,
    /// Pool memory for the shared image, all overheads included.
    pub pool_total_mb: f64,
    /// Per-function whole-container checkpoint in the pool scenario.
    pub prebake_image_mb: f64,
    /// Prebaking cold latency over bulk WarmSwap cold latency.
    pub prebake_ratio: f64,
}

impl CalibrationTargets {
    /// Reference measurements of the three heavy FunctionBench functions.
    pub fn reference() -> Self {
        let f = |name: &str,
                 dep: &str,
                 meta: f64,
                 image: f64,
                 container: f64,
                 cold: [f64; 3],
                 warm: [f64; 2],
                 speedups: [f64; 2]| MeasuredFunction {
            name: name.into(),
            dep_label: dep.into(),
            metadata_mb: meta,
            image_mb: image,
            container_image_mb: container,
            bulk_cold_s: cold[0],
            lazy_cold_s: cold[1],
            file_copy_cold_s: cold[2],
            bulk_warm_s: warm[0],
            lazy_warm_s: warm[1],
            cold_speedup: speedups[0],
            dep_boot_speedup: speedups[1],
        };
        Self {
            functions: vec![
                f(
                    "lr_serving",
                    "python+sklearn+pandas",
                    5.6,
                    79.0,
                    379.52,
                    [2.67, 2.93, 3.00],
                    [1.80, 2.39],
                    [1.2, 2.2],
                ),
                f(
                    "cnn_serving",
                    "python+numpy+keras",
                    15.0,
                    190.0,
                    1386.73,
                    [2.06, 3.29, 2.14],
                    [0.65, 2.71],
                    [1.8, 3.2],
                ),
                f(
                    "rnn_serving",
                    "python+numpy+torch",
                    12.0,
                    200.0,
                    5602.46,
                    [0.89, 0.76, 0.91],
                    [0.004, 0.004],
                    [2.2, 2.5],
                ),
            ],
            per_fault_rtt_ms: 0.5,
            metadata_base_ms: 25.0,
            max_communication_ms: 94.0,
            max_bandwidth_mb_s: 4000.0,
            boot_s: 0.2,
            network_s: 0.1,
            container_create_s: 0.5,
            prebake_container_create_s: 1.0,
            pool_function: "rnn_serving".into(),
            pool_functions: 10,
            pool_total_mb: 260.0,
            prebake_image_mb: 178.0,
            prebake_ratio: 4.8,
        }
    }
}

/// How well the fitted model reproduces one function's speedups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub function: String,
    pub target_cold_speedup: f64,
    pub model_cold_speedup: f64,
    pub target_dep_boot_speedup: f64,
    pub model_dep_boot_speedup: f64,
}

impl FitRow {
    pub fn cold_error(&self) -> f64 {
        (self.model_cold_speedup - self.target_cold_speedup) / self.target_cold_speedup
    }

    pub fn dep_boot_error(&self) -> f64 {
        (self.model_dep_boot_speedup - self.target_dep_boot_speedup) / self.target_dep_boot_speedup
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub cost: CostModel,
    pub profiles: Vec<FunctionProfile>,
    pub fit: Vec<FitRow>,
    /// Squared error of the migration-time fit, in s^2.
    pub migration_sse: f64,
}

impl Calibration {
    pub fn profile(&self, name: &str) -> Option<&FunctionProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }
}

struct Decomposed {
    execution: f64,
    migration: f64,
    boot_and_init: f64,
}

fn decompose(f: &MeasuredFunction) -> Result<Decomposed, SimError> {
    let (c, st, sd) = (f.bulk_cold_s, f.cold_speedup, f.dep_boot_speedup);
    let bad = |message: String| SimError::InvalidProfile {
        name: f.name.clone(),
        message,
    };
    if !(sd > st && st > 0.0 && sd > 1.0 && c > 0.0) {
        return Err(bad(format!(
            "speedups {st}/{sd} cannot be decomposed (need dep-boot speedup > cold speedup)"
        )));
    }
    let execution = c * (sd - st) / (sd - 1.0);
    let migration = c - execution;
    Ok(Decomposed {
        execution,
        migration,
        boot_and_init: sd * migration,
    })
}

fn stream_shortfall(image_mb: f64, bw: f64, execution: f64) -> f64 {
    (image_mb / bw - execution).max(0.0)
}

/// Non-negative least squares of `y = r + k x`.
fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let mut k = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let mut r = my - k * mx;
    if k < 0.0 {
        k = 0.0;
        r = my;
    }
    if r < 0.0 {
        r = 0.0;
        let sxx0: f64 = xs.iter().map(|x| x * x).sum();
        k = if sxx0 > 0.0 {
            (xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / sxx0).max(0.0)
        } else {
            0.0
        };
    }
    (r, k)
}

/// Runs the calibration procedure described in the module docs.
pub fn calibrate(t: &CalibrationTargets) -> Result<Calibration, SimError> {
    if t.functions.is_empty() {
        return Err(SimError::InvalidCost(
            "no functions to calibrate against".into(),
        ));
    }
    let parts = t
        .functions
        .iter()
        .map(decompose)
        .collect::<Result<Vec<_>, _>>()?;
    let rtt = t.per_fault_rtt_ms / 1e3;
    let base = t.metadata_base_ms / 1e3;
    let meta: Vec<f64> = t.functions.iter().map(|f| f.metadata_mb).collect();

    // step 2: bandwidth grid with a linear fit of the skeleton cost per point
    let max_meta = meta.iter().cloned().fold(0.0, f64::max);
    let band = (t.max_communication_ms - t.metadata_base_ms) / 1e3;
    if band <= 0.0 {
        return Err(SimError::InvalidCost("empty communication band".into()));
    }
    let min_bw = (max_meta / band).ceil().max(1.0);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    let mut bw = min_bw;
    while bw <= t.max_bandwidth_mb_s {
        let ys: Vec<f64> = t
            .functions
            .iter()
            .zip(&parts)
            .map(|(f, d)| {
                d.migration
                    - base
                    - f.metadata_mb / bw
                    - rtt
                    - stream_shortfall(f.image_mb, bw, d.execution)
            })
            .collect();
        let (r, k) = fit_line(&meta, &ys);
        let sse: f64 = meta
            .iter()
            .zip(&ys)
            .map(|(m, y)| (y - r - k * m).powi(2))
            .sum();
        if best.is_none_or(|b| sse < b.3) {
            best = Some((bw, r, k, sse));
        }
        bw += 1.0;
    }
    let (bw, restore_base_s, restore_s_per_metadata_mb, migration_sse) =
        best.ok_or_else(|| SimError::InvalidCost("bandwidth search range is empty".into()))?;

    // step 4: disk bandwidth
    let (num, den) = t
        .functions
        .iter()
        .zip(&parts)
        .fold((0.0, 0.0), |(num, den), (f, d)| {
            let delta = f.file_copy_cold_s - f.bulk_cold_s
                + rtt
                + stream_shortfall(f.image_mb, bw, d.execution);
            (num + f.image_mb * delta, den + f.image_mb * f.image_mb)
        });
    if num <= 0.0 {
        return Err(SimError::InvalidCost(
            "file-copy timings do not imply a positive disk bandwidth".into(),
        ));
    }
    let disk_bw = den / num;

    // step 3: profiles
    let profiles: Vec<FunctionProfile> = t
        .functions
        .iter()
        .zip(&parts)
        .map(|(f, d)| {
            let short = stream_shortfall(f.image_mb, bw, d.execution);
            let faults = ((f.lazy_cold_s - f.bulk_cold_s + rtt + short) / rtt)
                .round()
                .max(1.0) as u64;
            let extra = ((f.lazy_warm_s - f.bulk_warm_s) / rtt).round().max(0.0) as u64;
            let total_pages = (f.image_mb * 1e6 / PAGE_SIZE as f64).round() as u64;
            FunctionProfile {
                name: f.name.clone(),
                dep_label: f.dep_label.clone(),
                network_s: t.network_s,
                container_create_s: t.container_create_s,
                boot_s: t.boot_s,
                dep_init_s: (d.boot_and_init - t.boot_s).max(0.0),
                execution_s: d.execution,
                container_image_mb: f.container_image_mb,
                checkpoint_image_mb: f.image_mb,
                metadata_mb: f.metadata_mb,
                prebake_image_mb: (f.name == t.pool_function).then_some(t.prebake_image_mb),
                total_pages,
                distinct_pages_touched: (faults + extra).min(total_pages),
                faults_expected: faults.min(total_pages),
            }
        })
        .collect();

    let mut cost = CostModel {
        network_bandwidth_mb_s: bw,
        per_fault_rtt_ms: t.per_fault_rtt_ms,
        metadata_base_ms: t.metadata_base_ms,
        disk_bandwidth_mb_s: disk_bw,
        prebake_restore_overhead_s: 0.0,
        per_image_pool_overhead_mb: 0.0,
        prebake_container_create_s: t.prebake_container_create_s,
        restore_base_s,
        restore_s_per_metadata_mb,
    };

    // step 5: pool scenario
    let pool = profiles
        .iter()
        .find(|p| p.name == t.pool_function)
        .ok_or_else(|| SimError::MissingProfile(t.pool_function.clone()))?;
    cost.per_image_pool_overhead_mb =
        (t.pool_total_mb - pool.checkpoint_image_mb - pool.metadata_mb).max(0.0);
    let warmswap = cold_start_latency(pool, Strategy::WarmSwap(RestorePolicy::BulkRestore), &cost);
    let prebake = cold_start_latency(pool, Strategy::Prebaking, &cost);
    cost.prebake_restore_overhead_s = (t.prebake_ratio * warmswap.total - prebake.total).max(0.0);
    cost.validate()?;

    let fit = t
        .functions
        .iter()
        .zip(&profiles)
        .map(|(f, p)| FitRow {
            function: f.name.clone(),
            target_cold_speedup: f.cold_speedup,
            model_cold_speedup: cold_speedup(p, &cost),
            target_dep_boot_speedup: f.dep_boot_speedup,
            model_dep_boot_speedup: dep_boot_speedup(p, &cost),
        })
        .collect();
    Ok(Calibration {
        cost,
        profiles,
        fit,
        migration_sse,
    })
}

/// Conventional over bulk-WarmSwap cold start, counting boot (or migration)
/// and execution only.
pub fn cold_speedup(profile: &FunctionProfile, cost: &CostModel) -> f64 {
    startup_latency(profile, Strategy::Baseline, cost)
        / startup_latency(
            profile,
            Strategy::WarmSwap(RestorePolicy::BulkRestore),
            cost,
        )
}

/// Conventional over bulk-WarmSwap dependency boot.
pub fn dep_boot_speedup(profile: &FunctionProfile, cost: &CostModel) -> f64 {
    dependency_boot_latency(profile, Strategy::Baseline, cost)
        / dependency_boot_latency(
            profile,
            Strategy::WarmSwap(RestorePolicy::BulkRestore),
            cost,
        )
}

/// `n` functions that all use the pool function's dependency image.
pub fn shared_image_scenario(
    cal: &Calibration,
    pool_function: &str,
    n: usize,
) -> Vec<FunctionProfile> {
    let Some(template) = cal.profile(pool_function) else {
        return Vec::new();
    };
    (0..n)
        .map(|i| FunctionProfile {
            name: format!("{pool_function}_{i}"),
            ..template.clone()
        })
        .collect()
}
