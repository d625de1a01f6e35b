// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Keep-alive cold-start analysis.
//!
//! Invocations of one function are modeled as a Poisson process with rate
//! `lambda` (calls per minute). An idle instance is kept alive for `T`
//! minutes, so an invocation finds no live instance with probability
//! `exp(-lambda * T)` and the expected number of cold starts over a horizon
//! of `D` minutes is `D * lambda * exp(-lambda * T)`, peaking at
//! `lambda = 1 / T`.
//!
//! All times in this module are minutes.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

/// Default bucket width for [`bucket_histogram`], in calls per minute.
pub const DEFAULT_BUCKET_WIDTH: f64 = 0.001;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid rate parameters: {0}")]
    InvalidParams(String),
    #[error("invalid invocation rate {0}: rates must be finite and non-negative")]
    NegativeRate(f64),
    #[error("trace csv line {line}: {message}")]
    TraceFormat { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Invocation rate, keep-alive time and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    /// Calls per minute.
    pub lambda: f64,
    /// Minutes an idle instance is retained.
    pub keep_alive: f64,
    /// Length of the observation window in minutes.
    pub horizon: f64,
}

impl RateParams {
    pub fn new(lambda: f64, keep_alive: f64, horizon: f64) -> Result<Self, WorkloadError> {
        let p = Self {
            lambda,
            keep_alive,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(WorkloadError::NegativeRate(self.lambda));
        }
        if !(self.keep_alive.is_finite() && self.keep_alive > 0.0) {
            return Err(WorkloadError::InvalidParams(format!(
                "keep-alive must be positive, got {}",
                self.keep_alive
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(WorkloadError::InvalidParams(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Probability that no invocation arrives within the keep-alive window.
pub fn prob_no_invocation(p: &RateParams) -> f64 {
    (-p.lambda * p.keep_alive).exp()
}

/// Expected cold starts over the horizon, `D * lambda * exp(-lambda * T)`.
pub fn expected_cold_starts(p: &RateParams) -> f64 {
    p.horizon * p.lambda * prob_no_invocation(p)
}

/// The invocation rate with the most expected cold starts for a keep-alive.
pub fn peak_rate(keep_alive: f64) -> f64 {
    1.0 / keep_alive
}

/// Whether tuning a function is worth it: `benefit * E_cs > cost`.
pub fn qualifies_for_tuning(benefit: f64, cost: f64, p: &RateParams) -> bool {
    benefit * expected_cold_starts(p) > cost
}

/// Expected value of [`count_cold_starts`] on a trace drawn by
/// [`generate_trace`].
///
/// An arrival at time `t` is cold exactly when no other arrival falls in
/// `(max(0, t - T), t)`; the very first arrival is therefore always cold.
/// Integrating the cold-arrival intensity `lambda * exp(-lambda * min(t, T))`
/// over `[0, D]` gives
///
/// ```text
/// D * lambda * exp(-lambda * T)  +  1 - (1 + lambda * T) * exp(-lambda * T)
/// ```
///
/// The second term is the boundary correction: inside the first `T` minutes
/// the closed form charges `lambda * exp(-lambda * T)` where the true
/// cold-arrival rate is `lambda * exp(-lambda * t)`. It lies in `[0, 1]`.
/// Valid for `D >= T`.
pub fn expected_trace_cold_starts(p: &RateParams) -> f64 {
    expected_cold_starts(p) + boundary_correction(p)
}

/// The `[0, T]` window term of [`expected_trace_cold_starts`].
pub fn boundary_correction(p: &RateParams) -> f64 {
    let lt = p.lambda * p.keep_alive.min(p.horizon);
    1.0 - (1.0 + lt) * (-lt).exp()
}

/// Invocation timestamps of one function, in minutes, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationTrace {
    pub function_id: String,
    pub timestamps: Vec<f64>,
    /// Seed the trace was generated from; 0 for externally supplied traces.
    pub seed: u64,
}

impl InvocationTrace {
    pub fn new(
        function_id: impl Into<String>,
        timestamps: Vec<f64>,
    ) -> Result<Self, WorkloadError> {
        let trace = Self {
            function_id: function_id.into(),
            timestamps,
            seed: 0,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut prev = f64::NEG_INFINITY;
        for (i, &t) in self.timestamps.iter().enumerate() {
            if !(t.is_finite() && t >= 0.0) {
                return Err(WorkloadError::InvalidParams(format!(
                    "{}: timestamp #{i} = {t} is not a non-negative number",
                    self.function_id
                )));
            }
            if t <= prev {
                return Err(WorkloadError::InvalidParams(format!(
                    "{}: timestamps not strictly increasing at #{i}",
                    self.function_id
                )));
            }
            prev = t;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Samples a Poisson process with rate `p.lambda` on `[0, p.horizon]`.
///
/// Inter-arrival gaps are drawn from [`SplitMix64::next_exp`] seeded with
/// `seed`; the first arrival is one gap after time zero. A gap that rounds to
/// zero is redrawn so timestamps stay strictly increasing.
pub fn generate_trace(p: &RateParams, function_id: &str, seed: u64) -> InvocationTrace {
    let mut timestamps = Vec::new();
    if p.lambda > 0.0 {
        let mut rng = SplitMix64::new(seed);
        let mut t = 0.0f64;
        loop {
            let next = t + rng.next_exp(p.lambda);
            if next > p.horizon {
                break;
            }
            if next > t {
                timestamps.push(next);
                t = next;
            }
        }
    }
    InvocationTrace {
        function_id: function_id.to_owned(),
        timestamps,
        seed,
    }
}

/// Counts cold invocations under a fixed keep-alive.
///
/// The first invocation is cold; any later one is cold when the gap to its
/// predecessor exceeds `keep_alive`.
pub fn count_cold_starts(trace: &InvocationTrace, keep_alive: f64) -> usize {
    let Some(first) = trace.timestamps.first() else {
        return 0;
    };
    let mut prev = *first;
    let mut cold = 1;
    for &t in &trace.timestamps[1..] {
        if t - prev > keep_alive {
            cold += 1;
        }
        prev = t;
    }
    cold
}

/// Normalized density of per-function invocation rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateHistogram {
    pub bucket_width: f64,
    /// Bucket index (lower bound = index * width) to density.
    buckets: BTreeMap<u64, f64>,
    pub total: usize,
}

impl RateHistogram {
    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    /// `(lower bound, density)` pairs in ascending bucket order.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.buckets
            .iter()
            .map(move |(&idx, &d)| (idx as f64 * self.bucket_width, d))
    }

    /// Density of the bucket whose lower bound is `lower`, if populated.
    pub fn density_at(&self, lower: f64) -> Option<f64> {
        self.buckets
            .get(&bucket_index(lower, self.bucket_width))
            .copied()
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), WorkloadError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bucket_lower", "bucket_upper", "density"])?;
        for (lower, density) in self.iter() {
            w.write_record([
                lower.to_string(),
                (lower + self.bucket_width).to_string(),
                density.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `floor(rate / width)`, with ratios within 1e-9 of an integer snapped to it
/// so that a rate sitting on a boundary lands in the bucket it opens.
fn bucket_index(rate: f64, width: f64) -> u64 {
    let ratio = rate / width;
    let nearest = ratio.round();
    let idx = if (ratio - nearest).abs() <= 1e-9 * ratio.abs().max(1.0) {
        nearest
    } else {
        ratio.floor()
    };
    idx as u64
}

/// Buckets per-function rates into `[x, x + width)` and normalizes counts to
/// densities that sum to one. An empty input gives an empty histogram.
pub fn bucket_histogram(rates: &[f64], bucket_width: f64) -> Result<RateHistogram, WorkloadError> {
    if !(bucket_width.is_finite() && bucket_width > 0.0) {
        return Err(WorkloadError::InvalidParams(format!(
            "bucket width must be positive, got {bucket_width}"
        )));
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &rate in rates {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(WorkloadError::NegativeRate(rate));
        }
        *counts.entry(bucket_index(rate, bucket_width)).or_default() += 1;
    }
    let total = rates.len();
    let buckets = counts
        .into_iter()
        .map(|(idx, n)| (idx, n as f64 / total as f64))
        .collect();
    Ok(RateHistogram {
        bucket_width,
        buckets,
        total,
    })
}

/// Reads a one-column rate list (header `lambda`). An empty file is an empty
/// list.
pub fn read_rates_csv<R: io::Read>(reader: R) -> Result<Vec<f64>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let mut rates = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = record.get(0).unwrap_or("").trim();
        let rate: f64 = field.parse().map_err(|_| WorkloadError::TraceFormat {
            line,
            message: format!("not a number: {field:?}"),
        })?;
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(WorkloadError::NegativeRate(rate));
        }
        rates.push(rate);
    }
    Ok(rates)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    function_id: String,
    timestamp_minutes: f64,
}

/// Reads invocation traces from CSV with header
/// `function_id,timestamp_minutes`, one row per invocation.
///
/// Rows for one function must appear in strictly increasing time order;
/// functions keep the order of their first appearance.
pub fn read_traces_csv<R: io::Read>(reader: R) -> Result<Vec<InvocationTrace>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["function_id", "timestamp_minutes"] {
        return Err(WorkloadError::TraceFormat {
            line: 1,
            message: format!("expected header function_id,timestamp_minutes, got {headers:?}"),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_fn: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for result in rdr.deserialize::<TraceRow>() {
        let row = result?;
        let ts = by_fn.entry(row.function_id.clone()).or_insert_with(|| {
            order.push(row.function_id.clone());
            Vec::new()
        });
        ts.push(row.timestamp_minutes);
    }
    let mut traces = Vec::with_capacity(order.len());
    for id in order {
        let timestamps = by_fn.remove(&id).unwrap_or_default();
        traces.push(InvocationTrace::new(id, timestamps)?);
    }
    Ok(traces)
}

pub fn write_traces_csv<W: io::Write>(
    traces: &[InvocationTrace],
    writer: W,
) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(writer);
    for trace in traces {
        for &t in &trace.timestamps {
            w.serialize(TraceRow {
                function_id: trace.function_id.clone(),
                timestamp_minutes: t,
            })?;
        }
    }
    if traces.iter().all(|t| t.is_empty()) {
        w.write_record(["function_id", "timestamp_minutes"])?;
    }
    w.flush()?;
    Ok(())
}
