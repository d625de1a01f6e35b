// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Live dependency images for serverless cold starts.
//!
//! A provider keeps pre-initialized dependency processes (a language runtime
//! plus its packages) in a pool. A fresh function container migrates one of
//! those images in over a small page-server protocol instead of booting and
//! importing everything from scratch.
//!
//! The crate is split along the life of an image:
//!
//! * [`workload`] models how often functions cold start at all (keep-alive
//!   analysis, Poisson traces, rate histograms).
//! * [`image`] builds synthetic dependency images, writes and reads their
//!   on-disk checkpoints, and manages the shared pool.
//! * [`protocol`] is the wire format plus the page server and its client.
//! * [`restore`] is the container side: restore policies, the page table and
//!   the fault-driven trace walker.
//! * [`sim`] composes cold-start latencies per strategy and runs the
//!   keep-alive simulation used for the cost comparisons.

pub mod image;
pub mod protocol;
pub mod restore;
pub mod rng;
pub mod sim;
pub mod workload;

pub use image::{
    DependencyImage, DependencyPool, FileEntry, FileKind, Page, Permission, ProcessMetadata,
    ProcessSpec, Segment, PAGE_SIZE,
};
pub use protocol::{ErrorCode, Frame, PageClient, PageServer, ServerStats};
pub use restore::{
    AccessTrace, EnvironmentManifest, ExecutionReport, RestorePolicy, RestoreStats, RestoredProcess,
};
pub use sim::{CostModel, FunctionProfile, LatencyBreakdown, SimulationReport, Strategy};
pub use workload::{InvocationTrace, RateHistogram, RateParams};
