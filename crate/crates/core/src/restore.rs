// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Container side of a migration: restore policies, the guest page table and
//! the fault-driven trace walker.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{read_checkpoint, ImageError, Page, ProcessMetadata, Segment, PAGE_SIZE};
use crate::protocol::{PageClient, ProtocolError, StreamHandle, StreamReport};
use crate::rng::SplitMix64;

/// Largest image the page table will be built for (64 GiB of pages).
pub const MAX_RESTORE_PAGES: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum RestoreError {
    #[error("environment mismatch: {}", .0.join(", "))]
    EnvironmentMismatch(Vec<String>),
    #[error("invalid environment manifest: {0}")]
    InvalidManifest(String),
    #[error("policy {policy} cannot restore from {source_kind}")]
    SourceMismatch {
        policy: RestorePolicy,
        source_kind: &'static str,
    },
    #[error("page {0} is outside the restored image")]
    PageOutOfRange(u64),
    #[error("image of {0} pages exceeds the restore limit")]
    ImageTooLarge(u64),
    #[error("bulk stream did not complete: {0}")]
    StreamIncomplete(String),
    #[error("no execution has run on this process yet")]
    NotExecuted,
    #[error("access trace line {line}: {message}")]
    TraceFormat { line: u64, message: String },
    #[error(transparent)]
    Protocol(ProtocolError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<ProtocolError> for RestoreError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::PageOutOfRange(id) => Self::PageOutOfRange(id),
            other => Self::Protocol(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestorePolicy {
    /// Fetch the faulting page, then stream the rest in the background.
    #[serde(rename = "bulk")]
    BulkRestore,
    /// Fetch only the pages that fault.
    #[serde(rename = "lazy")]
    LazyRestore,
    /// Stream every page before execution starts.
    #[serde(rename = "eager")]
    EagerFull,
    /// Load every page from a local checkpoint file.
    FileCopy,
}

impl RestorePolicy {
    pub const ALL: [RestorePolicy; 4] = [
        Self::BulkRestore,
        Self::LazyRestore,
        Self::EagerFull,
        Self::FileCopy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::BulkRestore => "bulk",
            Self::LazyRestore => "lazy",
            Self::EagerFull => "eager",
            Self::FileCopy => "file-copy",
        }
    }

    pub fn uses_network(self) -> bool {
        !matches!(self, Self::FileCopy)
    }
}

impl fmt::Display for RestorePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RestorePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bulk" => Ok(Self::BulkRestore),
            "lazy" => Ok(Self::LazyRestore),
            "eager" => Ok(Self::EagerFull),
            "file-copy" => Ok(Self::FileCopy),
            _ => Err(format!(
                "unknown restore policy {s:?} (expected bulk, lazy, eager or file-copy)"
            )),
        }
    }
}

/// Files installed in the container, path to version.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentManifest {
    pub files: BTreeMap<String, String>,
}

impl EnvironmentManifest {
    pub fn new(files: impl IntoIterator<Item = (String, String)>) -> Result<Self, RestoreError> {
        let mut map = BTreeMap::new();
        for (path, version) in files {
            if map.insert(path.clone(), version).is_some() {
                return Err(RestoreError::InvalidManifest(format!(
                    "duplicate path {path}"
                )));
            }
        }
        let m = Self { files: map };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), RestoreError> {
        match self.files.keys().find(|p| !p.starts_with('/')) {
            Some(p) => Err(RestoreError::InvalidManifest(format!(
                "path {p:?} is not absolute"
            ))),
            None => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RestoreError> {
        let m: Self =
            serde_json::from_str(text).map_err(|e| RestoreError::InvalidManifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Manifest listing exactly the image's file table, every version set to
    /// `version`.
    pub fn for_metadata(meta: &ProcessMetadata, version: &str) -> Self {
        Self {
            files: meta
                .file_table()
                .iter()
                .map(|f| (f.path.clone(), version.to_owned()))
                .collect(),
        }
    }

    /// Checks that every file the image had open exists here. When `reference`
    /// (the manifest of the node the image was dumped on) is given, versions
    /// must also match it exactly.
    pub fn check(
        &self,
        meta: &ProcessMetadata,
        reference: Option<&EnvironmentManifest>,
    ) -> Result<(), RestoreError> {
        let mut offending = Vec::new();
        for file in meta.file_table() {
            match self.files.get(&file.path) {
                None => offending.push(format!("{} (missing)", file.path)),
                Some(version) => {
                    if let Some(expected) = reference.and_then(|r| r.files.get(&file.path)) {
                        if expected != version {
                            offending.push(format!(
                                "{} (version {version}, expected {expected})",
                                file.path
                            ));
                        }
                    }
                }
            }
        }
        if offending.is_empty() {
            Ok(())
        } else {
            Err(RestoreError::EnvironmentMismatch(offending))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub page_id: u64,
    /// Computation between this access and the next.
    pub compute_us: u64,
}

/// The memory behavior of one invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessTrace {
    pub accesses: Vec<Access>,
}

impl AccessTrace {
    pub fn from_pages(pages: impl IntoIterator<Item = u64>, compute_us: u64) -> Self {
        Self {
            accesses: pages
                .into_iter()
                .map(|page_id| Access {
                    page_id,
                    compute_us,
                })
                .collect(),
        }
    }

    /// `len` accesses over `page_ids`, most of them concentrated on a hot
    /// set of roughly a tenth of the pages.
    pub fn random(page_ids: &[u64], len: usize, compute_us: u64, seed: u64) -> Self {
        if page_ids.is_empty() {
            return Self::default();
        }
        let mut rng = SplitMix64::new(seed);
        let hot = (page_ids.len() / 10).max(1);
        let pick = |rng: &mut SplitMix64, n: usize| (rng.next_u64() % n as u64) as usize;
        let accesses = (0..len)
            .map(|_| {
                let idx = if rng.next_f64() < 0.8 {
                    pick(&mut rng, hot)
                } else {
                    pick(&mut rng, page_ids.len())
                };
                Access {
                    page_id: page_ids[idx],
                    compute_us,
                }
            })
            .collect();
        Self { accesses }
    }

    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }

    pub fn distinct_pages(&self) -> BTreeSet<u64> {
        self.accesses.iter().map(|a| a.page_id).collect()
    }

    pub fn total_compute_us(&self) -> u64 {
        self.accesses.iter().map(|a| a.compute_us).sum()
    }

    pub fn check_range(&self, meta: &ProcessMetadata) -> Result<(), RestoreError> {
        match self
            .accesses
            .iter()
            .find(|a| !meta.contains_page(a.page_id))
        {
            Some(a) => Err(RestoreError::PageOutOfRange(a.page_id)),
            None => Ok(()),
        }
    }

    /// Reads the `page_id,compute_us` CSV format.
    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, RestoreError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["page_id", "compute_us"] {
            return Err(RestoreError::TraceFormat {
                line: 1,
                message: "expected header page_id,compute_us".into(),
            });
        }
        let mut accesses = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let field =
                |i: usize, name: &str| -> Result<u64, RestoreError> {
                    record.get(i).unwrap_or_default().parse().map_err(|e| {
                        RestoreError::TraceFormat {
                            line,
                            message: format!("{name}: {e}"),
                        }
                    })
                };
            accesses.push(Access {
                page_id: field(0, "page_id")?,
                compute_us: field(1, "compute_us")?,
            });
        }
        Ok(Self { accesses })
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self, RestoreError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), RestoreError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["page_id", "compute_us"])?;
        for a in &self.accesses {
            w.write_record([a.page_id.to_string(), a.compute_us.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wall-clock time spent in each restore phase, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    /// Obtaining the process metadata.
    pub metadata_us: f64,
    /// File-table reconnection check.
    pub validate_us: f64,
    /// Pages loaded before execution (eager and file-copy).
    pub preload_us: f64,
    /// Trace execution, summed over runs.
    pub execute_us: f64,
}

/// Cumulative statistics of one restored process.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RestoreStats {
    pub pages_transferred: u64,
    pub faults_taken: u64,
    /// `pages_transferred * 4096` plus the metadata bytes.
    pub bytes_received: u64,
    /// Everything read off the socket, frame headers included.
    pub wire_bytes_received: u64,
    /// Time the walker spent blocked on faults.
    pub fault_blocked_time_us: f64,
    pub duplicate_pages: u64,
    pub metadata_bytes: u64,
    pub timings: PhaseTimings,
}

/// Result of one trace execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub policy: RestorePolicy,
    pub dep_label: String,
    /// 1 for the first execution, 2 for the next, and so on.
    pub run: u32,
    pub accesses: u64,
    pub distinct_pages: u64,
    /// Faults taken during this run.
    pub run_faults: u64,
    /// Sum of the trace's compute costs.
    pub modeled_compute_us: u64,
    pub wall_us: f64,
    /// CRC-32 over (page id, page bytes) of every access in order.
    pub access_digest: u32,
    pub resident_pages: u64,
    pub total_pages: u64,
    /// Statistics of the process so far, all runs included.
    pub stats: RestoreStats,
    /// Set once the bulk stream has ended.
    pub stream: Option<StreamReport>,
}

/// Where pages come from.
pub enum RestoreSource {
    /// A connected page client and the label to migrate.
    Network {
        client: PageClient,
        dep_label: String,
    },
    /// A checkpoint file on local disk.
    Checkpoint(PathBuf),
}

impl RestoreSource {
    fn kind(&self) -> &'static str {
        match self {
            Self::Network { .. } => "a page server",
            Self::Checkpoint(_) => "a checkpoint file",
        }
    }
}

/// The guest page table. Each page is installed once; a page is visible to
/// readers only after all of its bytes are in place.
struct PageTable {
    segments: Vec<(Segment, usize)>,
    cells: Vec<OnceLock<Page>>,
    resident: AtomicU64,
}

impl PageTable {
    fn new(meta: &ProcessMetadata) -> Result<Self, RestoreError> {
        if meta.total_pages() > MAX_RESTORE_PAGES {
            return Err(RestoreError::ImageTooLarge(meta.total_pages()));
        }
        let mut segs: Vec<Segment> = meta.segments().to_vec();
        segs.sort_by_key(|s| s.base_page_id);
        let mut offset = 0usize;
        let segments = segs
            .into_iter()
            .map(|s| {
                let start = offset;
                offset += s.page_count as usize;
                (s, start)
            })
            .collect();
        Ok(Self {
            segments,
            cells: (0..offset).map(|_| OnceLock::new()).collect(),
            resident: AtomicU64::new(0),
        })
    }

    fn slot(&self, page_id: u64) -> Option<usize> {
        let idx = self
            .segments
            .partition_point(|(s, _)| s.base_page_id <= page_id)
            .checked_sub(1)?;
        let (seg, start) = &self.segments[idx];
        seg.contains(page_id)
            .then(|| start + (page_id - seg.base_page_id) as usize)
    }

    fn get(&self, page_id: u64) -> Option<&Page> {
        self.cells[self.slot(page_id)?].get()
    }

    fn install(&self, page_id: u64, page: Page) {
        let Some(slot) = self.slot(page_id) else {
            log::warn!("dropping page {page_id} outside the address space");
            return;
        };
        if self.cells[slot].set(page).is_ok() {
            self.resident.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn resident(&self) -> u64 {
        self.resident.load(Ordering::SeqCst)
    }

    fn resident_ids(&self) -> Vec<u64> {
        self.segments
            .iter()
            .flat_map(|(seg, start)| {
                seg.page_ids()
                    .enumerate()
                    .filter(move |(i, _)| self.cells[start + i].get().is_some())
                    .map(|(_, id)| id)
            })
            .collect()
    }
}

enum StreamState {
    NotStarted,
    Running(StreamHandle),
    Finished(StreamReport),
}

/// A dependency process rebuilt inside a container.
pub struct RestoredProcess {
    policy: RestorePolicy,
    metadata: ProcessMetadata,
    table: Arc<PageTable>,
    client: Option<PageClient>,
    stream: StreamState,
    file_pages: u64,
    faults: u64,
    blocked: Duration,
    timings: PhaseTimings,
    runs: u32,
    pacing: bool,
}

impl fmt::Debug for RestoredProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RestoredProcess")
            .field("policy", &self.policy)
            .field("dep_label", &self.metadata.dep_label())
            .field("resident", &self.table.resident())
            .field("runs", &self.runs)
            .finish()
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Restores a dependency process. Versions are not checked.
pub fn restore(
    source: RestoreSource,
    policy: RestorePolicy,
    env: &EnvironmentManifest,
) -> Result<RestoredProcess, RestoreError> {
    restore_with_reference(source, policy, env, None)
}

/// Restores a dependency process: obtains the metadata, checks that the
/// container has every file the image had open (and, given `reference`, at
/// the same versions), builds the page table and preloads pages as the policy
/// requires.
pub fn restore_with_reference(
    source: RestoreSource,
    policy: RestorePolicy,
    env: &EnvironmentManifest,
    reference: Option<&EnvironmentManifest>,
) -> Result<RestoredProcess, RestoreError> {
    if policy.uses_network() != matches!(source, RestoreSource::Network { .. }) {
        return Err(RestoreError::SourceMismatch {
            policy,
            source_kind: source.kind(),
        });
    }
    let mut timings = PhaseTimings::default();
    let t = Instant::now();
    let (metadata, client, image) = match source {
        RestoreSource::Network { client, dep_label } => {
            let meta = client.request_migration(&dep_label)?;
            (meta, Some(client), None)
        }
        RestoreSource::Checkpoint(path) => {
            let image = read_checkpoint(&path)?;
            (image.metadata().clone(), None, Some(image))
        }
    };
    timings.metadata_us = micros(t.elapsed());

    let t = Instant::now();
    env.check(&metadata, reference)?;
    timings.validate_us = micros(t.elapsed());

    let table = Arc::new(PageTable::new(&metadata)?);
    let mut proc = RestoredProcess {
        policy,
        metadata,
        table,
        client,
        stream: StreamState::NotStarted,
        file_pages: 0,
        faults: 0,
        blocked: Duration::ZERO,
        timings,
        runs: 0,
        pacing: false,
    };

    let t = Instant::now();
    match policy {
        RestorePolicy::EagerFull => {
            let client = proc.client.as_ref().expect("network policy has a client");
            let table = Arc::clone(&proc.table);
            let report = client.stream_remaining([], move |id, page| {
                table.install(id, page.clone());
            })?;
            if !report.completed {
                return Err(RestoreError::StreamIncomplete(
                    report.error.unwrap_or_else(|| "stream ended early".into()),
                ));
            }
            proc.stream = StreamState::Finished(report);
        }
        RestorePolicy::FileCopy => {
            let image = image.expect("file-copy has an image");
            for (id, page) in image.pages() {
                proc.table.install(id, page.clone());
            }
            proc.file_pages = image.page_count() as u64;
        }
        RestorePolicy::BulkRestore | RestorePolicy::LazyRestore => {}
    }
    proc.timings.preload_us = micros(t.elapsed());
    log::debug!(
        "restored {} under {} with {} pages resident",
        proc.metadata.dep_label(),
        policy,
        proc.table.resident()
    );
    Ok(proc)
}

impl RestoredProcess {
    pub fn policy(&self) -> RestorePolicy {
        self.policy
    }

    pub fn metadata(&self) -> &ProcessMetadata {
        &self.metadata
    }

    pub fn resident_pages(&self) -> u64 {
        self.table.resident()
    }

    pub fn is_resident(&self, page_id: u64) -> bool {
        self.table.get(page_id).is_some()
    }

    /// The resident page at `page_id`, without faulting.
    pub fn page(&self, page_id: u64) -> Option<Page> {
        self.table.get(page_id).cloned()
    }

    /// When set, the walker sleeps for each access's compute cost, which gives
    /// a bulk stream real time to overlap execution.
    pub fn set_pacing(&mut self, pacing: bool) {
        self.pacing = pacing;
    }

    pub fn stream_started(&self) -> bool {
        !matches!(self.stream, StreamState::NotStarted)
    }

    /// The bulk stream's report, if it has ended.
    pub fn stream_report(&mut self) -> Option<&StreamReport> {
        self.poll_stream();
        match &self.stream {
            StreamState::Finished(r) => Some(r),
            _ => None,
        }
    }

    /// Blocks until a running bulk stream ends.
    pub fn wait_for_stream(&mut self) -> Option<&StreamReport> {
        if let StreamState::Running(_) = self.stream {
            let StreamState::Running(handle) =
                std::mem::replace(&mut self.stream, StreamState::NotStarted)
            else {
                unreachable!()
            };
            self.stream = StreamState::Finished(handle.wait());
        }
        match &self.stream {
            StreamState::Finished(r) => Some(r),
            _ => None,
        }
    }

    fn poll_stream(&mut self) {
        if matches!(&self.stream, StreamState::Running(h) if h.is_finished()) {
            self.wait_for_stream();
        }
    }

    pub fn stats(&mut self) -> RestoreStats {
        self.poll_stream();
        let (pages_transferred, wire, duplicates) = match &self.client {
            Some(c) => (
                c.pages_received() - c.duplicate_pages(),
                c.bytes_received(),
                c.duplicate_pages(),
            ),
            None => (self.file_pages, 0, 0),
        };
        let meta = self.metadata.metadata_size_bytes();
        RestoreStats {
            pages_transferred,
            faults_taken: self.faults,
            bytes_received: pages_transferred * PAGE_SIZE as u64 + meta,
            wire_bytes_received: wire,
            fault_blocked_time_us: micros(self.blocked),
            duplicate_pages: duplicates,
            metadata_bytes: meta,
            timings: self.timings,
        }
    }

    /// Runs the trace. Accesses to absent pages fault and are served as the
    /// policy dictates.
    pub fn execute(&mut self, trace: &AccessTrace) -> Result<ExecutionReport, RestoreError> {
        self.execute_observed(trace, |_, _| {})
    }

    /// Like [`execute`](Self::execute), handing each accessed page to
    /// `observer` in trace order.
    pub fn execute_observed(
        &mut self,
        trace: &AccessTrace,
        mut observer: impl FnMut(u64, &Page),
    ) -> Result<ExecutionReport, RestoreError> {
        trace.check_range(&self.metadata)?;
        let start = Instant::now();
        let faults_before = self.faults;
        let mut digest = crc32fast::Hasher::new();
        for access in &trace.accesses {
            let id = access.page_id;
            let page = match self.table.get(id) {
                Some(p) => p.clone(),
                None => self.fault(id)?,
            };
            digest.update(&id.to_le_bytes());
            digest.update(&page);
            observer(id, &page);
            if self.pacing && access.compute_us > 0 {
                std::thread::sleep(Duration::from_micros(access.compute_us));
            }
        }
        let wall = start.elapsed();
        self.timings.execute_us += micros(wall);
        self.runs += 1;
        let stats = self.stats();
        Ok(ExecutionReport {
            policy: self.policy,
            dep_label: self.metadata.dep_label().to_owned(),
            run: self.runs,
            accesses: trace.len() as u64,
            distinct_pages: trace.distinct_pages().len() as u64,
            run_faults: self.faults - faults_before,
            modeled_compute_us: trace.total_compute_us(),
            wall_us: micros(wall),
            access_digest: digest.finalize(),
            resident_pages: self.table.resident(),
            total_pages: self.metadata.total_pages(),
            stats,
            stream: match &self.stream {
                StreamState::Finished(r) => Some(r.clone()),
                _ => None,
            },
        })
    }

    /// A warm start: runs another trace on the same process. Pages made
    /// resident by earlier runs stay resident.
    pub fn execute_again(&mut self, trace: &AccessTrace) -> Result<ExecutionReport, RestoreError> {
        if self.runs == 0 {
            return Err(RestoreError::NotExecuted);
        }
        self.execute(trace)
    }

    fn fault(&mut self, id: u64) -> Result<Page, RestoreError> {
        let Some(client) = self.client.as_ref() else {
            // file-copy preloads every page, so this is a hole in the image
            return Err(RestoreError::PageOutOfRange(id));
        };
        let t = Instant::now();
        self.faults += 1;
        let result = client.fetch_pages(&[id]);
        let page = match result {
            Ok(mut pages) => pages.pop().map(|(_, p)| p),
            Err(e) => {
                self.blocked += t.elapsed();
                return Err(e.into());
            }
        };
        let page = page.ok_or(RestoreError::PageOutOfRange(id))?;
        self.table.install(id, page.clone());
        if self.policy == RestorePolicy::BulkRestore
            && matches!(self.stream, StreamState::NotStarted)
        {
            let table = Arc::clone(&self.table);
            let resident: HashSet<u64> = self.table.resident_ids().into_iter().collect();
            let handle = client.start_stream(resident, move |pid, p| {
                table.install(pid, p.clone());
            })?;
            self.stream = StreamState::Running(handle);
        }
        self.blocked += t.elapsed();
        Ok(page)
    }
}
