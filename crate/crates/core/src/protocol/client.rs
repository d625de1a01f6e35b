// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::BufReader;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, OnceLock};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use super::frame::{read_frame, write_frame, ErrorCode, Frame, MAX_IDS_PER_FRAME};
use super::{frame_name, ProtocolError};
use crate::image::{Page, ProcessMetadata};

type FrameReader = BufReader<TcpStream>;

/// Client end of one migration session.
///
/// Every page received on the session is kept, so a page is requested from
/// the server at most once. Operations are serialized internally; the single
/// case where two run at once is a [`fetch_pages`](Self::fetch_pages) issued
/// while a bulk stream started by [`start_stream`](Self::start_stream) is in
/// flight. That fetch is sent straight away and its pages are picked up by the
/// stream's receiver.
pub struct PageClient {
    writer: Mutex<TcpStream>,
    control: TcpStream,
    shared: Arc<Shared>,
    metadata: OnceLock<(ProcessMetadata, usize)>,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
    bytes_received: AtomicU64,
    bytes_sent: AtomicU64,
}

struct State {
    /// `None` while a request or a stream owns the read half.
    reader: Option<FrameReader>,
    pages: HashMap<u64, Page>,
    pages_received: u64,
    duplicates: u64,
    streaming: bool,
    /// Pages the caller declared resident when the current stream started.
    stream_excluded: HashSet<u64>,
    stream_error: Option<String>,
}

impl State {
    fn install(&mut self, id: u64, page: Page) -> bool {
        self.pages_received += 1;
        if self.pages.contains_key(&id) {
            self.duplicates += 1;
            return false;
        }
        self.pages.insert(id, page);
        true
    }
}

/// Outcome of a bulk stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamReport {
    /// True when the server closed the stream with `Done`.
    pub completed: bool,
    pub pages_streamed: u64,
    /// Page ids in the order they arrived during the stream.
    pub order: Vec<u64>,
    /// Pages held after the stream: the declared-resident set plus every page
    /// received on the session. Enough to resume after a dropped session.
    pub resident: BTreeSet<u64>,
    pub error: Option<String>,
}

/// A bulk stream running in the background.
pub struct StreamHandle {
    join: Option<JoinHandle<StreamReport>>,
}

impl StreamHandle {
    pub fn is_finished(&self) -> bool {
        self.join.as_ref().is_none_or(|j| j.is_finished())
    }

    /// Blocks until the stream ends.
    pub fn wait(mut self) -> StreamReport {
        let join = self.join.take().expect("stream joined once");
        join.join().unwrap_or_else(|_| StreamReport {
            completed: false,
            pages_streamed: 0,
            order: Vec::new(),
            resident: BTreeSet::new(),
            error: Some("stream receiver panicked".into()),
        })
    }
}

impl PageClient {
    pub fn connect(endpoint: impl ToSocketAddrs) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(endpoint)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::with_capacity(256 << 10, stream.try_clone()?);
        let control = stream.try_clone()?;
        Ok(Self {
            writer: Mutex::new(stream),
            control,
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    reader: Some(reader),
                    pages: HashMap::new(),
                    pages_received: 0,
                    duplicates: 0,
                    streaming: false,
                    stream_excluded: HashSet::new(),
                    stream_error: None,
                }),
                cv: Condvar::new(),
                bytes_received: AtomicU64::new(0),
                bytes_sent: AtomicU64::new(0),
            }),
            metadata: OnceLock::new(),
        })
    }

    /// Metadata of the migrated image, once [`request_migration`](Self::request_migration)
    /// has succeeded.
    pub fn metadata(&self) -> Option<&ProcessMetadata> {
        self.metadata.get().map(|(m, _)| m)
    }

    /// Length of the `Metadata` payload the server sent.
    pub fn metadata_wire_len(&self) -> Option<usize> {
        self.metadata.get().map(|(_, n)| *n)
    }

    pub fn bytes_received(&self) -> u64 {
        self.shared.bytes_received.load(Ordering::SeqCst)
    }

    pub fn bytes_sent(&self) -> u64 {
        self.shared.bytes_sent.load(Ordering::SeqCst)
    }

    /// Page records received, counting any duplicates.
    pub fn pages_received(&self) -> u64 {
        self.lock().pages_received
    }

    /// Page records that repeated a page already held. Zero unless the
    /// server misbehaves.
    pub fn duplicate_pages(&self) -> u64 {
        self.lock().duplicates
    }

    pub fn is_streaming(&self) -> bool {
        self.lock().streaming
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().expect("client state poisoned")
    }

    fn send(&self, frame: &Frame) -> Result<(), ProtocolError> {
        let mut w = self.writer.lock().expect("client writer poisoned");
        let n = write_frame(&mut *w, frame)?;
        self.shared.bytes_sent.fetch_add(n as u64, Ordering::SeqCst);
        Ok(())
    }

    fn recv(&self, reader: &mut FrameReader) -> Result<Frame, ProtocolError> {
        let (frame, n) = read_frame(reader)?.ok_or(ProtocolError::Disconnected)?;
        self.shared
            .bytes_received
            .fetch_add(n as u64, Ordering::SeqCst);
        Ok(frame)
    }

    /// Runs `f` with exclusive use of the read half.
    fn with_reader<T>(
        &self,
        f: impl FnOnce(&mut FrameReader) -> Result<T, ProtocolError>,
    ) -> Result<T, ProtocolError> {
        let mut reader = {
            let mut st = self.lock();
            loop {
                if let Some(r) = st.reader.take() {
                    break r;
                }
                st = self.shared.cv.wait(st).expect("client state poisoned");
            }
        };
        let result = f(&mut reader);
        let mut st = self.lock();
        st.reader = Some(reader);
        self.shared.cv.notify_all();
        result
    }

    /// Asks the server for `dep_label` and returns its process metadata.
    pub fn request_migration(&self, dep_label: &str) -> Result<ProcessMetadata, ProtocolError> {
        if let Some(m) = self.metadata() {
            return Err(ProtocolError::AlreadyMigrated(m.dep_label().to_owned()));
        }
        let (meta, len) = self.with_reader(|r| {
            self.send(&Frame::MigrateRequest {
                dep_label: dep_label.to_owned(),
            })?;
            match self.recv(r)? {
                Frame::Metadata(bytes) => Ok((ProcessMetadata::decode(&bytes)?, bytes.len())),
                Frame::Error {
                    code: ErrorCode::UnknownDependency,
                    ..
                } => Err(ProtocolError::UnknownDependency(dep_label.to_owned())),
                Frame::Error { code, message } => Err(ProtocolError::Remote { code, message }),
                other => Err(ProtocolError::Unexpected(frame_name(&other))),
            }
        })?;
        let _ = self.metadata.set((meta.clone(), len));
        Ok(meta)
    }

    /// Fetches pages on demand, returned in request order.
    ///
    /// Pages already received on this session are answered locally. While a
    /// bulk stream is running the request preempts the stream on the server
    /// and the pages are delivered through the stream's receiver.
    pub fn fetch_pages(&self, ids: &[u64]) -> Result<Vec<(u64, Page)>, ProtocolError> {
        let meta = self.metadata().ok_or(ProtocolError::NotMigrated)?;
        if let Some(&bad) = ids.iter().find(|&&id| !meta.contains_page(id)) {
            return Err(ProtocolError::PageOutOfRange(bad));
        }
        loop {
            let st = self.lock();
            let mut seen = HashSet::new();
            let missing: Vec<u64> = ids
                .iter()
                .copied()
                .filter(|id| !st.pages.contains_key(id) && seen.insert(*id))
                .collect();
            if missing.is_empty() {
                return Ok(ids.iter().map(|&id| (id, st.pages[&id].clone())).collect());
            }
            if st.streaming {
                self.fetch_during_stream(st, missing)?;
            } else {
                drop(st);
                self.fetch_direct(&missing)?;
            }
        }
    }

    fn fetch_during_stream(
        &self,
        st: MutexGuard<'_, State>,
        missing: Vec<u64>,
    ) -> Result<(), ProtocolError> {
        // Pages the caller claimed resident are never streamed; ask for them
        // only after the stream is over.
        let (deferred, request): (Vec<u64>, Vec<u64>) = missing
            .into_iter()
            .partition(|id| st.stream_excluded.contains(id));
        drop(st);
        for chunk in request.chunks(MAX_IDS_PER_FRAME) {
            self.send(&Frame::PageRequest(chunk.to_vec()))?;
        }
        let mut st = self.lock();
        while st.streaming
            && (!deferred.is_empty() || request.iter().any(|id| !st.pages.contains_key(id)))
        {
            st = self.shared.cv.wait(st).expect("client state poisoned");
        }
        if !st.streaming {
            if let Some(err) = &st.stream_error {
                if request.iter().any(|id| !st.pages.contains_key(id)) {
                    return Err(ProtocolError::Remote {
                        code: ErrorCode::MalformedFrame,
                        message: format!("stream failed: {err}"),
                    });
                }
            }
        }
        Ok(())
    }

    fn fetch_direct(&self, missing: &[u64]) -> Result<(), ProtocolError> {
        self.with_reader(|r| {
            for chunk in missing.chunks(MAX_IDS_PER_FRAME) {
                self.send(&Frame::PageRequest(chunk.to_vec()))?;
            }
            let mut outstanding: HashSet<u64> = missing.iter().copied().collect();
            while !outstanding.is_empty() {
                match self.recv(r)? {
                    Frame::PageData(pages) => {
                        let mut st = self.lock();
                        for (id, page) in pages {
                            outstanding.remove(&id);
                            st.install(id, page);
                        }
                    }
                    Frame::Error {
                        code: ErrorCode::PageOutOfRange,
                        message,
                    } => {
                        let id = missing.first().copied().unwrap_or_default();
                        log::debug!("server rejected page request: {message}");
                        return Err(ProtocolError::PageOutOfRange(id));
                    }
                    Frame::Error { code, message } => {
                        return Err(ProtocolError::Remote { code, message })
                    }
                    other => return Err(ProtocolError::Unexpected(frame_name(&other))),
                }
            }
            Ok(())
        })
    }

    /// Starts streaming every page not in `already_resident` in the
    /// background. `on_page` sees each page as it arrives, on the receiver
    /// thread.
    pub fn start_stream<F>(
        &self,
        already_resident: impl IntoIterator<Item = u64>,
        mut on_page: F,
    ) -> Result<StreamHandle, ProtocolError>
    where
        F: FnMut(u64, &Page) + Send + 'static,
    {
        if self.metadata().is_none() {
            return Err(ProtocolError::NotMigrated);
        }
        let resident: BTreeSet<u64> = already_resident.into_iter().collect();
        if resident.len() > MAX_IDS_PER_FRAME {
            return Err(ProtocolError::PayloadTooLarge(resident.len() * 8 + 4));
        }
        let mut reader = {
            let mut st = self.lock();
            if st.streaming {
                return Err(ProtocolError::StreamActive);
            }
            let reader = loop {
                if let Some(r) = st.reader.take() {
                    break r;
                }
                st = self.shared.cv.wait(st).expect("client state poisoned");
            };
            st.streaming = true;
            st.stream_error = None;
            st.stream_excluded = resident.iter().copied().collect();
            reader
        };
        if let Err(e) = self.send(&Frame::PrefetchRequest(resident.iter().copied().collect())) {
            let mut st = self.lock();
            st.reader = Some(reader);
            st.streaming = false;
            self.shared.cv.notify_all();
            return Err(e);
        }

        let shared = Arc::clone(&self.shared);
        let join = thread::Builder::new()
            .name("page-stream".into())
            .spawn(move || {
                let mut order = Vec::new();
                let mut completed = false;
                let mut error = None;
                loop {
                    let frame = match read_frame(&mut reader) {
                        Ok(Some((frame, n))) => {
                            shared.bytes_received.fetch_add(n as u64, Ordering::SeqCst);
                            frame
                        }
                        Ok(None) => {
                            error = Some(ProtocolError::Disconnected.to_string());
                            break;
                        }
                        Err(e) => {
                            error = Some(e.to_string());
                            break;
                        }
                    };
                    match frame {
                        Frame::PageData(pages) => {
                            let fresh: Vec<(u64, Page)> = {
                                let mut st = shared.state.lock().expect("client state poisoned");
                                pages
                                    .into_iter()
                                    .filter(|(id, page)| st.install(*id, page.clone()))
                                    .collect()
                            };
                            shared.cv.notify_all();
                            for (id, page) in &fresh {
                                on_page(*id, page);
                                order.push(*id);
                            }
                        }
                        Frame::Done => {
                            completed = true;
                            break;
                        }
                        Frame::Error { code, message } => {
                            error = Some(format!("{code:?}: {message}"));
                            break;
                        }
                        other => {
                            error = Some(format!("unexpected {} frame", frame_name(&other)));
                            break;
                        }
                    }
                }
                let mut st = shared.state.lock().expect("client state poisoned");
                let mut resident = resident;
                resident.extend(st.pages.keys().copied());
                st.reader = Some(reader);
                st.streaming = false;
                st.stream_error = error.clone();
                shared.cv.notify_all();
                StreamReport {
                    completed,
                    pages_streamed: order.len() as u64,
                    order,
                    resident,
                    error,
                }
            })?;
        Ok(StreamHandle { join: Some(join) })
    }

    /// Streams every page not in `already_resident` and waits for the end of
    /// the stream.
    pub fn stream_remaining<F>(
        &self,
        already_resident: impl IntoIterator<Item = u64>,
        on_page: F,
    ) -> Result<StreamReport, ProtocolError>
    where
        F: FnMut(u64, &Page) + Send + 'static,
    {
        Ok(self.start_stream(already_resident, on_page)?.wait())
    }

    /// Closes both directions of the connection.
    pub fn close(&self) {
        let _ = self.control.shutdown(Shutdown::Both);
    }
}

impl Drop for PageClient {
    fn drop(&mut self) {
        self.close();
    }
}
