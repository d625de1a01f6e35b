// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use super::frame::{read_frame, write_frame, ErrorCode, Frame, MAX_PAGES_PER_FRAME};
use super::{frame_name, ProtocolError};
use crate::image::{DependencyPool, PoolLease};

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    /// Pages per `PageData` frame while bulk streaming, 1..=256.
    pub stream_batch_pages: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            stream_batch_pages: 32,
        }
    }
}

/// Cumulative server counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub sessions: u64,
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub pages_streamed: u64,
    pub faults_served: u64,
}

#[derive(Debug, Default)]
struct Counters {
    sessions: AtomicU64,
    active: AtomicU64,
    frames_sent: AtomicU64,
    bytes_sent: AtomicU64,
    pages_streamed: AtomicU64,
    faults_served: AtomicU64,
}

struct SessionSlot {
    stream: TcpStream,
    handle: JoinHandle<()>,
}

/// A running page server. Dropping it shuts it down.
pub struct PageServer {
    addr: SocketAddr,
    counters: Arc<Counters>,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    sessions: Arc<Mutex<Vec<SessionSlot>>>,
}

impl PageServer {
    pub fn serve(pool: Arc<DependencyPool>, endpoint: &str) -> Result<Self, ProtocolError> {
        Self::with_config(pool, endpoint, ServerConfig::default())
    }

    pub fn with_config(
        pool: Arc<DependencyPool>,
        endpoint: &str,
        config: ServerConfig,
    ) -> Result<Self, ProtocolError> {
        let config = ServerConfig {
            stream_batch_pages: config.stream_batch_pages.clamp(1, 256),
        };
        let listener = TcpListener::bind(endpoint)?;
        let addr = listener.local_addr()?;
        let counters = Arc::new(Counters::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let sessions: Arc<Mutex<Vec<SessionSlot>>> = Arc::default();

        let accept = {
            let counters = Arc::clone(&counters);
            let shutdown = Arc::clone(&shutdown);
            let sessions = Arc::clone(&sessions);
            thread::Builder::new()
                .name("page-server-accept".into())
                .spawn(move || accept_loop(listener, pool, config, counters, shutdown, sessions))?
        };
        log::info!("page server listening on {addr}");
        Ok(Self {
            addr,
            counters,
            shutdown,
            accept: Some(accept),
            sessions,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        let c = &self.counters;
        ServerStats {
            sessions: c.sessions.load(Ordering::SeqCst),
            frames_sent: c.frames_sent.load(Ordering::SeqCst),
            bytes_sent: c.bytes_sent.load(Ordering::SeqCst),
            pages_streamed: c.pages_streamed.load(Ordering::SeqCst),
            faults_served: c.faults_served.load(Ordering::SeqCst),
        }
    }

    pub fn active_sessions(&self) -> u64 {
        self.counters.active.load(Ordering::SeqCst)
    }

    /// Stops accepting, closes every open session and returns final counters.
    pub fn shutdown(mut self) -> ServerStats {
        self.stop();
        self.stats()
    }

    fn stop(&mut self) {
        let Some(accept) = self.accept.take() else {
            return;
        };
        self.shutdown.store(true, Ordering::SeqCst);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(if wake.is_ipv4() {
                [127, 0, 0, 1].into()
            } else {
                std::net::Ipv6Addr::LOCALHOST.into()
            });
        }
        let _ = TcpStream::connect(wake);
        let _ = accept.join();
        let slots = std::mem::take(&mut *self.sessions.lock().expect("session list poisoned"));
        for slot in slots {
            let _ = slot.stream.shutdown(Shutdown::Both);
            let _ = slot.handle.join();
        }
        log::info!("page server on {} stopped", self.addr);
    }
}

impl Drop for PageServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(
    listener: TcpListener,
    pool: Arc<DependencyPool>,
    config: ServerConfig,
    counters: Arc<Counters>,
    shutdown: Arc<AtomicBool>,
    sessions: Arc<Mutex<Vec<SessionSlot>>>,
) {
    for conn in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let Ok(control) = stream.try_clone() else {
            continue;
        };
        counters.sessions.fetch_add(1, Ordering::SeqCst);
        counters.active.fetch_add(1, Ordering::SeqCst);
        let pool = Arc::clone(&pool);
        let session_counters = Arc::clone(&counters);
        let spawned = thread::Builder::new()
            .name("page-server-session".into())
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = run_session(stream, &pool, config, &session_counters) {
                    log::debug!("session {peer:?} ended: {e}");
                }
                session_counters.active.fetch_sub(1, Ordering::SeqCst);
            });
        match spawned {
            Ok(handle) => {
                let mut list = sessions.lock().expect("session list poisoned");
                list.retain(|s| !s.handle.is_finished());
                list.push(SessionSlot {
                    stream: control,
                    handle,
                });
            }
            Err(e) => {
                log::warn!("could not spawn session thread: {e}");
                counters.active.fetch_sub(1, Ordering::SeqCst);
            }
        }
    }
}

struct Migrated {
    lease: PoolLease,
    sent: HashSet<u64>,
    stream: Option<StreamCursor>,
}

struct StreamCursor {
    queue: Vec<u64>,
    pos: usize,
}

struct Session<'a> {
    writer: TcpStream,
    pool: &'a DependencyPool,
    config: ServerConfig,
    counters: &'a Counters,
    migrated: Option<Migrated>,
}

enum Next {
    Continue,
    Close,
}

fn run_session(
    stream: TcpStream,
    pool: &DependencyPool,
    config: ServerConfig,
    counters: &Counters,
) -> Result<(), ProtocolError> {
    let reader_stream = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    let reader = thread::Builder::new()
        .name("page-server-reader".into())
        .spawn(move || {
            let mut r = BufReader::with_capacity(64 << 10, reader_stream);
            loop {
                match read_frame(&mut r) {
                    Ok(Some((frame, _))) => {
                        if tx.send(Ok(frame)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        })?;

    let mut session = Session {
        writer: stream,
        pool,
        config,
        counters,
        migrated: None,
    };
    let result = session.run(&rx);
    let _ = session.writer.shutdown(Shutdown::Both);
    let _ = reader.join();
    result
}

impl Session<'_> {
    fn run(&mut self, rx: &Receiver<Result<Frame, ProtocolError>>) -> Result<(), ProtocolError> {
        loop {
            let streaming = self.migrated.as_ref().is_some_and(|m| m.stream.is_some());
            let msg = if streaming {
                match rx.try_recv() {
                    Ok(m) => Some(m),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => return Ok(()),
                }
            } else {
                match rx.recv() {
                    Ok(m) => Some(m),
                    Err(_) => return Ok(()),
                }
            };
            match msg {
                // Requests always go ahead of the next stream batch.
                Some(Ok(frame)) => {
                    if let Next::Close = self.handle(frame)? {
                        return Ok(());
                    }
                }
                Some(Err(e)) => {
                    self.send(&Frame::error(ErrorCode::MalformedFrame, e.to_string()))?;
                    return Err(e);
                }
                None => self.stream_step()?,
            }
        }
    }

    fn send(&mut self, frame: &Frame) -> Result<(), ProtocolError> {
        let n = write_frame(&mut self.writer, frame)?;
        self.counters.frames_sent.fetch_add(1, Ordering::SeqCst);
        self.counters
            .bytes_sent
            .fetch_add(n as u64, Ordering::SeqCst);
        Ok(())
    }

    fn violation(&mut self, message: String) -> Result<Next, ProtocolError> {
        log::debug!("protocol violation: {message}");
        self.send(&Frame::error(ErrorCode::MalformedFrame, message))?;
        Ok(Next::Close)
    }

    fn handle(&mut self, frame: Frame) -> Result<Next, ProtocolError> {
        match frame {
            Frame::MigrateRequest { dep_label } => {
                if let Some(m) = &self.migrated {
                    let label = m.lease.image().label().to_owned();
                    return self.violation(format!("session already migrated {label:?}"));
                }
                match self.pool.checkout(&dep_label) {
                    Some(lease) => {
                        let meta = lease.image().metadata().encode();
                        self.migrated = Some(Migrated {
                            lease,
                            sent: HashSet::new(),
                            stream: None,
                        });
                        self.send(&Frame::Metadata(meta))?;
                    }
                    None => {
                        self.send(&Frame::error(
                            ErrorCode::UnknownDependency,
                            format!("no dependency image {dep_label:?}"),
                        ))?;
                    }
                }
                Ok(Next::Continue)
            }
            Frame::PageRequest(ids) => {
                let Some(m) = self.migrated.as_mut() else {
                    return self.violation("page request before migration".into());
                };
                self.counters.faults_served.fetch_add(1, Ordering::SeqCst);
                let image = Arc::clone(m.lease.image());
                if let Some(&bad) = ids.iter().find(|&&id| image.page(id).is_none()) {
                    self.send(&Frame::error(
                        ErrorCode::PageOutOfRange,
                        format!("page {bad} is not part of {:?}", image.label()),
                    ))?;
                    return Ok(Next::Continue);
                }
                let unsent: Vec<u64> = ids.into_iter().filter(|&id| m.sent.insert(id)).collect();
                for chunk in unsent.chunks(MAX_PAGES_PER_FRAME) {
                    let pages = chunk
                        .iter()
                        .map(|&id| (id, image.page(id).expect("checked above").clone()))
                        .collect();
                    self.send(&Frame::PageData(pages))?;
                }
                Ok(Next::Continue)
            }
            Frame::PrefetchRequest(resident) => {
                let Some(m) = self.migrated.as_mut() else {
                    return self.violation("prefetch before migration".into());
                };
                if m.stream.is_some() {
                    return self.violation("prefetch while a stream is running".into());
                }
                let resident: HashSet<u64> = resident.into_iter().collect();
                let queue: Vec<u64> = m
                    .lease
                    .image()
                    .pages()
                    .map(|(id, _)| id)
                    .filter(|id| !resident.contains(id) && !m.sent.contains(id))
                    .collect();
                m.stream = Some(StreamCursor { queue, pos: 0 });
                Ok(Next::Continue)
            }
            Frame::Done => Ok(Next::Close),
            other => {
                let name = frame_name(&other);
                self.violation(format!("{name} is not a client frame"))
            }
        }
    }

    /// Sends the next bulk batch, or `Done` once the queue is drained.
    fn stream_step(&mut self) -> Result<(), ProtocolError> {
        let batch_size = self.config.stream_batch_pages;
        let Some(m) = self.migrated.as_mut() else {
            return Ok(());
        };
        let Some(cursor) = m.stream.as_mut() else {
            return Ok(());
        };
        let image = Arc::clone(m.lease.image());
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size && cursor.pos < cursor.queue.len() {
            let id = cursor.queue[cursor.pos];
            cursor.pos += 1;
            if m.sent.insert(id) {
                batch.push((id, image.page(id).expect("queued from image").clone()));
            }
        }
        let finished = cursor.pos >= cursor.queue.len();
        if finished {
            m.stream = None;
        }
        if !batch.is_empty() {
            let n = batch.len() as u64;
            self.send(&Frame::PageData(batch))?;
            self.counters.pages_streamed.fetch_add(n, Ordering::SeqCst);
        }
        if finished {
            self.send(&Frame::Done)?;
        }
        Ok(())
    }
}
