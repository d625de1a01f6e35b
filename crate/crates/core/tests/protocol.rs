// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::io::{BufReader, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::thread;

use warmswap_core::image::{dump, page_content, DependencyPool, ProcessSpec};
use warmswap_core::protocol::{
    read_frame, write_frame, ErrorCode, Frame, PageClient, PageServer, ProtocolError, ServerConfig,
};

fn pool_with(images: &[(&str, u64, u64)]) -> Arc<DependencyPool> {
    let pool = DependencyPool::new();
    for &(label, pages, seed) in images {
        pool.register(dump(&ProcessSpec::simple(label, pages, seed)).unwrap())
            .unwrap();
    }
    Arc::new(pool)
}

fn server(pool: Arc<DependencyPool>, batch: usize) -> PageServer {
    PageServer::with_config(
        pool,
        "127.0.0.1:0",
        ServerConfig {
            stream_batch_pages: batch,
        },
    )
    .unwrap()
}

#[test]
fn migrate_then_fetch() {
    let srv = server(pool_with(&[("python+numpy", 8, 5)]), 4);
    let client = PageClient::connect(srv.local_addr()).unwrap();
    let meta = client.request_migration("python+numpy").unwrap();
    assert_eq!(meta.total_pages(), 8);
    assert_eq!(
        client.metadata_wire_len(),
        Some(meta.metadata_size_bytes() as usize)
    );

    let pages = client.fetch_pages(&[3, 1, 3]).unwrap();
    assert_eq!(pages.len(), 3);
    for (id, page) in &pages {
        assert_eq!(page, &page_content(5, *id));
    }
    // a cached page costs no round trip
    let before = client.bytes_sent();
    client.fetch_pages(&[1]).unwrap();
    assert_eq!(client.bytes_sent(), before);
    assert_eq!(client.pages_received(), 2);
    assert_eq!(client.duplicate_pages(), 0);
}

#[test]
fn unknown_dependency_keeps_session_usable() {
    let srv = server(pool_with(&[("python+numpy", 2, 5)]), 4);
    let client = PageClient::connect(srv.local_addr()).unwrap();
    assert!(matches!(
        client.request_migration("python+torch"),
        Err(ProtocolError::UnknownDependency(l)) if l == "python+torch"
    ));
    assert!(matches!(
        client.fetch_pages(&[0]),
        Err(ProtocolError::NotMigrated)
    ));
    client.request_migration("python+numpy").unwrap();
    assert!(matches!(
        client.request_migration("python+numpy"),
        Err(ProtocolError::AlreadyMigrated(_))
    ));
}

#[test]
fn out_of_range_pages_are_rejected() {
    let srv = server(pool_with(&[("a", 4, 1)]), 4);
    let client = PageClient::connect(srv.local_addr()).unwrap();
    client.request_migration("a").unwrap();
    assert!(matches!(
        client.fetch_pages(&[2, 4]),
        Err(ProtocolError::PageOutOfRange(4))
    ));
    assert_eq!(client.fetch_pages(&[2]).unwrap()[0].1, page_content(1, 2));
}

#[test]
fn server_rejects_out_of_range_on_the_wire() {
    let srv = server(pool_with(&[("a", 4, 1)]), 4);
    let mut sock = TcpStream::connect(srv.local_addr()).unwrap();
    let mut reader = BufReader::new(sock.try_clone().unwrap());
    write_frame(
        &mut sock,
        &Frame::MigrateRequest {
            dep_label: "a".into(),
        },
    )
    .unwrap();
    assert!(matches!(
        read_frame(&mut reader).unwrap(),
        Some((Frame::Metadata(_), _))
    ));
    write_frame(&mut sock, &Frame::PageRequest(vec![1, 99])).unwrap();
    match read_frame(&mut reader).unwrap() {
        Some((Frame::Error { code, .. }, _)) => assert_eq!(code, ErrorCode::PageOutOfRange),
        other => panic!("unexpected {other:?}"),
    }
    // the session survives
    write_frame(&mut sock, &Frame::PageRequest(vec![1])).unwrap();
    match read_frame(&mut reader).unwrap() {
        Some((Frame::PageData(pages), _)) => assert_eq!(pages[0].0, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn garbage_gets_malformed_frame_and_close() {
    let srv = server(pool_with(&[("a", 1, 1)]), 4);
    let mut sock = TcpStream::connect(srv.local_addr()).unwrap();
    let mut reader = BufReader::new(sock.try_clone().unwrap());
    // kind 0x42 is not defined
    sock.write_all(&[0, 0, 0, 0, 0x42]).unwrap();
    match read_frame(&mut reader).unwrap() {
        Some((Frame::Error { code, .. }, _)) => assert_eq!(code, ErrorCode::MalformedFrame),
        other => panic!("unexpected {other:?}"),
    }
    assert!(read_frame(&mut reader).unwrap().is_none());
}

#[test]
fn stream_delivers_every_page_once_in_order() {
    let srv = server(pool_with(&[("a", 100, 9)]), 7);
    let client = PageClient::connect(srv.local_addr()).unwrap();
    client.request_migration("a").unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&seen);
    let report = client
        .stream_remaining([0, 1, 50], move |id, page| {
            assert_eq!(page, &page_content(9, id));
            sink.lock().unwrap().push(id);
        })
        .unwrap();
    assert!(report.completed, "{report:?}");
    let expected: Vec<u64> = (0..100).filter(|id| ![0, 1, 50].contains(id)).collect();
    assert_eq!(report.order, expected);
    assert_eq!(*seen.lock().unwrap(), expected);
    assert_eq!(report.resident.len(), 100);
    assert_eq!(client.duplicate_pages(), 0);
    // the declared-resident pages can still be fetched afterwards
    assert_eq!(client.fetch_pages(&[50]).unwrap()[0].1, page_content(9, 50));
    assert_eq!(srv.stats().pages_streamed, 97);
}

#[test]
fn faults_preempt_a_running_stream() {
    let srv = server(pool_with(&[("a", 2000, 3)]), 1);
    let client = Arc::new(PageClient::connect(srv.local_addr()).unwrap());
    client.request_migration("a").unwrap();
    let handle = client.start_stream([], |_, _| {}).unwrap();
    assert!(matches!(
        client.start_stream([], |_, _| {}),
        Err(ProtocolError::StreamActive)
    ));
    // pages near the end of the stream arrive well before the stream reaches them
    let faulted = client.fetch_pages(&[1999, 1500]).unwrap();
    assert_eq!(faulted[0].1, page_content(3, 1999));
    assert_eq!(faulted[1].1, page_content(3, 1500));
    let report = handle.wait();
    assert!(report.completed);
    let pos = |id: u64| report.order.iter().position(|&x| x == id).unwrap();
    assert!(pos(1999) < 1999, "fault answered in stream order");
    let unique: HashSet<u64> = report.order.iter().copied().collect();
    assert_eq!(unique.len(), 2000);
    assert_eq!(report.order.len(), 2000);
    assert_eq!(client.duplicate_pages(), 0);
    assert_eq!(client.pages_received(), 2000);
}

#[test]
fn concurrent_sessions_are_isolated() {
    let srv = server(pool_with(&[("a", 64, 1), ("b", 64, 2)]), 8);
    let addr = srv.local_addr();
    let workers: Vec<_> = (0..8)
        .map(|i| {
            thread::spawn(move || {
                let (label, seed) = if i % 2 == 0 { ("a", 1) } else { ("b", 2) };
                let client = PageClient::connect(addr).unwrap();
                client.request_migration(label).unwrap();
                if i % 4 < 2 {
                    let report = client.stream_remaining([], |_, _| {}).unwrap();
                    assert!(report.completed);
                }
                for id in (0..64).step_by(5) {
                    let page = &client.fetch_pages(&[id]).unwrap()[0].1;
                    assert_eq!(page, &page_content(seed, id));
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    assert_eq!(srv.stats().sessions, 8);
    let stats = srv.shutdown();
    assert!(stats.bytes_sent > 0);
}

#[test]
fn dropped_session_yields_partial_report() {
    let srv = server(pool_with(&[("a", 4000, 3)]), 1);
    let client = PageClient::connect(srv.local_addr()).unwrap();
    client.request_migration("a").unwrap();
    let got = Arc::new(Mutex::new(0u64));
    let counter = Arc::clone(&got);
    let handle = client
        .start_stream([], move |_, _| *counter.lock().unwrap() += 1)
        .unwrap();
    while *got.lock().unwrap() < 10 {
        thread::yield_now();
    }
    drop(srv);
    let report = handle.wait();
    assert!(!report.completed);
    assert!(report.error.is_some());
    assert!(report.pages_streamed >= 10);
    assert_eq!(report.resident.len() as u64, report.pages_streamed);
    // resuming on a new session sends only what is missing
    let srv = server(pool_with(&[("a", 4000, 3)]), 64);
    let again = PageClient::connect(srv.local_addr()).unwrap();
    again.request_migration("a").unwrap();
    let rest = again
        .stream_remaining(report.resident.iter().copied(), |_, _| {})
        .unwrap();
    assert!(rest.completed);
    assert_eq!(rest.pages_streamed + report.pages_streamed, 4000);
}

#[test]
fn byte_accounting_matches_both_ends() {
    let srv = server(pool_with(&[("a", 10, 3)]), 3);
    let client = PageClient::connect(srv.local_addr()).unwrap();
    client.request_migration("a").unwrap();
    client.fetch_pages(&[0]).unwrap();
    client.stream_remaining([0], |_, _| {}).unwrap();
    // let the server close out its counters
    drop(client);
    let stats = srv.shutdown();
    // metadata frame + 10 pages with their frame overhead
    assert_eq!(stats.pages_streamed, 9);
    assert_eq!(stats.faults_served, 1);
    assert!(stats.bytes_sent >= 10 * 4096);
}

#[test]
fn client_bytes_received_equal_server_bytes_sent() {
    let srv = server(pool_with(&[("a", 20, 3)]), 3);
    let client = PageClient::connect(srv.local_addr()).unwrap();
    client.request_migration("a").unwrap();
    client.fetch_pages(&[4, 5]).unwrap();
    client.stream_remaining([], |_, _| {}).unwrap();
    let received = client.bytes_received();
    drop(client);
    let stats = srv.shutdown();
    assert_eq!(received, stats.bytes_sent);
}
