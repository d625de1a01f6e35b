// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::image::{Page, PAGE_SIZE};

/// Largest payload a frame may carry.
pub const MAX_PAYLOAD: usize = 64 << 20;

/// Bytes before the payload: length u32 + kind u8.
pub const FRAME_HEADER: usize = 5;

/// Most pages that fit in one `PageData` payload.
pub const MAX_PAGES_PER_FRAME: usize = (MAX_PAYLOAD - 4) / (8 + PAGE_SIZE);

/// Most ids that fit in one `PageRequest` or `PrefetchRequest` payload.
pub const MAX_IDS_PER_FRAME: usize = (MAX_PAYLOAD - 4) / 8;

pub mod kind {
    pub const MIGRATE_REQUEST: u8 = 0x01;
    pub const METADATA: u8 = 0x02;
    pub const PAGE_REQUEST: u8 = 0x03;
    pub const PAGE_DATA: u8 = 0x04;
    pub const PREFETCH_REQUEST: u8 = 0x05;
    pub const DONE: u8 = 0x06;
    pub const ERROR: u8 = 0x7F;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u16)]
pub enum ErrorCode {
    UnknownDependency = 1,
    MalformedFrame = 2,
    PageOutOfRange = 3,
}

impl ErrorCode {
    pub fn from_u16(code: u16) -> Option<Self> {
        match code {
            1 => Some(Self::UnknownDependency),
            2 => Some(Self::MalformedFrame),
            3 => Some(Self::PageOutOfRange),
            _ => None,
        }
    }
}

/// One protocol message.
///
/// Wire layout: payload length (u32 LE), kind (u8), payload. Payloads:
///
/// | kind              | payload                                      |
/// |-------------------|----------------------------------------------|
/// | `MigrateRequest`  | label: u32 length + UTF-8                    |
/// | `Metadata`        | encoded `ProcessMetadata`                    |
/// | `PageRequest`     | count u32, count x page id u64               |
/// | `PageData`        | count u32, count x (page id u64, 4096 bytes) |
/// | `PrefetchRequest` | count u32, count x already-resident id u64   |
/// | `Done`            | empty                                        |
/// | `Error`           | code u16, message: u32 length + UTF-8        |
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    MigrateRequest { dep_label: String },
    Metadata(Vec<u8>),
    PageRequest(Vec<u64>),
    PageData(Vec<(u64, Page)>),
    PrefetchRequest(Vec<u64>),
    Done,
    Error { code: ErrorCode, message: String },
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Self::MigrateRequest { .. } => kind::MIGRATE_REQUEST,
            Self::Metadata(_) => kind::METADATA,
            Self::PageRequest(_) => kind::PAGE_REQUEST,
            Self::PageData(_) => kind::PAGE_DATA,
            Self::PrefetchRequest(_) => kind::PREFETCH_REQUEST,
            Self::Done => kind::DONE,
            Self::Error { .. } => kind::ERROR,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::Error {
            code,
            message: message.into(),
        }
    }

    fn payload_len(&self) -> usize {
        match self {
            Self::MigrateRequest { dep_label } => 4 + dep_label.len(),
            Self::Metadata(bytes) => bytes.len(),
            Self::PageRequest(ids) | Self::PrefetchRequest(ids) => 4 + ids.len() * 8,
            Self::PageData(pages) => 4 + pages.len() * (8 + PAGE_SIZE),
            Self::Done => 0,
            Self::Error { message, .. } => 2 + 4 + message.len(),
        }
    }

    /// Total encoded length including the header.
    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER + self.payload_len()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_ids(out: &mut Vec<u8>, ids: &[u64]) {
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, ProtocolError> {
    let len = frame.payload_len();
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(len));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER + len);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.push(frame.kind());
    match frame {
        Frame::MigrateRequest { dep_label } => put_str(&mut out, dep_label),
        Frame::Metadata(bytes) => out.extend_from_slice(bytes),
        Frame::PageRequest(ids) | Frame::PrefetchRequest(ids) => put_ids(&mut out, ids),
        Frame::PageData(pages) => {
            out.extend_from_slice(&(pages.len() as u32).to_le_bytes());
            for (id, page) in pages {
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(page);
            }
        }
        Frame::Done => {}
        Frame::Error { code, message } => {
            out.extend_from_slice(&(*code as u16).to_le_bytes());
            put_str(&mut out, message);
        }
    }
    debug_assert_eq!(out.len(), FRAME_HEADER + len);
    Ok(out)
}

/// Decodes exactly one frame spanning all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    if bytes.len() < FRAME_HEADER {
        return Err(malformed("short frame header"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(malformed(format!("payload length {len} exceeds cap")));
    }
    if bytes.len() - FRAME_HEADER != len {
        return Err(malformed(format!(
            "payload length {len} but {} bytes follow the header",
            bytes.len() - FRAME_HEADER
        )));
    }
    decode_payload(bytes[4], &bytes[FRAME_HEADER..])
}

/// Reads one frame from a stream. Returns `Ok(None)` on a clean end of stream
/// at a frame boundary, together with the encoded size otherwise.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<(Frame, usize)>, ProtocolError> {
    let mut header = [0u8; FRAME_HEADER];
    let mut filled = 0;
    while filled < FRAME_HEADER {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Disconnected),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(malformed(format!("payload length {len} exceeds cap")));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ProtocolError::Disconnected
        } else {
            e.into()
        }
    })?;
    let frame = decode_payload(header[4], &payload)?;
    Ok(Some((frame, FRAME_HEADER + len)))
}

/// Encodes and writes a frame, returning the number of bytes written.
pub fn write_frame<W: Write>(writer: &mut W, frame: &Frame) -> Result<usize, ProtocolError> {
    let bytes = encode_frame(frame)?;
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(bytes.len())
}

fn malformed(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed(msg.into())
}

struct Payload<'a> {
    buf: &'a [u8],
}

impl<'a> Payload<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() < n {
            return Err(malformed("truncated payload"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, ProtocolError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| malformed("invalid UTF-8"))
    }

    fn counted(&mut self, record: usize) -> Result<usize, ProtocolError> {
        let count = self.u32()? as usize;
        if count.checked_mul(record) != Some(self.buf.len()) {
            return Err(malformed(format!(
                "count {count} does not match {} payload bytes",
                self.buf.len()
            )));
        }
        Ok(count)
    }

    fn ids(&mut self) -> Result<Vec<u64>, ProtocolError> {
        let count = self.counted(8)?;
        (0..count).map(|_| self.u64()).collect()
    }

    fn finish(self) -> Result<(), ProtocolError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(malformed(format!(
                "{} trailing payload bytes",
                self.buf.len()
            )))
        }
    }
}

fn decode_payload(kind_byte: u8, payload: &[u8]) -> Result<Frame, ProtocolError> {
    let mut p = Payload { buf: payload };
    let frame = match kind_byte {
        kind::MIGRATE_REQUEST => Frame::MigrateRequest {
            dep_label: p.string()?,
        },
        kind::METADATA => Frame::Metadata(p.take(payload.len())?.to_vec()),
        kind::PAGE_REQUEST => Frame::PageRequest(p.ids()?),
        kind::PREFETCH_REQUEST => Frame::PrefetchRequest(p.ids()?),
        kind::PAGE_DATA => {
            let count = p.counted(8 + PAGE_SIZE)?;
            let mut pages = Vec::with_capacity(count);
            for _ in 0..count {
                let id = p.u64()?;
                let page = Page::from_slice(p.take(PAGE_SIZE)?).expect("exact page slice");
                pages.push((id, page));
            }
            Frame::PageData(pages)
        }
        kind::DONE => Frame::Done,
        kind::ERROR => {
            let raw = p.u16()?;
            let code = ErrorCode::from_u16(raw)
                .ok_or_else(|| malformed(format!("unknown error code {raw}")))?;
            Frame::Error {
                code,
                message: p.string()?,
            }
        }
        other => return Err(malformed(format!("unknown frame kind {other:#04x}"))),
    };
    p.finish()?;
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::page_content;

    #[test]
    fn done_bytes() {
        assert_eq!(encode_frame(&Frame::Done).unwrap(), vec![0, 0, 0, 0, 6]);
        assert_eq!(decode_frame(&[0, 0, 0, 0, 6]).unwrap(), Frame::Done);
    }

    #[test]
    fn page_request_layout() {
        let bytes = encode_frame(&Frame::PageRequest(vec![7])).unwrap();
        assert_eq!(
            bytes,
            vec![12, 0, 0, 0, 0x03, 1, 0, 0, 0, 7, 0, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn other_layouts() {
        let bytes = encode_frame(&Frame::MigrateRequest {
            dep_label: "py".into(),
        })
        .unwrap();
        assert_eq!(bytes, vec![6, 0, 0, 0, 0x01, 2, 0, 0, 0, b'p', b'y']);

        let bytes = encode_frame(&Frame::error(ErrorCode::PageOutOfRange, "x")).unwrap();
        assert_eq!(bytes, vec![7, 0, 0, 0, 0x7F, 3, 0, 1, 0, 0, 0, b'x']);

        let page = page_content(1, 2);
        let bytes = encode_frame(&Frame::PageData(vec![(2, page.clone())])).unwrap();
        assert_eq!(bytes.len(), 5 + 4 + 8 + 4096);
        assert_eq!(&bytes[..5], &[(4 + 8 + 4096u32) as u8, 0x10, 0, 0, 0x04]);
        assert_eq!(&bytes[9..17], &2u64.to_le_bytes());
        assert_eq!(&bytes[17..], &page[..]);
    }

    #[test]
    fn malformed_inputs() {
        let cases: Vec<Vec<u8>> = vec![
            vec![],
            vec![0, 0, 0],
            vec![0, 0, 0, 0, 0x42],
            vec![1, 0, 0, 0, 0x06, 0],
            vec![0, 0, 0, 0x10, 0x06],
            vec![4, 0, 0, 0, 0x03, 1, 0, 0, 0],
            vec![6, 0, 0, 0, 0x7F, 9, 0, 0, 0, 0, 0],
            vec![6, 0, 0, 0, 0x01, 2, 0, 0, 0, 0xff, 0xfe],
        ];
        for bytes in cases {
            assert!(
                matches!(decode_frame(&bytes), Err(ProtocolError::Malformed(_))),
                "{bytes:?}"
            );
        }
    }

    #[test]
    fn oversized_payload_rejected() {
        let ids = vec![0u64; MAX_IDS_PER_FRAME + 1];
        assert!(matches!(
            encode_frame(&Frame::PageRequest(ids)),
            Err(ProtocolError::PayloadTooLarge(_))
        ));
        assert!(encode_frame(&Frame::PageRequest(vec![0u64; MAX_IDS_PER_FRAME])).is_ok());
    }

    #[test]
    fn stream_reading() {
        let mut buf = Vec::new();
        let frames = vec![
            Frame::MigrateRequest {
                dep_label: "a".into(),
            },
            Frame::PageRequest(vec![1, 2, 3]),
            Frame::Done,
        ];
        for f in &frames {
            write_frame(&mut buf, f).unwrap();
        }
        let mut r = buf.as_slice();
        for f in &frames {
            let (got, n) = read_frame(&mut r).unwrap().unwrap();
            assert_eq!(&got, f);
            assert_eq!(n, f.encoded_len());
        }
        assert!(read_frame(&mut r).unwrap().is_none());

        let mut short = &buf[..3];
        assert!(matches!(
            read_frame(&mut short),
            Err(ProtocolError::Disconnected)
        ));
        let mut short = &buf[..8];
        assert!(matches!(
            read_frame(&mut short),
            Err(ProtocolError::Disconnected)
        ));
    }
}
