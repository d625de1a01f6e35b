// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Page-server protocol.
//!
//! A session migrates exactly one dependency image:
//!
//! 1. The client sends `MigrateRequest(label)`; the server answers with the
//!    image's `Metadata`, or `Error(UnknownDependency)`.
//! 2. `PageRequest(ids)` fetches pages on demand (a page fault).
//! 3. `PrefetchRequest(resident)` starts a bulk stream of every page not in
//!    `resident`, in ascending id order, closed by `Done`. Page requests that
//!    arrive while a stream is running are answered before the next stream
//!    batch.
//!
//! The server never sends a page twice within a session. A `PageRequest`
//! whose pages have all been sent already gets no reply; the client keeps
//! every page it has received and only asks for pages it has not seen. This
//! is what lets a fault overlap a running stream without either side having
//! to tell fault replies and stream batches apart.

mod client;
mod frame;
mod server;

use std::io;

use thiserror::Error;

use crate::image::ImageError;

pub use client::{PageClient, StreamHandle, StreamReport};
pub use frame::{
    decode_frame, encode_frame, kind, read_frame, write_frame, ErrorCode, Frame, FRAME_HEADER,
    MAX_IDS_PER_FRAME, MAX_PAGES_PER_FRAME, MAX_PAYLOAD,
};
pub use server::{PageServer, ServerConfig, ServerStats};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame payload of {0} bytes exceeds the 64 MiB cap")]
    PayloadTooLarge(usize),
    #[error("unknown dependency {0:?}")]
    UnknownDependency(String),
    #[error("page {0} is outside the migrated image")]
    PageOutOfRange(u64),
    #[error("server error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected {0} frame")]
    Unexpected(&'static str),
    #[error("no migration has been requested on this session")]
    NotMigrated,
    #[error("this session already migrated {0:?}")]
    AlreadyMigrated(String),
    #[error("a bulk stream is already running on this session")]
    StreamActive,
    #[error("bad metadata from server: {0}")]
    Metadata(#[from] ImageError),
    #[error("connection closed by peer")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ProtocolError {
    /// Protocol-level error code this error maps to, if any.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            Self::Malformed(_) | Self::PayloadTooLarge(_) | Self::Unexpected(_) => {
                Some(ErrorCode::MalformedFrame)
            }
            Self::UnknownDependency(_) => Some(ErrorCode::UnknownDependency),
            Self::PageOutOfRange(_) => Some(ErrorCode::PageOutOfRange),
            Self::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }

    pub fn is_network(&self) -> bool {
        matches!(self, Self::Io(_) | Self::Disconnected)
    }
}

pub(crate) fn frame_name(frame: &Frame) -> &'static str {
    match frame {
        Frame::MigrateRequest { .. } => "MigrateRequest",
        Frame::Metadata(_) => "Metadata",
        Frame::PageRequest(_) => "PageRequest",
        Frame::PageData(_) => "PageData",
        Frame::PrefetchRequest(_) => "PrefetchRequest",
        Frame::Done => "Done",
        Frame::Error { .. } => "Error",
    }
}
