// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Live dependency images.
//!
//! A [`DependencyImage`] is a checkpoint of a process that has booted its
//! runtime and imported its packages, but has not loaded any user code. It
//! splits into [`ProcessMetadata`] (the skeleton needed to rebuild the process:
//! memory segments and open files) and the memory pages themselves.
//!
//! Processes here are synthetic. [`dump`] materializes a [`ProcessSpec`] into
//! an image whose page contents are a pure function of the spec's seed and the
//! page id (see [`page_content`]), so any page can be regenerated to check a
//! transfer end to end.

mod checkpoint;
mod pool;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub use checkpoint::{
    checkpoint_size, read_checkpoint, read_checkpoint_bytes, write_checkpoint, write_checkpoint_to,
};
pub use pool::{image_footprint_bytes, DependencyPool, PoolLease, PoolSnapshot};

pub const PAGE_SIZE: usize = 4096;

/// Checkpoint file magic.
pub const MAGIC: &[u8; 8] = b"WSWAPIM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 8]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed image: {0}")]
    Malformed(String),
    #[error("invalid process spec: {0}")]
    InvalidSpec(String),
    #[error("dependency {0:?} is already registered")]
    DuplicateLabel(String),
    #[error("dependency label must not be empty")]
    EmptyLabel,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ImageError {
    /// True for errors caused by the bytes of a checkpoint rather than I/O.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Self::BadMagic(_)
                | Self::UnsupportedVersion(_)
                | Self::ChecksumMismatch { .. }
                | Self::Truncated { .. }
                | Self::Malformed(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Permission {
    Read,
    ReadWrite,
    Execute,
}

impl Permission {
    fn tag(self) -> u8 {
        match self {
            Self::Read => 0,
            Self::ReadWrite => 1,
            Self::Execute => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Read),
            1 => Some(Self::ReadWrite),
            2 => Some(Self::Execute),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileKind {
    Regular,
    Socket,
    Device,
}

impl FileKind {
    fn tag(self) -> u8 {
        match self {
            Self::Regular => 0,
            Self::Socket => 1,
            Self::Device => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Regular),
            1 => Some(Self::Socket),
            2 => Some(Self::Device),
            _ => None,
        }
    }
}

/// A contiguous run of pages in page-id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub base_page_id: u64,
    pub page_count: u64,
    pub permission: Permission,
}

impl Segment {
    /// One past the last page id.
    pub fn end(&self) -> u64 {
        self.base_page_id.saturating_add(self.page_count)
    }

    pub fn contains(&self, page_id: u64) -> bool {
        page_id >= self.base_page_id && page_id < self.end()
    }

    pub fn page_ids(&self) -> std::ops::Range<u64> {
        self.base_page_id..self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub fd: u32,
    pub path: String,
    pub kind: FileKind,
}

/// Everything needed to rebuild a dependency process except its pages.
///
/// The wire form is the header of the checkpoint format, from the magic up to
/// and including the page size. `metadata_size_bytes` is the length of that
/// encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessMetadata {
    dep_label: String,
    entry_token: String,
    segments: Vec<Segment>,
    file_table: Vec<FileEntry>,
    total_pages: u64,
    metadata_size_bytes: u64,
}

impl ProcessMetadata {
    pub fn new(
        dep_label: impl Into<String>,
        entry_token: impl Into<String>,
        segments: Vec<Segment>,
        file_table: Vec<FileEntry>,
    ) -> Result<Self, ImageError> {
        let dep_label = dep_label.into();
        let entry_token = entry_token.into();
        check_segments(&segments)?;
        check_files(&file_table)?;
        let total_pages = segments.iter().map(|s| s.page_count).sum();
        let metadata_size_bytes = (8
            + 4
            + 4
            + dep_label.len()
            + 4
            + entry_token.len()
            + 4
            + segments.len() * 17
            + 4
            + file_table.iter().map(|f| 9 + f.path.len()).sum::<usize>()
            + 8
            + 4) as u64;
        Ok(Self {
            dep_label,
            entry_token,
            segments,
            file_table,
            total_pages,
            metadata_size_bytes,
        })
    }

    pub fn dep_label(&self) -> &str {
        &self.dep_label
    }

    /// Name of the continuation run after restore (loading the user handler).
    pub fn entry_token(&self) -> &str {
        &self.entry_token
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn file_table(&self) -> &[FileEntry] {
        &self.file_table
    }

    pub fn page_size_bytes(&self) -> u32 {
        PAGE_SIZE as u32
    }

    pub fn total_pages(&self) -> u64 {
        self.total_pages
    }

    pub fn metadata_size_bytes(&self) -> u64 {
        self.metadata_size_bytes
    }

    pub fn contains_page(&self, page_id: u64) -> bool {
        self.segments.iter().any(|s| s.contains(page_id))
    }

    /// All covered page ids, ascending.
    pub fn page_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.segments.iter().flat_map(|s| s.page_ids()).collect();
        ids.sort_unstable();
        ids
    }

    /// Serializes the checkpoint header.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.metadata_size_bytes as usize);
        self.encode_into(&mut out);
        out
    }

    pub(crate) fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(out, &self.dep_label);
        put_str(out, &self.entry_token);
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for s in &self.segments {
            out.extend_from_slice(&s.base_page_id.to_le_bytes());
            out.extend_from_slice(&s.page_count.to_le_bytes());
            out.push(s.permission.tag());
        }
        out.extend_from_slice(&(self.file_table.len() as u32).to_le_bytes());
        for f in &self.file_table {
            out.extend_from_slice(&f.fd.to_le_bytes());
            out.push(f.kind.tag());
            put_str(out, &f.path);
        }
        out.extend_from_slice(&self.total_pages.to_le_bytes());
        out.extend_from_slice(&(PAGE_SIZE as u32).to_le_bytes());
    }

    /// Parses a header that must span all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut cur = Cursor::new(bytes);
        let meta = Self::decode_from(&mut cur)?;
        if cur.remaining() != 0 {
            return Err(ImageError::Malformed(format!(
                "{} trailing bytes after metadata",
                cur.remaining()
            )));
        }
        Ok(meta)
    }

    pub(crate) fn decode_from(cur: &mut Cursor<'_>) -> Result<Self, ImageError> {
        let magic: [u8; 8] = cur.take(8)?.try_into().expect("8 bytes");
        if &magic != MAGIC {
            return Err(ImageError::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(ImageError::UnsupportedVersion(version));
        }
        let dep_label = cur.string()?;
        let entry_token = cur.string()?;
        let segment_count = cur.u32()? as usize;
        cur.ensure(segment_count.saturating_mul(17))?;
        let mut segments = Vec::with_capacity(segment_count);
        for _ in 0..segment_count {
            let base_page_id = cur.u64()?;
            let page_count = cur.u64()?;
            let tag = cur.u8()?;
            let permission = Permission::from_tag(tag)
                .ok_or_else(|| ImageError::Malformed(format!("unknown permission tag {tag}")))?;
            segments.push(Segment {
                base_page_id,
                page_count,
                permission,
            });
        }
        let file_count = cur.u32()? as usize;
        cur.ensure(file_count.saturating_mul(9))?;
        let mut file_table = Vec::with_capacity(file_count);
        for _ in 0..file_count {
            let fd = cur.u32()?;
            let tag = cur.u8()?;
            let kind = FileKind::from_tag(tag)
                .ok_or_else(|| ImageError::Malformed(format!("unknown file kind {tag}")))?;
            let path = cur.string()?;
            file_table.push(FileEntry { fd, path, kind });
        }
        let page_count = cur.u64()?;
        let page_size = cur.u32()?;
        if page_size as usize != PAGE_SIZE {
            return Err(ImageError::Malformed(format!(
                "page size {page_size}, expected {PAGE_SIZE}"
            )));
        }
        let meta = Self::new(dep_label, entry_token, segments, file_table)
            .map_err(|e| ImageError::Malformed(e.to_string()))?;
        if meta.total_pages != page_count {
            return Err(ImageError::Malformed(format!(
                "page count {page_count} does not match segments ({})",
                meta.total_pages
            )));
        }
        Ok(meta)
    }
}

fn check_segments(segments: &[Segment]) -> Result<(), ImageError> {
    let mut sorted: Vec<&Segment> = segments.iter().collect();
    sorted.sort_by_key(|s| s.base_page_id);
    for s in &sorted {
        if s.page_count == 0 {
            return Err(ImageError::InvalidSpec(format!(
                "segment at page {} is empty",
                s.base_page_id
            )));
        }
        if s.base_page_id.checked_add(s.page_count).is_none() {
            return Err(ImageError::InvalidSpec(format!(
                "segment at page {} overflows the page-id space",
                s.base_page_id
            )));
        }
    }
    for pair in sorted.windows(2) {
        if pair[0].end() > pair[1].base_page_id {
            return Err(ImageError::InvalidSpec(format!(
                "segments at pages {} and {} overlap",
                pair[0].base_page_id, pair[1].base_page_id
            )));
        }
    }
    Ok(())
}

fn check_files(files: &[FileEntry]) -> Result<(), ImageError> {
    let mut seen = std::collections::BTreeSet::new();
    for f in files {
        if !seen.insert(f.fd) {
            return Err(ImageError::InvalidSpec(format!("duplicate fd {}", f.fd)));
        }
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian reader.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn ensure(&self, n: usize) -> Result<(), ImageError> {
        if self.remaining() < n {
            return Err(ImageError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        self.ensure(n)?;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, ImageError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, ImageError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn string(&mut self) -> Result<String, ImageError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| ImageError::Malformed("string is not valid UTF-8".into()))
    }
}

/// One immutable 4 KiB page. Cloning shares the buffer.
#[derive(Clone, PartialEq, Eq)]
pub struct Page(Arc<[u8; PAGE_SIZE]>);

impl Page {
    pub fn zeroed() -> Self {
        Self(Arc::new([0u8; PAGE_SIZE]))
    }

    /// Copies a page out of a slice that must be exactly [`PAGE_SIZE`] long.
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        let arr: [u8; PAGE_SIZE] = bytes.try_into().ok()?;
        Some(Self(Arc::new(arr)))
    }

    pub fn as_bytes(&self) -> &[u8; PAGE_SIZE] {
        &self.0
    }
}

impl Deref for Page {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0[..]
    }
}

impl fmt::Debug for Page {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Page({:02x?}..)", &self.0[..8])
    }
}

/// Deterministic contents of page `page_id` for an image seeded with
/// `content_seed`: 512 little-endian words from
/// `SplitMix64::new(content_seed ^ page_id)`.
pub fn page_content(content_seed: u64, page_id: u64) -> Page {
    let mut buf = [0u8; PAGE_SIZE];
    SplitMix64::new(content_seed ^ page_id).fill_bytes(&mut buf);
    Page(Arc::new(buf))
}

/// A dependency process captured in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyImage {
    metadata: ProcessMetadata,
    pages: BTreeMap<u64, Page>,
}

impl DependencyImage {
    /// Pairs metadata with pages; the page ids must be exactly those covered
    /// by the metadata's segments.
    pub fn new(metadata: ProcessMetadata, pages: BTreeMap<u64, Page>) -> Result<Self, ImageError> {
        if pages.len() as u64 != metadata.total_pages {
            return Err(ImageError::Malformed(format!(
                "{} pages for {} covered page ids",
                pages.len(),
                metadata.total_pages
            )));
        }
        if let Some(id) = pages.keys().find(|&&id| !metadata.contains_page(id)) {
            return Err(ImageError::Malformed(format!(
                "page {id} lies outside every segment"
            )));
        }
        Ok(Self { metadata, pages })
    }

    pub fn metadata(&self) -> &ProcessMetadata {
        &self.metadata
    }

    pub fn label(&self) -> &str {
        &self.metadata.dep_label
    }

    pub fn page(&self, page_id: u64) -> Option<&Page> {
        self.pages.get(&page_id)
    }

    pub fn pages(&self) -> impl ExactSizeIterator<Item = (u64, &Page)> {
        self.pages.iter().map(|(&id, p)| (id, p))
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    /// Resident bytes of the image: pages plus encoded metadata.
    pub fn footprint_bytes(&self) -> u64 {
        image_footprint_bytes(self.metadata.total_pages, self.metadata.metadata_size_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub base_page_id: u64,
    /// Segment length in bytes, rounded up to whole pages.
    pub size_bytes: u64,
    pub permission: Permission,
}

/// Recipe for a synthetic dependency process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub dep_label: String,
    #[serde(default = "default_entry_token")]
    pub entry_token: String,
    #[serde(default)]
    pub segments: Vec<SegmentPlan>,
    #[serde(default)]
    pub files: Vec<FileEntry>,
    pub content_seed: u64,
}

fn default_entry_token() -> String {
    "import-user-handler".to_owned()
}

impl ProcessSpec {
    /// A spec with one read-write segment of `pages` pages at page 0 and a
    /// minimal file table.
    pub fn simple(dep_label: impl Into<String>, pages: u64, content_seed: u64) -> Self {
        Self {
            dep_label: dep_label.into(),
            entry_token: default_entry_token(),
            segments: vec![SegmentPlan {
                base_page_id: 0,
                size_bytes: pages * PAGE_SIZE as u64,
                permission: Permission::ReadWrite,
            }],
            files: vec![FileEntry {
                fd: 0,
                path: "/dev/null".into(),
                kind: FileKind::Device,
            }],
            content_seed,
        }
    }

    fn to_metadata(&self) -> Result<ProcessMetadata, ImageError> {
        if self.dep_label.is_empty() {
            return Err(ImageError::EmptyLabel);
        }
        let segments = self
            .segments
            .iter()
            .map(|p| {
                if p.size_bytes == 0 {
                    return Err(ImageError::InvalidSpec(format!(
                        "segment at page {} has zero size",
                        p.base_page_id
                    )));
                }
                Ok(Segment {
                    base_page_id: p.base_page_id,
                    page_count: p.size_bytes.div_ceil(PAGE_SIZE as u64),
                    permission: p.permission,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        ProcessMetadata::new(
            self.dep_label.clone(),
            self.entry_token.clone(),
            segments,
            self.files.clone(),
        )
    }
}

/// Materializes a synthetic dependency process into an image.
pub fn dump(spec: &ProcessSpec) -> Result<DependencyImage, ImageError> {
    let metadata = spec.to_metadata()?;
    let pages = metadata
        .page_ids()
        .into_iter()
        .map(|id| (id, page_content(spec.content_seed, id)))
        .collect();
    DependencyImage::new(metadata, pages)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_segment_spec() -> ProcessSpec {
        ProcessSpec {
            dep_label: "python+numpy".into(),
            entry_token: "handler".into(),
            segments: vec![
                SegmentPlan {
                    base_page_id: 0,
                    size_bytes: 8192,
                    permission: Permission::Execute,
                },
                SegmentPlan {
                    base_page_id: 16,
                    size_bytes: 8192,
                    permission: Permission::ReadWrite,
                },
            ],
            files: vec![
                FileEntry {
                    fd: 3,
                    path: "/var/lang/lib/libpython3.9.so".into(),
                    kind: FileKind::Regular,
                },
                FileEntry {
                    fd: 4,
                    path: "/dev/urandom".into(),
                    kind: FileKind::Device,
                },
            ],
            content_seed: 7,
        }
    }

    #[test]
    fn empty_spec_gives_empty_image() {
        let spec = ProcessSpec {
            segments: vec![],
            files: vec![],
            ..two_segment_spec()
        };
        let img = dump(&spec).unwrap();
        assert_eq!(img.page_count(), 0);
        assert_eq!(img.metadata().total_pages(), 0);
    }

    #[test]
    fn two_segments_of_8k() {
        let img = dump(&two_segment_spec()).unwrap();
        assert_eq!(img.page_count(), 4);
        assert_eq!(img.metadata().total_pages(), 4);
        assert_eq!(img.metadata().page_ids(), vec![0, 1, 16, 17]);
        assert_eq!(img.page(16).unwrap(), &page_content(7, 16));
    }

    #[test]
    fn dump_is_deterministic() {
        assert_eq!(
            dump(&two_segment_spec()).unwrap(),
            dump(&two_segment_spec()).unwrap()
        );
    }

    #[test]
    fn partial_pages_round_up() {
        let mut spec = two_segment_spec();
        spec.segments[0].size_bytes = 4097;
        assert_eq!(dump(&spec).unwrap().metadata().segments()[0].page_count, 2);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let mut spec = two_segment_spec();
        spec.segments[1].base_page_id = 1;
        assert!(matches!(dump(&spec), Err(ImageError::InvalidSpec(_))));
    }

    #[test]
    fn spec_errors() {
        let mut spec = two_segment_spec();
        spec.segments[0].size_bytes = 0;
        assert!(matches!(dump(&spec), Err(ImageError::InvalidSpec(_))));

        let mut spec = two_segment_spec();
        spec.files[1].fd = 3;
        assert!(matches!(dump(&spec), Err(ImageError::InvalidSpec(_))));

        let mut spec = two_segment_spec();
        spec.dep_label.clear();
        assert!(matches!(dump(&spec), Err(ImageError::EmptyLabel)));
    }

    #[test]
    fn metadata_size_is_encoded_length() {
        let img = dump(&two_segment_spec()).unwrap();
        let bytes = img.metadata().encode();
        assert_eq!(bytes.len() as u64, img.metadata().metadata_size_bytes());
        // 8 magic + 4 version + (4+12) label + (4+7) token + 4 + 2*17
        // + 4 + (9+29) + (9+12) + 8 + 4
        assert_eq!(bytes.len(), 8 + 4 + 16 + 11 + 4 + 34 + 4 + 38 + 21 + 8 + 4);
        assert_eq!(ProcessMetadata::decode(&bytes).unwrap(), *img.metadata());
    }

    #[test]
    fn metadata_decode_errors() {
        let bytes = dump(&two_segment_spec()).unwrap().metadata().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ProcessMetadata::decode(&bad),
            Err(ImageError::BadMagic(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            ProcessMetadata::decode(&bad),
            Err(ImageError::UnsupportedVersion(2))
        ));
        assert!(matches!(
            ProcessMetadata::decode(&bytes[..bytes.len() - 1]),
            Err(ImageError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            ProcessMetadata::decode(&long),
            Err(ImageError::Malformed(_))
        ));
    }

    #[test]
    fn page_generator_reference() {
        // First word of page 0, seed 0 is SplitMix64(0).next_u64().
        let p = page_content(0, 0);
        assert_eq!(&p[..8], &0xE220_A839_7B1D_CDAFu64.to_le_bytes());
        // the seed is combined by xor, so (1, 0) and (0, 1) coincide
        assert_eq!(page_content(1, 0), page_content(0, 1));
        assert_ne!(page_content(1, 0), page_content(1, 1));
    }

    #[test]
    fn image_rejects_uncovered_pages() {
        let img = dump(&two_segment_spec()).unwrap();
        let mut pages: BTreeMap<u64, Page> = img.pages().map(|(id, p)| (id, p.clone())).collect();
        pages.remove(&0);
        pages.insert(5, Page::zeroed());
        assert!(DependencyImage::new(img.metadata().clone(), pages).is_err());
    }
}
