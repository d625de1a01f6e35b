// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! On-disk checkpoint format.
//!
//! All integers are little-endian:
//!
//! ```text
//! header      ProcessMetadata::encode (magic "WSWAPIM1" .. page size)
//! pages       page_count x (page_id u64, 4096 raw bytes), ascending page_id
//! trailer     CRC-32 (IEEE) of every preceding byte, u32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Cursor, DependencyImage, ImageError, Page, ProcessMetadata, PAGE_SIZE};

const PAGE_RECORD: usize = 8 + PAGE_SIZE;

/// Size in bytes of the checkpoint file for `image`.
pub fn checkpoint_size(image: &DependencyImage) -> u64 {
    image.metadata().metadata_size_bytes() + image.page_count() as u64 * PAGE_RECORD as u64 + 4
}

/// Serializes `image` into `out`.
pub fn write_checkpoint_to(image: &DependencyImage, out: &mut Vec<u8>) {
    let start = out.len();
    out.reserve(checkpoint_size(image) as usize);
    image.metadata().encode_into(out);
    for (id, page) in image.pages() {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(page);
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn write_checkpoint(image: &DependencyImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut buf = Vec::new();
    write_checkpoint_to(image, &mut buf);
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    file.sync_all()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<DependencyImage, ImageError> {
    read_checkpoint_bytes(&fs::read(path)?)
}

/// Parses a checkpoint held in memory.
///
/// The layout is walked first, so a short file reports
/// [`ImageError::Truncated`]; the trailer is then checked before any page id
/// is trusted.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<DependencyImage, ImageError> {
    let mut cur = Cursor::new(bytes);
    let metadata = ProcessMetadata::decode_from(&mut cur)?;

    let count = metadata.total_pages();
    let records_len = usize::try_from(count)
        .ok()
        .and_then(|n| n.checked_mul(PAGE_RECORD))
        .ok_or_else(|| ImageError::Malformed(format!("page count {count} is too large")))?;
    cur.ensure(records_len)?;
    let records = cur.take(records_len)?;

    let body_len = cur.position();
    let stored = cur.u32()?;
    if cur.remaining() != 0 {
        return Err(ImageError::Malformed(format!(
            "{} trailing bytes after checksum",
            cur.remaining()
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(ImageError::ChecksumMismatch { stored, computed });
    }

    let mut pages = BTreeMap::new();
    let mut prev: Option<u64> = None;
    for record in records.chunks_exact(PAGE_RECORD) {
        let id = u64::from_le_bytes(record[..8].try_into().expect("8 bytes"));
        if prev.is_some_and(|p| id <= p) {
            return Err(ImageError::Malformed(format!(
                "page records not in ascending order at page {id}"
            )));
        }
        prev = Some(id);
        let page = Page::from_slice(&record[8..]).expect("record holds a full page");
        pages.insert(id, page);
    }
    DependencyImage::new(metadata, pages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{dump, FileEntry, FileKind, Permission, ProcessSpec, SegmentPlan};

    fn four_pages() -> DependencyImage {
        dump(&ProcessSpec {
            dep_label: "python+numpy".into(),
            entry_token: "handler".into(),
            segments: vec![
                SegmentPlan {
                    base_page_id: 0,
                    size_bytes: 8192,
                    permission: Permission::Read,
                },
                SegmentPlan {
                    base_page_id: 100,
                    size_bytes: 8192,
                    permission: Permission::ReadWrite,
                },
            ],
            files: vec![FileEntry {
                fd: 1,
                path: "/tmp/log".into(),
                kind: FileKind::Regular,
            }],
            content_seed: 3,
        })
        .unwrap()
    }

    fn encoded(img: &DependencyImage) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint_to(img, &mut buf);
        buf
    }

    #[test]
    fn roundtrip_in_memory() {
        let img = four_pages();
        let bytes = encoded(&img);
        assert_eq!(read_checkpoint_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ckpt");
        let img = four_pages();
        write_checkpoint(&img, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), img);
        assert_eq!(fs::metadata(&path).unwrap().len(), checkpoint_size(&img));
    }

    #[test]
    fn size_formula() {
        let img = four_pages();
        let header = img.metadata().metadata_size_bytes();
        assert_eq!(encoded(&img).len() as u64, header + 4 * (8 + 4096) + 4);
    }

    #[test]
    fn layout_is_bit_exact() {
        let img = four_pages();
        let bytes = encoded(&img);
        assert_eq!(&bytes[..8], b"WSWAPIM1");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[12, 0, 0, 0]);
        assert_eq!(&bytes[16..28], b"python+numpy");
        let h = img.metadata().metadata_size_bytes() as usize;
        assert_eq!(&bytes[h - 12..h - 4], &4u64.to_le_bytes());
        assert_eq!(&bytes[h - 4..h], &4096u32.to_le_bytes());
        // first page record: id 0 then the generator's bytes
        assert_eq!(&bytes[h..h + 8], &0u64.to_le_bytes());
        assert_eq!(
            &bytes[h + 8..h + 8 + 4096],
            &crate::image::page_content(3, 0)[..]
        );
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        assert_eq!(&bytes[n - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn flipped_page_byte_is_checksum_error() {
        let img = four_pages();
        let mut bytes = encoded(&img);
        let h = img.metadata().metadata_size_bytes() as usize;
        bytes[h + 8 + 100] ^= 0x40;
        assert!(matches!(
            read_checkpoint_bytes(&bytes),
            Err(ImageError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn distinct_errors() {
        let img = four_pages();
        let bytes = encoded(&img);

        let mut bad = bytes.clone();
        bad[3] = b'?';
        assert!(matches!(
            read_checkpoint_bytes(&bad),
            Err(ImageError::BadMagic(_))
        ));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            read_checkpoint_bytes(&bad),
            Err(ImageError::UnsupportedVersion(9))
        ));

        for cut in [0, 5, 20, bytes.len() - 1, bytes.len() - 5000] {
            assert!(
                matches!(
                    read_checkpoint_bytes(&bytes[..cut]),
                    Err(ImageError::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            read_checkpoint_bytes(&long),
            Err(ImageError::Malformed(_))
        ));
    }

    #[test]
    fn swapped_page_order_is_rejected() {
        let img = four_pages();
        let mut bytes = encoded(&img);
        let h = img.metadata().metadata_size_bytes() as usize;
        // swap the first two records, then fix up the trailer
        let (a, b) = (h, h + PAGE_RECORD);
        let first: Vec<u8> = bytes[a..b].to_vec();
        let second: Vec<u8> = bytes[b..b + PAGE_RECORD].to_vec();
        bytes[a..b].copy_from_slice(&second);
        bytes[b..b + PAGE_RECORD].copy_from_slice(&first);
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            read_checkpoint_bytes(&bytes),
            Err(ImageError::Malformed(_))
        ));
    }

    #[test]
    fn empty_image_roundtrip() {
        let img = dump(&ProcessSpec {
            dep_label: "python".into(),
            entry_token: String::new(),
            segments: vec![],
            files: vec![],
            content_seed: 0,
        })
        .unwrap();
        let bytes = encoded(&img);
        assert_eq!(bytes.len() as u64, img.metadata().metadata_size_bytes() + 4);
        assert_eq!(read_checkpoint_bytes(&bytes).unwrap(), img);
    }
}
