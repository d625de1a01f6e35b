// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! The provider-side dependency pool.
//!
//! Registration takes the write lock for the whole insert, so a concurrent
//! reader observes the pool either before or after a registration, never in
//! between. Images are immutable once registered and are handed out as
//! `Arc`s.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use super::{read_checkpoint, DependencyImage, ImageError, PAGE_SIZE};

/// Bytes held by one image: its pages plus its encoded metadata.
pub fn image_footprint_bytes(total_pages: u64, metadata_bytes: u64) -> u64 {
    total_pages * PAGE_SIZE as u64 + metadata_bytes
}

#[derive(Debug)]
struct PoolEntry {
    image: Arc<DependencyImage>,
    active: AtomicU64,
    served: AtomicU64,
}

#[derive(Debug, Default)]
pub struct DependencyPool {
    entries: RwLock<BTreeMap<String, Arc<PoolEntry>>>,
}

/// A consistent view of the pool taken under a single read lock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSnapshot {
    pub labels: Vec<String>,
    pub memory_bytes: u64,
}

impl DependencyPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, image: DependencyImage) -> Result<Arc<DependencyImage>, ImageError> {
        let label = image.label().to_owned();
        if label.is_empty() {
            return Err(ImageError::EmptyLabel);
        }
        let mut entries = self.entries.write().expect("pool lock poisoned");
        if entries.contains_key(&label) {
            return Err(ImageError::DuplicateLabel(label));
        }
        let image = Arc::new(image);
        entries.insert(
            label,
            Arc::new(PoolEntry {
                image: Arc::clone(&image),
                active: AtomicU64::new(0),
                served: AtomicU64::new(0),
            }),
        );
        Ok(image)
    }

    pub fn lookup(&self, dep_label: &str) -> Option<Arc<DependencyImage>> {
        let entries = self.entries.read().expect("pool lock poisoned");
        entries.get(dep_label).map(|e| Arc::clone(&e.image))
    }

    /// Looks up an image and counts an active migration against it until the
    /// lease is dropped.
    pub fn checkout(&self, dep_label: &str) -> Option<PoolLease> {
        let entries = self.entries.read().expect("pool lock poisoned");
        let entry = Arc::clone(entries.get(dep_label)?);
        entry.active.fetch_add(1, Ordering::SeqCst);
        Some(PoolLease { entry })
    }

    /// Removes an image. Leases already handed out keep it alive.
    pub fn remove(&self, dep_label: &str) -> Option<Arc<DependencyImage>> {
        let mut entries = self.entries.write().expect("pool lock poisoned");
        entries.remove(dep_label).map(|e| Arc::clone(&e.image))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("pool lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries
            .read()
            .expect("pool lock poisoned")
            .keys()
            .cloned()
            .collect()
    }

    /// Memory held by the pool. Each image counts once however many
    /// functions use it.
    pub fn memory_usage(&self) -> u64 {
        let entries = self.entries.read().expect("pool lock poisoned");
        entries.values().map(|e| e.image.footprint_bytes()).sum()
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        let entries = self.entries.read().expect("pool lock poisoned");
        PoolSnapshot {
            labels: entries.keys().cloned().collect(),
            memory_bytes: entries.values().map(|e| e.image.footprint_bytes()).sum(),
        }
    }

    /// `(active, served)` migration counts for a label.
    pub fn usage(&self, dep_label: &str) -> Option<(u64, u64)> {
        let entries = self.entries.read().expect("pool lock poisoned");
        entries.get(dep_label).map(|e| {
            (
                e.active.load(Ordering::SeqCst),
                e.served.load(Ordering::SeqCst),
            )
        })
    }

    /// Reads a checkpoint and registers it. On any error the pool is left
    /// untouched.
    pub fn restore_from_checkpoint(
        &self,
        path: impl AsRef<Path>,
    ) -> Result<Arc<DependencyImage>, ImageError> {
        let image = read_checkpoint(path)?;
        self.register(image)
    }
}

/// An image checked out for one migration.
#[derive(Debug)]
pub struct PoolLease {
    entry: Arc<PoolEntry>,
}

impl PoolLease {
    pub fn image(&self) -> &Arc<DependencyImage> {
        &self.entry.image
    }
}

impl Drop for PoolLease {
    fn drop(&mut self) {
        self.entry.active.fetch_sub(1, Ordering::SeqCst);
        self.entry.served.fetch_add(1, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{dump, write_checkpoint, ProcessSpec};
    use std::sync::atomic::AtomicBool;
    use std::thread;

    fn image(label: &str, pages: u64) -> DependencyImage {
        dump(&ProcessSpec::simple(label, pages, 11)).unwrap()
    }

    #[test]
    fn lookup_and_register() {
        let pool = DependencyPool::new();
        assert!(pool.lookup("python+numpy").is_none());
        let img = image("python+numpy", 2);
        pool.register(img.clone()).unwrap();
        assert_eq!(*pool.lookup("python+numpy").unwrap(), img);
        assert!(pool.lookup("python+torch").is_none());
    }

    #[test]
    fn duplicate_label_rejected() {
        let pool = DependencyPool::new();
        pool.register(image("a", 1)).unwrap();
        assert!(matches!(
            pool.register(image("a", 3)),
            Err(ImageError::DuplicateLabel(l)) if l == "a"
        ));
        assert_eq!(pool.lookup("a").unwrap().page_count(), 1);
    }

    #[test]
    fn memory_accounting() {
        let pool = DependencyPool::new();
        assert_eq!(pool.memory_usage(), 0);
        let img = image("a", 3);
        let meta = img.metadata().metadata_size_bytes();
        pool.register(img).unwrap();
        assert_eq!(pool.memory_usage(), 3 * 4096 + meta);
        // many functions referencing one label do not change the footprint
        for _ in 0..10 {
            let lease = pool.checkout("a").unwrap();
            assert_eq!(pool.memory_usage(), 3 * 4096 + meta);
            drop(lease);
        }
        assert_eq!(pool.usage("a"), Some((0, 10)));
    }

    #[test]
    fn footprint_at_table_scale() {
        // 190 MiB of pages plus 15 MiB of metadata
        let mib = 1u64 << 20;
        let pages = 190 * mib / 4096;
        assert_eq!(image_footprint_bytes(pages, 15 * mib), 205 * mib);
    }

    #[test]
    fn lease_counts() {
        let pool = DependencyPool::new();
        pool.register(image("a", 1)).unwrap();
        let l1 = pool.checkout("a").unwrap();
        let l2 = pool.checkout("a").unwrap();
        assert_eq!(pool.usage("a"), Some((2, 0)));
        drop(l1);
        assert_eq!(pool.usage("a"), Some((1, 1)));
        // removal does not invalidate an outstanding lease
        pool.remove("a").unwrap();
        assert_eq!(l2.image().page_count(), 1);
        assert!(pool.checkout("a").is_none());
    }

    #[test]
    fn restore_into_pool() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let img = image("python+torch", 4);
        write_checkpoint(&img, &path).unwrap();

        let pool = DependencyPool::new();
        pool.restore_from_checkpoint(&path).unwrap();
        assert_eq!(*pool.lookup("python+torch").unwrap(), img);
        assert!(matches!(
            pool.restore_from_checkpoint(&path),
            Err(ImageError::DuplicateLabel(_))
        ));
    }

    #[test]
    fn corrupted_restore_leaves_pool_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_checkpoint(&image("x", 4), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 1;
        std::fs::write(&path, bytes).unwrap();

        let pool = DependencyPool::new();
        pool.register(image("y", 1)).unwrap();
        let before = pool.snapshot();
        assert!(pool.restore_from_checkpoint(&path).is_err());
        assert_eq!(pool.snapshot(), before);
    }

    #[test]
    fn readers_never_see_partial_registration() {
        let pool = Arc::new(DependencyPool::new());
        let done = Arc::new(AtomicBool::new(false));
        let images: Vec<DependencyImage> = (0..20)
            .map(|i| image(&format!("dep{i}"), 1 + i % 4))
            .collect();
        let expected: BTreeMap<String, u64> = images
            .iter()
            .map(|img| (img.label().to_owned(), img.footprint_bytes()))
            .collect();

        let readers: Vec<_> = (0..4)
            .map(|_| {
                let pool = Arc::clone(&pool);
                let done = Arc::clone(&done);
                let expected = expected.clone();
                thread::spawn(move || {
                    let mut checks = 0u64;
                    while !done.load(Ordering::SeqCst) {
                        let snap = pool.snapshot();
                        let sum: u64 = snap.labels.iter().map(|l| expected[l]).sum();
                        assert_eq!(sum, snap.memory_bytes);
                        for label in expected.keys() {
                            if let Some(img) = pool.lookup(label) {
                                assert_eq!(img.footprint_bytes(), expected[label]);
                            }
                        }
                        checks += 1;
                    }
                    checks
                })
            })
            .collect();

        for img in images {
            pool.register(img).unwrap();
            thread::yield_now();
        }
        done.store(true, Ordering::SeqCst);
        for r in readers {
            assert!(r.join().unwrap() > 0);
        }
        assert_eq!(pool.len(), 20);
    }
}
