//! Nearest-neighbor search over datastore keys under squared L2 distance.
//!
//! [`FlatIndex`] is the exact scan; [`IvfIndex`] restricts the scan to the
//! inverted lists of the closest coarse centroids and, when built with a
//! [`PqCodebook`], scores candidates with asymmetric PQ distances instead of
//! the stored keys.
//!
//! All result lists are sorted by ascending distance with ties broken by the
//! lower record id.

mod file;
mod ivf;
mod pq;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use crate::datastore::Datastore;
use crate::error::{invalid, Result};
use crate::lm::TokenId;

pub use ivf::{default_nlist, default_nprobe, ivf_search, train_ivf, IvfIndex, IvfParams};
pub use pq::{pq_distance, train_pq, PqCodebook, PqParams};

/// One retrieved record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborHit {
    pub id: u32,
    /// Squared L2 distance; approximate when PQ scoring is active.
    pub distance: f32,
    pub value: TokenId,
    pub weight: f32,
}

/// Squared Euclidean distance.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// A k-NN search structure over one datastore's keys.
pub trait SearchIndex: Send + Sync {
    /// Up to `k` nearest records of `query`, closest first.
    fn search(&self, ds: &Datastore, query: &[f32], k: usize) -> Result<Vec<NeighborHit>>;

    fn describe(&self) -> String;
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    distance: f32,
    id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the `k` smallest `(distance, id)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, distance: f32, id: u32) {
        let c = Candidate { distance, id };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    pub fn into_hits(self, ds: &Datastore) -> Vec<NeighborHit> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| NeighborHit {
                id: c.id,
                distance: c.distance,
                value: ds.value(c.id as usize),
                weight: ds.weight(c.id as usize),
            })
            .collect()
    }
}

pub(crate) fn check_query(ds: &Datastore, query: &[f32], k: usize) -> Result<()> {
    if query.len() != ds.dim() {
        return invalid(format!(
            "query has dimension {}, datastore has {}",
            query.len(),
            ds.dim()
        ));
    }
    if k == 0 {
        return invalid("k must be at least 1");
    }
    Ok(())
}

/// Exact search: every record is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlatIndex;

impl SearchIndex for FlatIndex {
    fn search(&self, ds: &Datastore, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
        flat_search(ds, query, k)
    }

    fn describe(&self) -> String {
        "flat".into()
    }
}

/// Exact k-NN: `min(k, N)` hits with exact squared-L2 distances.
pub fn flat_search(ds: &Datastore, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
    check_query(ds, query, k)?;
    let mut top = TopK::new(k.min(ds.len()));
    for (id, key) in ds.keys().chunks_exact(ds.dim()).enumerate() {
        top.push(squared_l2(key, query), id as u32);
    }
    Ok(top.into_hits(ds))
}

/// Wraps an index and counts the searches issued through it.
pub struct CountingIndex<I> {
    inner: I,
    queries: AtomicUsize,
}

impl<I: SearchIndex> CountingIndex<I> {
    pub fn new(inner: I) -> Self {
        Self {
            inner,
            queries: AtomicUsize::new(0),
        }
    }

    pub fn queries(&self) -> usize {
        self.queries.load(AtomicOrdering::Relaxed)
    }

    pub fn reset(&self) {
        self.queries.store(0, AtomicOrdering::Relaxed);
    }

    pub fn inner(&self) -> &I {
        &self.inner
    }
}

impl<I: SearchIndex> SearchIndex for CountingIndex<I> {
    fn search(&self, ds: &Datastore, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
        self.queries.fetch_add(1, AtomicOrdering::Relaxed);
        self.inner.search(ds, query, k)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

impl<T: SearchIndex + ?Sized> SearchIndex for &T {
    fn search(&self, ds: &Datastore, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
        (**self).search(ds, query, k)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: SearchIndex + ?Sized> SearchIndex for Box<T> {
    fn search(&self, ds: &Datastore, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
        (**self).search(ds, query, k)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}
