use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pq::{train_pq, PqCodebook, PqParams};
use super::{check_query, squared_l2, NeighborHit, SearchIndex, TopK};
use crate::datastore::Datastore;
use crate::error::{invalid, Result};
use crate::kmeans::{assign, kmeans, KMeansParams};

/// `round(4·√n)`, at least 1 and at most `n`.
pub fn default_nlist(n: usize) -> usize {
    ((4.0 * (n as f64).sqrt()).round() as usize).clamp(1, n.max(1))
}

/// 32 lists, capped at `nlist`.
pub fn default_nprobe(nlist: usize) -> usize {
    32.min(nlist).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfParams {
    pub nlist: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Fit the coarse centroids on at most this many sampled keys. All keys
    /// are still assigned to their nearest centroid afterwards.
    pub train_sample_cap: Option<usize>,
    /// Score candidates with PQ codes instead of the stored keys.
    pub pq: Option<PqParams>,
    /// Lists scanned per query by [`SearchIndex::search`].
    pub nprobe: usize,
}

impl IvfParams {
    pub fn new(nlist: usize, seed: u64) -> Self {
        Self {
            nlist,
            max_iters: 25,
            seed,
            train_sample_cap: Some(nlist.saturating_mul(256)),
            pq: None,
            nprobe: default_nprobe(nlist),
        }
    }

    /// Defaults for a datastore of `n` records.
    pub fn for_size(n: usize, seed: u64) -> Self {
        Self::new(default_nlist(n), seed)
    }
}

/// Inverted-file index: coarse centroids plus one id list per centroid.
/// Without PQ every list also stores a copy of its keys in list order, so a
/// probe reads contiguous memory; with PQ it stores per-record codes.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub(crate) dim: usize,
    pub(crate) count: usize,
    pub(crate) centroids: Vec<f32>,
    pub(crate) lists: Vec<Vec<u32>>,
    /// Keys of `lists[l]` in the same order; empty when PQ is active.
    pub(crate) list_keys: Vec<Vec<f32>>,
    pub(crate) pq: Option<(PqCodebook, Vec<u8>)>,
    pub(crate) nprobe: usize,
}

/// Train the coarse quantizer (and PQ if requested) over `keys`.
pub fn train_ivf(keys: &[f32], dim: usize, params: &IvfParams) -> Result<IvfIndex> {
    if dim == 0 || keys.is_empty() || !keys.len().is_multiple_of(dim) {
        return invalid("IVF training data is empty or ragged");
    }
    let n = keys.len() / dim;
    if params.nlist == 0 || params.nlist > n {
        return invalid(format!("nlist must be in 1..={n}, got {}", params.nlist));
    }
    if params.nprobe == 0 || params.nprobe > params.nlist {
        return invalid(format!(
            "nprobe must be in 1..={}, got {}",
            params.nlist, params.nprobe
        ));
    }
    let km_params = KMeansParams {
        k: params.nlist,
        max_iters: params.max_iters,
        seed: params.seed,
    };
    let centroids = match params.train_sample_cap {
        Some(cap) if cap < n && cap >= params.nlist => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5151);
            let mut rows = sample(&mut rng, n, cap).into_vec();
            rows.sort_unstable();
            let mut sub = Vec::with_capacity(cap * dim);
            for r in rows {
                sub.extend_from_slice(&keys[r * dim..(r + 1) * dim]);
            }
            kmeans(&sub, dim, &km_params)?.centroids
        }
        _ => kmeans(keys, dim, &km_params)?.centroids,
    };
    let assignments = assign(keys, dim, &centroids);
    let mut lists = vec![Vec::new(); params.nlist];
    for (id, &a) in assignments.iter().enumerate() {
        lists[a as usize].push(id as u32);
    }
    let pq = match &params.pq {
        Some(p) => {
            let cb = train_pq(keys, dim, p)?;
            let codes = cb.encode_all(keys);
            Some((cb, codes))
        }
        None => None,
    };
    let list_keys = if pq.is_some() {
        Vec::new()
    } else {
        gather_list_keys(keys, dim, &lists)
    };
    Ok(IvfIndex {
        dim,
        count: n,
        centroids,
        lists,
        list_keys,
        pq,
        nprobe: params.nprobe,
    })
}

pub(crate) fn gather_list_keys(keys: &[f32], dim: usize, lists: &[Vec<u32>]) -> Vec<Vec<f32>> {
    lists
        .iter()
        .map(|list| {
            let mut out = Vec::with_capacity(list.len() * dim);
            for &id in list {
                let i = id as usize;
                out.extend_from_slice(&keys[i * dim..(i + 1) * dim]);
            }
            out
        })
        .collect()
}

impl IvfIndex {
    pub fn build(ds: &Datastore, params: &IvfParams) -> Result<Self> {
        train_ivf(ds.keys(), ds.dim(), params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn set_nprobe(&mut self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.nlist() {
            return invalid(format!("nprobe must be in 1..={}", self.nlist()));
        }
        self.nprobe = nprobe;
        Ok(())
    }

    pub fn centroid(&self, list: usize) -> &[f32] {
        &self.centroids[list * self.dim..(list + 1) * self.dim]
    }

    pub fn list(&self, list: usize) -> &[u32] {
        &self.lists[list]
    }

    pub fn codebook(&self) -> Option<&PqCodebook> {
        self.pq.as_ref().map(|p| &p.0)
    }

    pub fn code(&self, id: usize) -> Option<&[u8]> {
        self.pq.as_ref().map(|(cb, codes)| &codes[id * cb.m()..(id + 1) * cb.m()])
    }

    /// The `nprobe` lists whose centroids are closest to `query`.
    pub fn probe_lists(&self, query: &[f32], nprobe: usize) -> Vec<usize> {
        let mut top = TopK::new(nprobe.min(self.nlist()));
        for (c, row) in self.centroids.chunks_exact(self.dim).enumerate() {
            top.push(squared_l2(row, query), c as u32);
        }
        top.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| c.id as usize)
            .collect()
    }
}

/// Scan the `nprobe` nearest inverted lists. Distances are exact without PQ
/// and asymmetric-PQ approximations with it.
pub fn ivf_search(
    index: &IvfIndex,
    ds: &Datastore,
    query: &[f32],
    k: usize,
    nprobe: usize,
) -> Result<Vec<NeighborHit>> {
    check_query(ds, query, k)?;
    if ds.len() != index.count || ds.dim() != index.dim {
        return invalid(format!(
            "index covers {} records of dim {}, datastore has {} of dim {}",
            index.count,
            index.dim,
            ds.len(),
            ds.dim()
        ));
    }
    if nprobe == 0 || nprobe > index.nlist() {
        return invalid(format!("nprobe must be in 1..={}", index.nlist()));
    }
    let lists = index.probe_lists(query, nprobe);
    let mut top = TopK::new(k.min(ds.len()));
    match &index.pq {
        Some((cb, codes)) => {
            let table = cb.distance_table(query);
            let m = cb.m();
            for l in lists {
                for &id in &index.lists[l] {
                    let i = id as usize;
                    top.push(cb.table_distance(&table, &codes[i * m..(i + 1) * m]), id);
                }
            }
        }
        None => {
            for l in lists {
                let keys = index.list_keys[l].chunks_exact(index.dim);
                for (&id, key) in index.lists[l].iter().zip(keys) {
                    top.push(squared_l2(key, query), id);
                }
            }
        }
    }
    Ok(top.into_hits(ds))
}

impl SearchIndex for IvfIndex {
    fn search(&self, ds: &Datastore, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
        ivf_search(self, ds, query, k, self.nprobe)
    }

    fn describe(&self) -> String {
        match &self.pq {
            Some((cb, _)) => format!(
                "ivf{},pq{}x{} nprobe={}",
                self.nlist(),
                cb.m(),
                cb.bits(),
                self.nprobe
            ),
            None => format!("ivf{},flat nprobe={}", self.nlist(), self.nprobe),
        }
    }
}
