//! Cosine k-nearest-neighbour search over unit-norm item features.
//!
//! Exact mode scans every candidate. Approximate mode uses a coarse
//! spherical k-means clustering and scans only the members of the `probes`
//! clusters whose centroids are closest to the query. Results are ordered by
//! similarity, descending, with ties broken by ascending item id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Item;
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, normalize, Tensor};

const MAGIC: &[u8; 8] = b"SETINDEX";
const VERSION: u32 = 1;
/// Accepted deviation of a query's norm from 1.
pub const QUERY_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnConfig {
    pub clusters: usize,
    pub probes: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            clusters: 64,
            probes: 8,
            iterations: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Exact,
    Approx,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub item_id: u64,
    pub category_id: u32,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Clustering {
    centroids: Tensor,
    members: Vec<Vec<usize>>,
    probes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<u64>,
    categories: Vec<u32>,
    features: Tensor,
    by_category: BTreeMap<u32, Vec<usize>>,
    pos: HashMap<u64, usize>,
    clustering: Option<Clustering>,
}

fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.item_id.cmp(&b.item_id))
}

impl RetrievalIndex {
    /// Indexes `items`; with `ann`, also builds the coarse clustering.
    pub fn build<'a>(
        items: impl IntoIterator<Item = &'a Item>,
        ann: Option<AnnConfig>,
    ) -> Result<Self> {
        let items: Vec<&Item> = items.into_iter().collect();
        let first = items.first().ok_or(Error::EmptySet("index catalog"))?;
        let dim = first.feature.len();
        let mut data = Vec::with_capacity(items.len() * dim);
        for it in &items {
            if it.feature.len() != dim {
                return Err(Error::shape(
                    "build_index",
                    "items have different dimensions",
                ));
            }
            data.extend_from_slice(&it.feature);
        }
        let ids: Vec<u64> = items.iter().map(|it| it.item_id).collect();
        let categories: Vec<u32> = items.iter().map(|it| it.category_id).collect();
        let features = Tensor::from_vec(items.len(), dim, data)?;
        let mut idx = Self::assemble(ids, categories, features, None)?;
        if let Some(cfg) = ann {
            idx.clustering = Some(kmeans(&idx.features, cfg)?);
        }
        Ok(idx)
    }

    fn assemble(
        ids: Vec<u64>,
        categories: Vec<u32>,
        features: Tensor,
        clustering: Option<Clustering>,
    ) -> Result<Self> {
        let mut pos = HashMap::with_capacity(ids.len());
        let mut by_category: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (&id, &c)) in ids.iter().zip(&categories).enumerate() {
            if pos.insert(id, i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate item id {id} in index"
                )));
            }
            by_category.entry(c).or_default().push(i);
        }
        Ok(RetrievalIndex {
            ids,
            categories,
            features,
            by_category,
            pos,
            clustering,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn has_clustering(&self) -> bool {
        self.clustering.is_some()
    }

    pub fn probes(&self) -> Option<usize> {
        self.clustering.as_ref().map(|c| c.probes)
    }

    /// Changes the number of clusters scanned by approximate queries.
    pub fn set_probes(&mut self, probes: usize) -> Result<()> {
        match &mut self.clustering {
            Some(c) if probes >= 1 => {
                c.probes = probes.min(c.members.len());
                Ok(())
            }
            Some(_) => Err(Error::InvalidArgument(
                "probe count must be at least 1".into(),
            )),
            None => Err(Error::InvalidArgument("index has no clustering".into())),
        }
    }

    pub fn feature(&self, item_id: u64) -> Option<&[f64]> {
        self.pos.get(&item_id).map(|&i| self.features.row(i))
    }

    pub fn category(&self, item_id: u64) -> Option<u32> {
        self.pos.get(&item_id).map(|&i| self.categories[i])
    }

    /// Number of indexed items per category.
    pub fn category_counts(&self) -> BTreeMap<u32, usize> {
        self.by_category
            .iter()
            .map(|(&c, v)| (c, v.len()))
            .collect()
    }

    fn rank(&self, query: &[f64], rows: impl Iterator<Item = usize>, k: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = rows
            .map(|r| Hit {
                item_id: self.ids[r],
                category_id: self.categories[r],
                similarity: dot(query, self.features.row(r)),
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(rank_order);
        hits
    }

    fn probed_clusters(&self, c: &Clustering, query: &[f64]) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = (0..c.members.len())
            .map(|j| (dot(query, c.centroids.row(j)), j))
            .collect();
        order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order.into_iter().take(c.probes).map(|(_, j)| j).collect()
    }

    /// Top-`k` items for a unit-norm `query`. Returns fewer than `k` hits when
    /// the candidate pool is smaller. In approximate mode with a category
    /// filter, an empty probed pool falls back to scanning the whole category.
    pub fn query_knn(
        &self,
        query: &[f64],
        k: usize,
        category: Option<u32>,
        mode: SearchMode,
    ) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::shape(
                "query_knn",
                format!(
                    "query has {} values, index has dimension {}",
                    query.len(),
                    self.dim()
                ),
            ));
        }
        if (norm(query) - 1.0).abs() > QUERY_NORM_TOL {
            return Err(Error::InvalidArgument("query must be unit-norm".into()));
        }
        let exact_pool: Vec<usize> = match category {
            Some(c) => self.by_category.get(&c).cloned().unwrap_or_default(),
            None => (0..self.len()).collect(),
        };
        let pool = match mode {
            SearchMode::Exact => exact_pool,
            SearchMode::Approx => {
                let c = self.clustering.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("approximate search needs a clustered index".into())
                })?;
                let mut rows: Vec<usize> = self
                    .probed_clusters(c, query)
                    .into_iter()
                    .flat_map(|j| c.members[j].iter().copied())
                    .filter(|&r| category.is_none_or(|cat| self.categories[r] == cat))
                    .collect();
                if rows.is_empty() {
                    rows = exact_pool;
                }
                rows
            }
        };
        if pool.is_empty() {
            return Err(Error::NoCandidates);
        }
        Ok(self.rank(query, pool.into_iter(), k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let put = |b: &mut Vec<u8>, v: u64| b.extend_from_slice(&v.to_le_bytes());
        put(&mut b, self.len() as u64);
        put(&mut b, self.dim() as u64);
        for (&id, &c) in self.ids.iter().zip(&self.categories) {
            put(&mut b, id);
            b.extend_from_slice(&c.to_le_bytes());
        }
        for v in self.features.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        match &self.clustering {
            None => put(&mut b, 0),
            Some(c) => {
                put(&mut b, c.members.len() as u64);
                put(&mut b, c.probes as u64);
                for v in c.centroids.data() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                for m in &c.members {
                    put(&mut b, m.len() as u64);
                    for &r in m {
                        put(&mut b, r as u64);
                    }
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not an index file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported index version {version}"
            )));
        }
        let n = r.usize()?;
        let dim = r.usize()?;
        let mut ids = Vec::with_capacity(n.min(1 << 24));
        let mut categories = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            ids.push(r.u64()?);
            categories.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let features = Tensor::from_vec(n, dim, r.f64s(n * dim)?)?;
        let k = r.usize()?;
        let clustering = if k == 0 {
            None
        } else {
            let probes = r.usize()?;
            let centroids = Tensor::from_vec(k, dim, r.f64s(k * dim)?)?;
            let mut members = Vec::with_capacity(k);
            for _ in 0..k {
                let len = r.usize()?;
                let mut m = Vec::with_capacity(len.min(n));
                for _ in 0..len {
                    let row = r.usize()?;
                    if row >= n {
                        return Err(Error::Checkpoint("cluster member out of range".into()));
                    }
                    m.push(row);
                }
                members.push(m);
            }
            Some(Clustering {
                centroids,
                members,
                probes,
            })
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in index file".into()));
        }
        Self::assemble(ids, categories, features, clustering)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated index file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Spherical k-means: seeded distinct-row init, fixed iterations, assignment
/// by largest cosine (ties to the lower cluster), centroids renormalised.
/// A cluster that empties keeps its previous centroid.
fn kmeans(x: &Tensor, cfg: AnnConfig) -> Result<Clustering> {
    let n = x.rows();
    let k = cfg.clusters;
    if k == 0 || cfg.probes == 0 {
        return Err(Error::InvalidArgument(
            "clusters and probes must be at least 1".into(),
        ));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "{k} clusters requested for {n} items"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = index::sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids = x.select_rows(&init);
    let mut assign = vec![0usize; n];
    for _ in 0..cfg.iterations.max(1) {
        let sims = x.matmul_t(&centroids);
        for (i, a) in assign.iter_mut().enumerate() {
            let row = sims.row(i);
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            *a = best;
        }
        let mut sums = Tensor::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 && norm(sums.row(j)) > 0.0 {
                let row = centroids.row_mut(j);
                row.copy_from_slice(sums.row(j));
                normalize(row);
            }
        }
    }
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        members[a].push(i);
    }
    Ok(Clustering {
        centroids,
        members,
        probes: cfg.probes.min(k),
    })
}
