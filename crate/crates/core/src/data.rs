//! Catalog and outfit data: the planted-style generator, the query/target
//! split, the train/val/test partition and the JSONL format.
//!
//! # JSONL schema
//!
//! One outfit per line, UTF-8, newline-delimited:
//!
//! ```text
//! {"outfit_id": 17, "likes": 42,
//!  "items": [{"item_id": 3, "category_id": 1, "feature": [0.12, ...], "style_id": 5}, ...]}
//! ```
//!
//! `style_id` is optional and never shown to models. An item that appears in
//! several outfits must carry the same fields every time. In strict mode any
//! other key is an error; in lenient mode unknown keys are kept and written
//! back unchanged.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::set::FeatureSet;
use crate::tensor::{norm, normalize, Tensor};

/// Unit-norm tolerance for stored item features.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u64,
    pub category_id: u32,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_id: Option<u32>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outfit {
    pub outfit_id: u64,
    pub likes: u64,
    pub item_ids: Vec<u64>,
    pub extra: Map<String, Value>,
}

/// Items keyed by id, sorted by id, with a per-category row index.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    dim: usize,
    items: Vec<Item>,
    pos: HashMap<u64, usize>,
    by_category: Vec<Vec<usize>>,
}

impl Catalog {
    pub fn new(dim: usize, mut items: Vec<Item>) -> Result<Self> {
        items.sort_by_key(|it| it.item_id);
        let mut pos = HashMap::with_capacity(items.len());
        let mut by_category: Vec<Vec<usize>> = Vec::new();
        for (i, it) in items.iter().enumerate() {
            if pos.insert(it.item_id, i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate item id {}",
                    it.item_id
                )));
            }
            if it.feature.len() != dim {
                return Err(Error::shape(
                    "Catalog::new",
                    format!(
                        "item {} has {} features, expected {dim}",
                        it.item_id,
                        it.feature.len()
                    ),
                ));
            }
            if (norm(&it.feature) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "item {} feature is not unit-norm",
                    it.item_id
                )));
            }
            let c = it.category_id as usize;
            if by_category.len() <= c {
                by_category.resize(c + 1, Vec::new());
            }
            by_category[c].push(i);
        }
        Ok(Catalog {
            dim,
            items,
            pos,
            by_category,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One more than the largest category id present.
    pub fn num_categories(&self) -> usize {
        self.by_category.len()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: u64) -> Option<&Item> {
        self.pos.get(&item_id).map(|&i| &self.items[i])
    }

    fn require(&self, item_id: u64) -> Result<&Item> {
        self.get(item_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown item id {item_id}")))
    }

    /// Items of category `c`, in id order.
    pub fn in_category(&self, c: u32) -> impl Iterator<Item = &Item> {
        self.by_category
            .get(c as usize)
            .into_iter()
            .flatten()
            .map(|&i| &self.items[i])
    }

    pub fn category_size(&self, c: u32) -> usize {
        self.by_category.get(c as usize).map_or(0, Vec::len)
    }

    /// Feature rows for `ids`, carrying the ids.
    pub fn feature_set(&self, ids: &[u64]) -> Result<FeatureSet> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(&self.require(id)?.feature);
        }
        FeatureSet::with_ids(Tensor::from_vec(ids.len(), self.dim, data)?, ids.to_vec())
    }

    /// Uniformly random item of category `c` other than `exclude`.
    pub fn sample_same_category<R: Rng + ?Sized>(
        &self,
        c: u32,
        exclude: u64,
        rng: &mut R,
    ) -> Option<u64> {
        let rows = self.by_category.get(c as usize)?;
        let n = rows.len() - usize::from(rows.iter().any(|&r| self.items[r].item_id == exclude));
        if n == 0 {
            return None;
        }
        let k = rng.random_range(0..n);
        rows.iter()
            .map(|&r| self.items[r].item_id)
            .filter(|&id| id != exclude)
            .nth(k)
    }

    /// Replaces every id with a random other item of the same category.
    /// `None` when some category has no alternative.
    pub fn category_matched_negative<R: Rng + ?Sized>(
        &self,
        ids: &[u64],
        rng: &mut R,
    ) -> Option<Vec<u64>> {
        ids.iter()
            .map(|&id| {
                let c = self.get(id)?.category_id;
                self.sample_same_category(c, id, rng)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub outfits: Vec<Outfit>,
}

impl Dataset {
    /// Checks that every outfit refers to catalog items, without repeats.
    pub fn new(catalog: Catalog, outfits: Vec<Outfit>) -> Result<Self> {
        for o in &outfits {
            let mut seen = std::collections::HashSet::new();
            for &id in &o.item_ids {
                catalog.require(id)?;
                if !seen.insert(id) {
                    return Err(Error::InvalidArgument(format!(
                        "outfit {} lists item {id} twice",
                        o.outfit_id
                    )));
                }
            }
        }
        Ok(Dataset { catalog, outfits })
    }

    pub fn outfits_in(&self, role: SplitRole) -> Vec<&Outfit> {
        self.outfits
            .iter()
            .filter(|o| split_role(o.outfit_id) == role)
            .collect()
    }

    /// Catalog items referenced by outfits of `role`, in id order.
    pub fn items_in(&self, role: SplitRole) -> Vec<&Item> {
        let mut ids: Vec<u64> = self
            .outfits_in(role)
            .into_iter()
            .flat_map(|o| o.item_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.iter().filter_map(|&id| self.catalog.get(id)).collect()
    }

    /// One split per outfit of `role`, each seeded from `seed` and its id.
    pub fn triples(&self, role: SplitRole, seed: u64) -> Result<Vec<SplitTriple>> {
        self.outfits_in(role)
            .into_iter()
            .map(|o| {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(o.outfit_id)));
                split_outfit(o, &self.catalog, &mut rng)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 80/10/10 partition by a hash of the outfit id.
pub fn split_role(outfit_id: u64) -> SplitRole {
    match splitmix64(outfit_id) % 10 {
        0..=7 => SplitRole::Train,
        8 => SplitRole::Val,
        _ => SplitRole::Test,
    }
}

/// Query set `x`, target set `y` and target categories `z` (aligned with `y`).
#[derive(Clone, Debug, PartialEq)]
pub struct SplitTriple {
    pub outfit_id: u64,
    pub x: FeatureSet,
    pub y: FeatureSet,
    pub z: Vec<u32>,
}

impl SplitTriple {
    pub fn x_ids(&self) -> &[u64] {
        self.x.element_ids().expect("split sets carry ids")
    }

    pub fn y_ids(&self) -> &[u64] {
        self.y.element_ids().expect("split sets carry ids")
    }
}

/// Random partition of an outfit: `M` uniform in `1..=n-1`, `Y` a random
/// `M`-subset in random order, `X` the rest in outfit order.
pub fn split_outfit<R: Rng + ?Sized>(
    outfit: &Outfit,
    catalog: &Catalog,
    rng: &mut R,
) -> Result<SplitTriple> {
    let n = outfit.item_ids.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "outfit {} has {n} items; at least 2 are needed to split",
            outfit.outfit_id
        )));
    }
    let m = rng.random_range(1..n);
    let picked = index::sample(rng, n, m).into_vec();
    let mut in_y = vec![false; n];
    for &i in &picked {
        in_y[i] = true;
    }
    let y_ids: Vec<u64> = picked.iter().map(|&i| outfit.item_ids[i]).collect();
    let x_ids: Vec<u64> = (0..n)
        .filter(|&i| !in_y[i])
        .map(|i| outfit.item_ids[i])
        .collect();
    let z = y_ids
        .iter()
        .map(|&id| catalog.require(id).map(|it| it.category_id))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitTriple {
        outfit_id: outfit.outfit_id,
        x: catalog.feature_set(&x_ids)?,
        y: catalog.feature_set(&y_ids)?,
        z,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub categories: usize,
    pub styles: usize,
    pub catalog_size: usize,
    pub outfits: usize,
    pub dim: usize,
    pub noise: f64,
    pub coherence: f64,
    pub min_items: usize,
    pub max_items: usize,
    /// Category popularity is proportional to `1 / (rank + 1)^zipf_exponent`.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            categories: 12,
            styles: 8,
            catalog_size: 5000,
            outfits: 20000,
            dim: 32,
            noise: 0.1,
            coherence: 0.9,
            min_items: 5,
            max_items: 8,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.categories < 2 {
            return bad("at least 2 categories are required".into());
        }
        if self.styles < 1 {
            return bad("at least 1 style is required".into());
        }
        if self.dim == 0 {
            return bad("feature dimension must be positive".into());
        }
        if self.catalog_size < self.categories * self.styles {
            return bad(format!(
                "catalog of {} items cannot cover {} category-style buckets",
                self.catalog_size,
                self.categories * self.styles
            ));
        }
        if self.min_items < 2 || self.max_items < self.min_items {
            return bad(format!(
                "outfit size range {}..={} is invalid",
                self.min_items, self.max_items
            ));
        }
        if self.max_items > self.categories {
            return bad(format!(
                "outfits of up to {} distinct categories need at least that many categories",
                self.max_items
            ));
        }
        if !(0.0..=1.0).contains(&self.coherence) || self.noise < 0.0 || !self.noise.is_finite() {
            return bad("coherence must lie in [0, 1] and noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn category_weights(&self) -> Vec<f64> {
        (0..self.categories)
            .map(|c| ((c + 1) as f64).powf(-self.zipf_exponent))
            .collect()
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut v = Tensor::randn(1, dim, 0.0, 1.0, rng).into_data();
    normalize(&mut v);
    v
}

/// Planted-style catalog and outfits; deterministic given `config.seed`.
///
/// Items not used by any outfit are dropped so that the JSONL file, which
/// stores items inside outfits, round-trips to the same dataset.
pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let GenConfig {
        categories: nc,
        styles: ns,
        catalog_size,
        dim,
        noise,
        coherence,
        ..
    } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let u: Vec<Vec<f64>> = (0..nc).map(|_| unit_gaussian(dim, &mut rng)).collect();
    let v: Vec<Vec<f64>> = (0..ns).map(|_| unit_gaussian(dim, &mut rng)).collect();
    let weights = config.category_weights();
    let cat_dist = WeightedIndex::new(&weights).expect("positive weights");

    let mut items = Vec::with_capacity(catalog_size);
    let mut buckets = vec![Vec::new(); nc * ns];
    let mut by_cat = vec![Vec::new(); nc];
    for i in 0..catalog_size {
        let (c, s) = if i < nc * ns {
            (i / ns, i % ns)
        } else {
            (cat_dist.sample(&mut rng), rng.random_range(0..ns))
        };
        let eps = Tensor::randn(1, dim, 0.0, 1.0, &mut rng);
        let mut f: Vec<f64> = (0..dim)
            .map(|d| u[c][d] + v[s][d] + noise * eps.data()[d])
            .collect();
        normalize(&mut f);
        let id = i as u64;
        buckets[c * ns + s].push(id);
        by_cat[c].push(id);
        items.push(Item {
            item_id: id,
            category_id: c as u32,
            feature: f,
            style_id: Some(s as u32),
            extra: Map::new(),
        });
    }

    let mut outfits = Vec::with_capacity(config.outfits);
    let mut used = vec![false; catalog_size];
    for o in 0..config.outfits {
        let s = rng.random_range(0..ns);
        let n = rng.random_range(config.min_items..=config.max_items);
        let cats = index::sample_weighted(&mut rng, nc, |c| weights[c], n)
            .expect("valid weights")
            .into_vec();
        let mut ids = Vec::with_capacity(n);
        for c in cats {
            let pool = if rng.random_bool(coherence) {
                &buckets[c * ns + s]
            } else {
                &by_cat[c]
            };
            let id = pool[rng.random_range(0..pool.len())];
            used[id as usize] = true;
            ids.push(id);
        }
        outfits.push(Outfit {
            outfit_id: o as u64,
            likes: rng.random_range(0..1000),
            item_ids: ids,
            extra: Map::new(),
        });
    }
    items.retain(|it| used[it.item_id as usize]);
    Dataset::new(Catalog::new(dim, items)?, outfits)
}

#[derive(Serialize, Deserialize)]
struct OutfitLine {
    outfit_id: u64,
    likes: u64,
    items: Vec<Item>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Expected feature length; inferred from the first item when `None`.
    pub dim: Option<usize>,
    /// Reject keys outside the schema instead of preserving them.
    pub strict: bool,
}

pub fn read_jsonl(path: &Path, opts: ReadOptions) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut dim = opts.dim;
    let mut items: HashMap<u64, Item> = HashMap::new();
    let mut outfits = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OutfitLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if opts.strict {
            let unknown = rec
                .extra
                .keys()
                .chain(rec.items.iter().flat_map(|it| it.extra.keys()))
                .next();
            if let Some(k) = unknown {
                return Err(parse_err(lineno, format!("unknown field `{k}`")));
            }
        }
        let mut ids = Vec::with_capacity(rec.items.len());
        for it in rec.items {
            let d = *dim.get_or_insert(it.feature.len());
            if it.feature.len() != d {
                return Err(parse_err(
                    lineno,
                    format!(
                        "item {} has {} features, expected {d}",
                        it.item_id,
                        it.feature.len()
                    ),
                ));
            }
            if (norm(&it.feature) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(parse_err(
                    lineno,
                    format!("item {} feature is not unit-norm", it.item_id),
                ));
            }
            ids.push(it.item_id);
            match items.get(&it.item_id) {
                Some(prev) if *prev != it => {
                    return Err(parse_err(
                        lineno,
                        format!("item {} differs from an earlier occurrence", it.item_id),
                    ))
                }
                Some(_) => {}
                None => {
                    items.insert(it.item_id, it);
                }
            }
        }
        outfits.push(Outfit {
            outfit_id: rec.outfit_id,
            likes: rec.likes,
            item_ids: ids,
            extra: rec.extra,
        });
    }
    let catalog = Catalog::new(dim.unwrap_or(0), items.into_values().collect())?;
    Dataset::new(catalog, outfits)
}

pub fn write_jsonl(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for o in &data.outfits {
        let line = OutfitLine {
            outfit_id: o.outfit_id,
            likes: o.likes,
            items: o
                .item_ids
                .iter()
                .map(|&id| data.catalog.require(id).cloned())
                .collect::<Result<_>>()?,
            extra: o.extra.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GenConfig {
        GenConfig {
            categories: 6,
            styles: 3,
            catalog_size: 120,
            outfits: 60,
            dim: 8,
            min_items: 3,
            max_items: 5,
            seed: 9,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_unit_norm() {
        let a = generate_dataset(&tiny()).unwrap();
        let b = generate_dataset(&tiny()).unwrap();
        assert_eq!(a, b);
        for it in a.catalog.items() {
            assert!((norm(&it.feature) - 1.0).abs() < UNIT_NORM_TOL);
            assert!((it.category_id as usize) < 6);
        }
        for o in &a.outfits {
            assert!((3..=5).contains(&o.item_ids.len()));
            let mut cats: Vec<u32> = o
                .item_ids
                .iter()
                .map(|&id| a.catalog.get(id).unwrap().category_id)
                .collect();
            cats.sort_unstable();
            cats.dedup();
            assert_eq!(cats.len(), o.item_ids.len());
        }
    }

    #[test]
    fn zero_noise_full_coherence_collapses_buckets() {
        let cfg = GenConfig {
            noise: 0.0,
            coherence: 1.0,
            ..tiny()
        };
        let d = generate_dataset(&cfg).unwrap();
        let mut first: HashMap<(u32, u32), &Vec<f64>> = HashMap::new();
        for it in d.catalog.items() {
            let key = (it.category_id, it.style_id.unwrap());
            let f = first.entry(key).or_insert(&it.feature);
            assert_eq!(*f, &it.feature);
        }
        for o in &d.outfits {
            let styles: Vec<u32> = o
                .item_ids
                .iter()
                .map(|&id| d.catalog.get(id).unwrap().style_id.unwrap())
                .collect();
            assert!(styles.iter().all(|&s| s == styles[0]));
        }
    }

    #[test]
    fn rejects_small_catalog() {
        let cfg = GenConfig {
            catalog_size: 10,
            ..tiny()
        };
        assert!(matches!(
            generate_dataset(&cfg),
            Err(Error::InvalidArgument(_))
        ));
        let cfg = GenConfig {
            categories: 1,
            ..tiny()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn split_partitions_and_aligns() {
        let d = generate_dataset(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for o in &d.outfits {
            let t = split_outfit(o, &d.catalog, &mut rng).unwrap();
            assert_eq!(t.x.len() + t.y.len(), o.item_ids.len());
            assert!(!t.x.is_empty() && !t.y.is_empty());
            assert!(t.x_ids().iter().all(|id| !t.y_ids().contains(id)));
            for (m, &id) in t.y_ids().iter().enumerate() {
                assert_eq!(t.z[m], d.catalog.get(id).unwrap().category_id);
                assert_eq!(t.y.row(m), d.catalog.get(id).unwrap().feature.as_slice());
            }
        }
        let one = Outfit {
            outfit_id: 0,
            likes: 0,
            item_ids: vec![d.catalog.items()[0].item_id],
            extra: Map::new(),
        };
        assert!(split_outfit(&one, &d.catalog, &mut rng).is_err());
    }

    #[test]
    fn triples_are_reproducible() {
        let d = generate_dataset(&tiny()).unwrap();
        assert_eq!(
            d.triples(SplitRole::Train, 5).unwrap(),
            d.triples(SplitRole::Train, 5).unwrap()
        );
    }

    #[test]
    fn same_category_sampling_excludes_original() {
        let d = generate_dataset(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let it = &d.catalog.items()[0];
        for _ in 0..50 {
            let other = d
                .catalog
                .sample_same_category(it.category_id, it.item_id, &mut rng)
                .unwrap();
            assert_ne!(other, it.item_id);
            assert_eq!(d.catalog.get(other).unwrap().category_id, it.category_id);
        }
    }
}
