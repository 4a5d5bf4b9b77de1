//! The conditional set transformation `Ŷ = SAB(SlotAttention(Z, X))` and the
//! ablation variants built around it.
//!
//! | tag  | slots from           | SAB stage | training loss          |
//! |------|----------------------|-----------|------------------------|
//! | `CR` | condition lookup     | yes       | CE + α·SM              |
//! | `Cx` | condition lookup     | yes       | CE                     |
//! | `xR` | Gaussian, `M` slots  | yes       | Chamfer + α·SM         |
//! | `xx` | Gaussian, `M` slots  | yes       | Chamfer                |
//! | `sa` | Gaussian, `M` slots  | no        | Chamfer                |
//! | `st` | sequential encoder   | n/a       | CE (teacher forcing)   |

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{AttentionBlock, AttentionConfig, Linear};
use crate::params::ParamStore;
use crate::retrieval::{RetrievalIndex, SearchMode};
use crate::set::FeatureSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CR")]
    Cr,
    #[serde(rename = "Cx")]
    Cx,
    #[serde(rename = "xR")]
    Xr,
    #[serde(rename = "xx")]
    Xx,
    #[serde(rename = "sa")]
    Sa,
    #[serde(rename = "st")]
    St,
}

/// Which loss terms a variant trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossWiring {
    pub cross_entropy: bool,
    pub chamfer: bool,
    pub set_matching: bool,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cr,
        Variant::Cx,
        Variant::Xr,
        Variant::Xx,
        Variant::Sa,
        Variant::St,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Cr => "CR",
            Variant::Cx => "Cx",
            Variant::Xr => "xR",
            Variant::Xx => "xx",
            Variant::Sa => "sa",
            Variant::St => "st",
        }
    }

    /// Slots come from the category lookup table.
    pub fn is_conditional(self) -> bool {
        matches!(self, Variant::Cr | Variant::Cx)
    }

    pub fn has_sab_stage(self) -> bool {
        matches!(self, Variant::Cr | Variant::Cx | Variant::Xr | Variant::Xx)
    }

    pub fn has_condition_table(self) -> bool {
        matches!(self, Variant::Cr | Variant::Cx | Variant::St)
    }

    pub fn loss_wiring(self) -> LossWiring {
        match self {
            Variant::Cr => LossWiring {
                cross_entropy: true,
                chamfer: false,
                set_matching: true,
            },
            Variant::Cx | Variant::St => LossWiring {
                cross_entropy: true,
                chamfer: false,
                set_matching: false,
            },
            Variant::Xr => LossWiring {
                cross_entropy: false,
                chamfer: true,
                set_matching: true,
            },
            Variant::Xx | Variant::Sa => LossWiring {
                cross_entropy: false,
                chamfer: true,
                set_matching: false,
            },
        }
    }

    pub fn needs_scorer(self) -> bool {
        self.loss_wiring().set_matching
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant tag `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub slot_layers: usize,
    pub sab_layers: usize,
    /// SAB layers in the sequential `st` encoder.
    pub st_layers: usize,
    pub categories: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            attention: AttentionConfig::default(),
            slot_layers: 3,
            sab_layers: 2,
            st_layers: 2,
            categories: 12,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.attention.dim
    }
}

/// How the initial slots are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum SlotInit {
    /// One slot per category label, looked up in the condition table.
    Conditions(Vec<u32>),
    /// `count` slots drawn from `N(mean, std^2)` with a fixed seed.
    Gaussian {
        count: usize,
        mean: f64,
        std: f64,
        seed: u64,
    },
}

impl SlotInit {
    pub fn gaussian(count: usize, seed: u64) -> Self {
        SlotInit::Gaussian {
            count,
            mean: 0.0,
            std: 1.0,
            seed,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            SlotInit::Conditions(l) => l.len(),
            SlotInit::Gaussian { count, .. } => *count,
        }
    }
}

const TABLE: &str = "cond.table";
pub const DEFAULT_EVAL_SEED: u64 = 0x5eed_0e7a;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    variant: Variant,
    config: ModelConfig,
}

/// Parameters and structure of one variant.
#[derive(Debug)]
pub struct CstModel {
    variant: Variant,
    config: ModelConfig,
    params: ParamStore,
    slot_blocks: Vec<AttentionBlock>,
    sab_blocks: Vec<AttentionBlock>,
    out: Linear,
    st_blocks: Vec<AttentionBlock>,
    st_out: Linear,
    eval_seed: u64,
    forward_passes: AtomicU64,
}

impl Clone for CstModel {
    fn clone(&self) -> Self {
        CstModel {
            variant: self.variant,
            config: self.config,
            params: self.params.clone(),
            slot_blocks: self.slot_blocks.clone(),
            sab_blocks: self.sab_blocks.clone(),
            out: self.out.clone(),
            st_blocks: self.st_blocks.clone(),
            st_out: self.st_out.clone(),
            eval_seed: self.eval_seed,
            forward_passes: AtomicU64::new(self.forward_passes()),
        }
    }
}

impl CstModel {
    fn skeleton(variant: Variant, config: ModelConfig) -> Result<Self> {
        if config.categories == 0 {
            return Err(Error::InvalidArgument(
                "at least one category is required".into(),
            ));
        }
        let att = config.attention;
        let blocks = |prefix: &str, n: usize| -> Result<Vec<AttentionBlock>> {
            (0..n)
                .map(|l| AttentionBlock::new(&format!("{prefix}.{l}"), att))
                .collect()
        };
        let (slot_blocks, sab_blocks, st_blocks) = match variant {
            Variant::St => (vec![], vec![], blocks("st.enc", config.st_layers)?),
            v => (
                blocks("slot", config.slot_layers)?,
                if v.has_sab_stage() {
                    blocks("sab", config.sab_layers)?
                } else {
                    vec![]
                },
                vec![],
            ),
        };
        Ok(CstModel {
            variant,
            config,
            params: ParamStore::new(),
            slot_blocks,
            sab_blocks,
            out: Linear::new("out", att.dim, att.dim, true),
            st_blocks,
            st_out: Linear::new("st.out", att.dim, att.dim, true),
            eval_seed: DEFAULT_EVAL_SEED,
            forward_passes: AtomicU64::new(0),
        })
    }

    /// Builds and randomly initialises a variant.
    pub fn build_variant(variant: Variant, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::skeleton(variant, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if variant.has_condition_table() {
            store.insert(
                TABLE,
                Tensor::randn(config.categories, config.dim(), 0.0, 1.0, &mut rng),
            )?;
        }
        for b in m
            .slot_blocks
            .iter()
            .chain(&m.sab_blocks)
            .chain(&m.st_blocks)
        {
            b.init(&mut store, &mut rng)?;
        }
        if variant == Variant::St {
            m.st_out.init(&mut store, &mut rng)?;
        } else {
            m.out.init(&mut store, &mut rng)?;
        }
        m.params = store;
        Ok(m)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_sab_stack(&self) -> bool {
        !self.sab_blocks.is_empty()
    }

    pub fn has_condition_table(&self) -> bool {
        self.params.contains(TABLE)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval_seed
    }

    pub fn set_eval_seed(&mut self, seed: u64) {
        self.eval_seed = seed;
    }

    /// Model inferences run so far (one per `cst_forward`, one per `st` step).
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    fn count_pass(&self) {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
    }

    fn check_labels(&self, labels: &[u32]) -> Result<()> {
        let count = self.config.categories;
        match labels.iter().find(|&&l| l as usize >= count) {
            Some(&id) => Err(Error::UnknownCategory { id, count }),
            None => Ok(()),
        }
    }

    fn table_node(&self, g: &mut Graph, store: &ParamStore) -> Result<NodeId> {
        if !store.contains(TABLE) {
            return Err(Error::InvalidArgument(format!(
                "variant {} has no condition table",
                self.variant
            )));
        }
        g.param(store, TABLE)
    }

    /// Condition-set rows `table[labels[m]]`, in label order.
    pub fn embed_conditions(&self, labels: &[u32]) -> Result<FeatureSet> {
        self.check_labels(labels)?;
        let table = self.params.get(TABLE).map_err(|_| {
            Error::InvalidArgument(format!("variant {} has no condition table", self.variant))
        })?;
        let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        Ok(FeatureSet::new(table.select_rows(&idx)))
    }

    /// The slot-init a variant uses for a target with these labels: the
    /// labels themselves for conditional variants, otherwise `labels.len()`
    /// Gaussian slots seeded with `seed`.
    pub fn slot_init_for(&self, labels: &[u32], seed: u64) -> SlotInit {
        if self.variant.is_conditional() {
            SlotInit::Conditions(labels.to_vec())
        } else {
            SlotInit::gaussian(labels.len(), seed)
        }
    }

    /// Initial slots as a graph node.
    pub fn slots_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        init: &SlotInit,
    ) -> Result<NodeId> {
        match init {
            SlotInit::Conditions(labels) => {
                if labels.is_empty() {
                    return Err(Error::EmptySet("condition set"));
                }
                self.check_labels(labels)?;
                let table = self.table_node(g, store)?;
                let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                g.gather_rows(table, &idx)
            }
            SlotInit::Gaussian {
                count,
                mean,
                std,
                seed,
            } => {
                if *count == 0 {
                    return Err(Error::EmptySet("slot count"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(g.constant(Tensor::randn(
                    *count,
                    self.config.dim(),
                    *mean,
                    *std,
                    &mut rng,
                )))
            }
        }
    }

    /// Records the transformation on `g`; returns unit-norm output rows.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        x_mask: Option<&[bool]>,
        slots: NodeId,
    ) -> Result<NodeId> {
        if self.variant == Variant::St {
            return Err(Error::InvalidArgument(
                "the st baseline completes sequentially; use st_sequential_complete".into(),
            ));
        }
        if g.value(x).rows() == 0 {
            return Err(Error::EmptySet("query set"));
        }
        if g.value(slots).rows() == 0 {
            return Err(Error::EmptySet("condition set"));
        }
        let mut y = slots;
        for b in &self.slot_blocks {
            y = b.forward(g, store, y, x, x_mask)?;
        }
        for b in &self.sab_blocks {
            y = b.sab(g, store, y, None)?;
        }
        let y = self.out.forward(g, store, y)?;
        g.normalize_rows(y)
    }

    /// `f(X, Z)`: one inference producing `|Z|` unit-norm features.
    pub fn cst_forward(&self, x: &FeatureSet, z: &FeatureSet) -> Result<FeatureSet> {
        if x.valid_count() == 0 {
            return Err(Error::EmptySet("query set"));
        }
        if z.is_empty() {
            return Err(Error::EmptySet("condition set"));
        }
        if x.dim() != self.config.dim() || z.dim() != self.config.dim() {
            return Err(Error::shape("cst_forward", "feature dimension"));
        }
        let mut g = Graph::new();
        let xn = g.constant(x.features().clone());
        let zn = g.constant(z.features().clone());
        let out = self.forward_graph(&mut g, &self.params, xn, x.mask_if_partial(), zn)?;
        self.count_pass();
        z.with_features(g.value(out).clone())
    }

    /// Builds the slots from `init` and runs [`cst_forward`](Self::cst_forward).
    pub fn complete_features(&self, x: &FeatureSet, init: &SlotInit) -> Result<FeatureSet> {
        let z = match init {
            SlotInit::Conditions(labels) => {
                if labels.is_empty() {
                    return Err(Error::EmptySet("condition set"));
                }
                self.embed_conditions(labels)?
            }
            SlotInit::Gaussian { .. } => {
                let mut g = Graph::new();
                let s = self.slots_graph(&mut g, &self.params, init)?;
                FeatureSet::new(g.value(s).clone())
            }
        };
        self.cst_forward(x, &z)
    }

    /// One `st` step: encode `rows` plus the token for `label`, pool, project.
    pub fn st_step_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: NodeId,
        label: u32,
    ) -> Result<NodeId> {
        if self.variant != Variant::St {
            return Err(Error::InvalidArgument(format!(
                "variant {} is not the sequential baseline",
                self.variant
            )));
        }
        self.check_labels(&[label])?;
        let table = self.table_node(g, store)?;
        let token = g.gather_rows(table, &[label as usize])?;
        let mut h = g.concat_rows(&[rows, token])?;
        for b in &self.st_blocks {
            h = b.sab(g, store, h, None)?;
        }
        let pooled = g.mean_rows(h, None)?;
        let y = self.st_out.forward(g, store, pooled)?;
        g.normalize_rows(y)
    }

    /// Sequential completion: predict one feature, retrieve the best item of
    /// the requested category, append it to the query set and repeat.
    pub fn st_sequential_complete(
        &self,
        x: &FeatureSet,
        labels: &[u32],
        index: &RetrievalIndex,
        mode: SearchMode,
    ) -> Result<Vec<u64>> {
        if labels.is_empty() {
            return Err(Error::EmptySet("label list"));
        }
        if x.valid_count() == 0 {
            return Err(Error::EmptySet("query set"));
        }
        let mut rows = x.valid_rows();
        let mut ids = Vec::with_capacity(labels.len());
        for &label in labels {
            let mut g = Graph::new();
            let xn = g.constant(rows.clone());
            let y = self.st_step_graph(&mut g, &self.params, xn, label)?;
            self.count_pass();
            let query = g.value(y).row(0).to_vec();
            let hit = index
                .query_knn(&query, 1, Some(label), mode)?
                .into_iter()
                .next()
                .ok_or(Error::NoCandidates)?;
            ids.push(hit.item_id);
            let feat = index.feature(hit.item_id).expect("indexed item");
            let mut data = rows.into_data();
            data.extend_from_slice(feat);
            rows = Tensor::from_vec(data.len() / self.config.dim(), self.config.dim(), data)?;
        }
        Ok(ids)
    }

    fn header(&self) -> String {
        serde_json::to_string(&CheckpointHeader {
            kind: "cst".into(),
            variant: self.variant,
            config: self.config,
        })
        .expect("header serialises")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.to_bytes(&self.header())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = ParamStore::from_bytes(bytes)?;
        let h: CheckpointHeader = serde_json::from_str(&header)
            .map_err(|e| Error::Checkpoint(format!("bad model header: {e}")))?;
        if h.kind != "cst" {
            return Err(Error::Checkpoint(format!(
                "expected a cst checkpoint, found `{}`",
                h.kind
            )));
        }
        let mut m = Self::skeleton(h.variant, h.config)?;
        let reference = Self::build_variant(h.variant, h.config, 0)?;
        let expected: Vec<_> = reference
            .params
            .iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let found: Vec<_> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "parameter layout does not match variant {}",
                h.variant
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.header())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks its variant tag.
    pub fn load_expecting(path: &Path, variant: Variant) -> Result<Self> {
        let m = Self::load(path)?;
        if m.variant != variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds variant {}, expected {variant}",
                m.variant
            )));
        }
        Ok(m)
    }
}
