//! Exchangeable set-compatibility scorer `g(X, Y)`.
//!
//! Both sets pass through a shared SAB encoder. A cross block lets one set
//! attend to the other, the result is mean-pooled and a two-layer head maps
//! it to a scalar `h(A, B)`. The score is `g(X, Y) = h(X, Y) + h(Y, X)`, so
//! swapping the arguments only swaps the two summands and the result is
//! bitwise identical. Pooling makes `g` invariant to the order inside each
//! set.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{split_outfit, splitmix64, Catalog, Outfit};
use crate::error::{Error, Result};
use crate::eval::{finb_eval, FinbChooser, FinbReport};
use crate::layers::{AttentionBlock, AttentionConfig, Linear};
use crate::params::{ParamStore, Sgd};
use crate::set::FeatureSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub attention: AttentionConfig,
    pub encoder_layers: usize,
    pub head_hidden: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            attention: AttentionConfig::default(),
            encoder_layers: 2,
            head_hidden: 32,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: MatchConfig,
}

#[derive(Clone, Debug)]
pub struct SetMatcher {
    config: MatchConfig,
    params: ParamStore,
    encoder: Vec<AttentionBlock>,
    cross: AttentionBlock,
    head1: Linear,
    head2: Linear,
}

impl SetMatcher {
    fn skeleton(config: MatchConfig) -> Result<Self> {
        let att = config.attention;
        Ok(SetMatcher {
            config,
            params: ParamStore::new(),
            encoder: (0..config.encoder_layers)
                .map(|l| AttentionBlock::new(&format!("match.enc.{l}"), att))
                .collect::<Result<_>>()?,
            cross: AttentionBlock::new("match.cross", att)?,
            head1: Linear::new("match.head1", att.dim, config.head_hidden, true),
            head2: Linear::new("match.head2", config.head_hidden, 1, true),
        })
    }

    pub fn new(config: MatchConfig, seed: u64) -> Result<Self> {
        let mut m = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for b in m.encoder.iter().chain([&m.cross]) {
            b.init(&mut store, &mut rng)?;
        }
        m.head1.init(&mut store, &mut rng)?;
        m.head2.init(&mut store, &mut rng)?;
        m.params = store;
        Ok(m)
    }

    pub fn config(&self) -> &MatchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Drops the gradient slots; parameters enter graphs as constants.
    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// SHA-256 of the parameter bytes.
    pub fn checksum(&self) -> String {
        self.params.fingerprint()
    }

    /// Shared SAB encoding of one set.
    pub fn encode_graph(&self, g: &mut Graph, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let mut h = x;
        for b in &self.encoder {
            h = b.sab(g, &self.params, h, mask)?;
        }
        Ok(h)
    }

    fn half(
        &self,
        g: &mut Graph,
        ea: NodeId,
        a_mask: Option<&[bool]>,
        eb: NodeId,
        b_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let c = self.cross.forward(g, &self.params, ea, eb, b_mask)?;
        let pooled = g.mean_rows(c, a_mask)?;
        let h = self.head1.forward(g, &self.params, pooled)?;
        let h = g.relu(h)?;
        self.head2.forward(g, &self.params, h)
    }

    /// `g` from two already-encoded sets (see [`encode_graph`](Self::encode_graph)).
    pub fn score_encoded(
        &self,
        g: &mut Graph,
        ex: NodeId,
        x_mask: Option<&[bool]>,
        ey: NodeId,
        y_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let a = self.half(g, ex, x_mask, ey, y_mask)?;
        let b = self.half(g, ey, y_mask, ex, x_mask)?;
        g.add(a, b)
    }

    /// `g(X, Y)` as a `1 x 1` node.
    pub fn score_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        x_mask: Option<&[bool]>,
        y: NodeId,
        y_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let ex = self.encode_graph(g, x, x_mask)?;
        let ey = self.encode_graph(g, y, y_mask)?;
        self.score_encoded(g, ex, x_mask, ey, y_mask)
    }

    /// `g(X, Y)` on concrete sets.
    pub fn match_score(&self, x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
        if x.valid_count() == 0 || y.valid_count() == 0 {
            return Err(Error::EmptySet("match_score operand"));
        }
        let mut g = Graph::new();
        let xn = g.constant(x.features().clone());
        let yn = g.constant(y.features().clone());
        let s = self.score_graph(&mut g, xn, x.mask_if_partial(), yn, y.mask_if_partial())?;
        Ok(g.value(s).item())
    }

    fn header(&self) -> String {
        serde_json::to_string(&Header {
            kind: "set-matcher".into(),
            config: self.config,
        })
        .expect("header serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.header())
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut params) = ParamStore::load(path)?;
        let h: Header = serde_json::from_str(&header)
            .map_err(|e| Error::Checkpoint(format!("bad scorer header: {e}")))?;
        if h.kind != "set-matcher" {
            return Err(Error::Checkpoint(format!(
                "expected a set-matcher checkpoint, found `{}`",
                h.kind
            )));
        }
        let reference = Self::new(h.config, 0)?;
        let shapes = |s: &ParamStore| -> Vec<(String, [usize; 2])> {
            s.iter().map(|(n, t)| (n.to_string(), t.shape())).collect()
        };
        if shapes(&reference.params) != shapes(&params) {
            return Err(Error::Checkpoint("scorer parameter layout mismatch".into()));
        }
        params.freeze();
        let mut m = Self::skeleton(h.config)?;
        m.params = params;
        Ok(m)
    }
}

impl FinbChooser for SetMatcher {
    /// Index of the highest-scoring candidate (first on ties).
    fn choose(&self, x: &FeatureSet, _labels: &[u32], candidates: &[FeatureSet]) -> Result<usize> {
        let mut g = Graph::new();
        let xn = g.constant(x.features().clone());
        let ex = self.encode_graph(&mut g, xn, x.mask_if_partial())?;
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, c) in candidates.iter().enumerate() {
            let yn = g.constant(c.features().clone());
            let ey = self.encode_graph(&mut g, yn, c.mask_if_partial())?;
            let s = self.score_encoded(&mut g, ex, x.mask_if_partial(), ey, c.mask_if_partial())?;
            let v = g.value(s).item();
            if v > best.0 {
                best = (v, i);
            }
        }
        Ok(best.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchTrainConfig {
    pub model: MatchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Held-out FINB negatives per outfit.
    pub finb_negatives: usize,
    /// Caps the outfits used per epoch; `None` uses all of them.
    pub max_outfits: Option<usize>,
}

impl Default for MatchTrainConfig {
    fn default() -> Self {
        MatchTrainConfig {
            model: MatchConfig::default(),
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            finb_negatives: 7,
            max_outfits: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub examples_per_epoch: usize,
    pub heldout_finb: Option<FinbReport>,
}

/// Logistic pretraining: `softplus(-g(X, Y)) + softplus(g(X, Y⁻))` with `Y⁻`
/// the category-matched replacement of `Y`. Returns the frozen scorer.
pub fn pretrain_matching(
    train: &[&Outfit],
    heldout: &[&Outfit],
    catalog: &Catalog,
    config: &MatchTrainConfig,
) -> Result<(SetMatcher, PretrainReport)> {
    if catalog.num_categories() < 2 {
        return Err(Error::InvalidArgument(
            "scorer pretraining needs at least 2 categories".into(),
        ));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidArgument(
            "epochs and batch size must be positive".into(),
        ));
    }
    let mut model = SetMatcher::new(config.model, config.seed)?;
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut examples_per_epoch = 0;
    let mut order: Vec<&Outfit> = train
        .iter()
        .copied()
        .filter(|o| o.item_ids.len() >= 2)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x6d61_7463_68));
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let take = config.max_outfits.unwrap_or(order.len()).min(order.len());
        let mut examples = Vec::with_capacity(take);
        for o in &order[..take] {
            let t = split_outfit(o, catalog, &mut rng)?;
            if let Some(neg) = catalog.category_matched_negative(t.y_ids(), &mut rng) {
                examples.push((t.x, t.y, catalog.feature_set(&neg)?));
            }
        }
        if examples.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset too small to form category-matched negatives".into(),
            ));
        }
        examples_per_epoch = examples.len();
        let mut total = 0.0;
        for batch in examples.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut terms = Vec::with_capacity(2 * batch.len());
            for (x, y, neg) in batch {
                let xn = g.constant(x.features().clone());
                let ex = model.encode_graph(&mut g, xn, None)?;
                let yn = g.constant(y.features().clone());
                let ey = model.encode_graph(&mut g, yn, None)?;
                let nn = g.constant(neg.features().clone());
                let en = model.encode_graph(&mut g, nn, None)?;
                let sp = model.score_encoded(&mut g, ex, None, ey, None)?;
                let sn = model.score_encoded(&mut g, ex, None, en, None)?;
                let msp = g.scale(sp, -1.0)?;
                terms.push(g.softplus(msp)?);
                terms.push(g.softplus(sn)?);
            }
            let all = g.concat_rows(&terms)?;
            let sum = g.sum(all)?;
            let loss = g.scale(sum, 1.0 / batch.len() as f64)?;
            let (value, grads) = g.eval_and_grad(&model.params, loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "scorer loss" });
            }
            opt.step(&mut model.params, &grads)?;
            total += value * batch.len() as f64;
        }
        let mean = total / examples.len() as f64;
        info!("scorer epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    model.freeze();
    let heldout_finb = if heldout.is_empty() {
        None
    } else {
        Some(finb_eval(
            &model,
            heldout,
            catalog,
            config.finb_negatives,
            splitmix64(config.seed ^ 0x6669_6e62),
        )?)
    };
    Ok((
        model,
        PretrainReport {
            epoch_losses,
            examples_per_epoch,
            heldout_finb,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> MatchConfig {
        MatchConfig {
            attention: AttentionConfig {
                dim: 8,
                heads: 2,
                ff_hidden: 8,
            },
            encoder_layers: 2,
            head_hidden: 8,
        }
    }

    #[test]
    fn symmetric_bitwise() {
        let m = SetMatcher::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = FeatureSet::new(Tensor::randn(3, 8, 0.0, 1.0, &mut rng));
            let y = FeatureSet::new(Tensor::randn(5, 8, 0.0, 1.0, &mut rng));
            let a = m.match_score(&x, &y).unwrap();
            let b = m.match_score(&y, &x).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn frozen_has_no_grad_slots_and_round_trips() {
        let mut m = SetMatcher::new(small(), 3).unwrap();
        assert!(m.params().has_grad_slots());
        m.freeze();
        assert!(!m.params().has_grad_slots());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        m.save(&p).unwrap();
        let back = SetMatcher::load(&p).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn empty_sets_rejected() {
        let m = SetMatcher::new(small(), 3).unwrap();
        let x = FeatureSet::new(Tensor::filled(2, 8, 0.1));
        let e = FeatureSet::new(Tensor::zeros(0, 8));
        assert!(matches!(m.match_score(&x, &e), Err(Error::EmptySet(_))));
    }
}
