//! Training objectives.
//!
//! * Chamfer: `Σ_a min_b |a-b|² + Σ_b min_a |a-b|²`.
//! * In-batch cross-entropy: `-(1/M) Σ_m log softmax_u(ŷ_m·u/τ)[y_m]`, the
//!   softmax running over every target item `u` of the mini-batch.
//! * Set-matching regulariser: `softplus(g(X, Y) - g(X, Ŷ))` with `g` frozen.
//! * Total: main term plus `α` times the regulariser, per variant wiring.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, NodeId};
use crate::data::{splitmix64, SplitTriple};
use crate::error::{Error, Result};
use crate::matching::SetMatcher;
use crate::model::{CstModel, Variant};
use crate::params::ParamStore;
use crate::set::FeatureSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Chamfer loss between the row sets of `a` and `b`.
pub fn chamfer_graph(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.value(a).rows() == 0 || g.value(b).rows() == 0 {
        return Err(Error::EmptySet("chamfer operand"));
    }
    let d = g.sq_dist(a, b)?;
    let ra = g.min_rows(d)?;
    let cb = g.min_cols(d)?;
    let sa = g.sum(ra)?;
    let sb = g.sum(cb)?;
    g.add(sa, sb)
}

/// Cross-entropy of `yhat` rows against `universe` rows; `targets[m]` is the
/// universe row of the true item for `yhat[m]`.
pub fn ce_inbatch_graph(
    g: &mut Graph,
    yhat: NodeId,
    universe: NodeId,
    targets: &[usize],
    temperature: f64,
) -> Result<NodeId> {
    let m = g.value(yhat).rows();
    if m == 0 {
        return Err(Error::EmptySet("ce_inbatch predictions"));
    }
    if targets.len() != m {
        return Err(Error::shape(
            "ce_inbatch",
            format!("{} targets for {m} rows", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= g.value(universe).rows()) {
        return Err(Error::NotInUniverse(bad));
    }
    let logits = g.matmul_t(yhat, universe)?;
    let logits = g.scale(logits, 1.0 / temperature)?;
    let lsm = g.log_softmax_rows(logits)?;
    let picked = g.pick(lsm, targets)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// `softplus(g(X, Y) - g(X, Ŷ))` given the encoded query set `ex`.
/// The scorer must be frozen so that only `yhat` carries gradient.
pub fn sm_reg_graph(
    g: &mut Graph,
    scorer: &SetMatcher,
    ex: NodeId,
    x_mask: Option<&[bool]>,
    ytrue: NodeId,
    yhat: NodeId,
) -> Result<NodeId> {
    if !scorer.is_frozen() {
        return Err(Error::InvalidArgument(
            "the set-matching scorer must be frozen".into(),
        ));
    }
    let ey = scorer.encode_graph(g, ytrue, None)?;
    let g_true = scorer.score_encoded(g, ex, x_mask, ey, None)?;
    let eh = scorer.encode_graph(g, yhat, None)?;
    let g_hat = scorer.score_encoded(g, ex, x_mask, eh, None)?;
    let gap = g.sub(g_true, g_hat)?;
    g.softplus(gap)
}

pub fn chamfer(x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
    if x.valid_count() == 0 || y.valid_count() == 0 {
        return Err(Error::EmptySet("chamfer operand"));
    }
    let mut g = Graph::new();
    let a = g.constant(x.valid_rows());
    let b = g.constant(y.valid_rows());
    let l = chamfer_graph(&mut g, a, b)?;
    Ok(g.value(l).item())
}

/// Universe row of each `ytrue` row: matched by element id when both sets
/// carry ids, otherwise by exact feature equality.
pub fn universe_positions(ytrue: &FeatureSet, universe: &FeatureSet) -> Result<Vec<usize>> {
    (0..ytrue.len())
        .map(|m| {
            let found = match (ytrue.element_ids(), universe.element_ids()) {
                (Some(yi), Some(ui)) => ui.iter().position(|&u| u == yi[m]),
                _ => (0..universe.len()).find(|&j| universe.row(j) == ytrue.row(m)),
            };
            found.ok_or(Error::NotInUniverse(m))
        })
        .collect()
}

pub fn ce_inbatch(
    yhat: &FeatureSet,
    ytrue: &FeatureSet,
    universe: &FeatureSet,
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    if yhat.is_empty() {
        return Err(Error::EmptySet("ce_inbatch predictions"));
    }
    if yhat.len() != ytrue.len() {
        return Err(Error::shape("ce_inbatch", "|yhat| != |ytrue|"));
    }
    let targets = universe_positions(ytrue, universe)?;
    let mut g = Graph::new();
    let yh = g.constant(yhat.features().clone());
    let u = g.constant(universe.features().clone());
    let l = ce_inbatch_graph(&mut g, yh, u, &targets, config.temperature)?;
    Ok(g.value(l).item())
}

pub fn sm_reg(
    yhat: &FeatureSet,
    x: &FeatureSet,
    ytrue: &FeatureSet,
    scorer: &SetMatcher,
) -> Result<f64> {
    if !scorer.is_frozen() {
        return Err(Error::InvalidArgument(
            "the set-matching scorer must be frozen".into(),
        ));
    }
    let gap = scorer.match_score(x, ytrue)? - scorer.match_score(x, yhat)?;
    Ok(softplus(gap))
}

/// Loss components of one batch; terms a variant does not use are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: Option<f64>,
    pub chamfer: Option<f64>,
    pub sm: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub ce: Option<NodeId>,
    pub chamfer: Option<NodeId>,
    pub sm: Option<NodeId>,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map(|n| g.value(n).item());
        LossBreakdown {
            ce: v(self.ce),
            chamfer: v(self.chamfer),
            sm: v(self.sm),
            total: g.value(self.total).item(),
        }
    }
}

/// Target items of a batch, deduplicated by id in first-seen order, plus the
/// universe row of every target element.
pub fn batch_universe(batch: &[&SplitTriple]) -> Result<(FeatureSet, Vec<Vec<usize>>)> {
    let mut ids: Vec<u64> = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut positions = Vec::with_capacity(batch.len());
    for t in batch {
        dim = t.y.dim();
        let mut pos = Vec::with_capacity(t.y.len());
        for (m, &id) in t.y_ids().iter().enumerate() {
            let p = *seen.entry(id).or_insert_with(|| {
                ids.push(id);
                rows.extend_from_slice(t.y.row(m));
                ids.len() - 1
            });
            pos.push(p);
        }
        positions.push(pos);
    }
    if ids.is_empty() {
        return Err(Error::EmptySet("batch targets"));
    }
    let universe = FeatureSet::with_ids(Tensor::from_vec(ids.len(), dim, rows)?, ids)?;
    Ok((universe, positions))
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let all = g.concat_rows(terms)?;
    g.mean(all)
}

/// Records the variant's training loss for one mini-batch on `g`.
///
/// Each term is averaged over the triples of the batch. Gaussian slots for
/// triple `i` are seeded from `slot_seed` and `i`.
pub fn batch_loss_graph(
    g: &mut Graph,
    model: &CstModel,
    store: &ParamStore,
    batch: &[&SplitTriple],
    scorer: Option<&SetMatcher>,
    config: &LossConfig,
    slot_seed: u64,
) -> Result<LossNodes> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptySet("batch"));
    }
    let variant = model.variant();
    let wiring = variant.loss_wiring();
    let scorer = match (wiring.set_matching, scorer) {
        (true, None) => {
            return Err(Error::MissingScorer {
                variant: variant.tag().into(),
            })
        }
        (true, Some(s)) => Some(s),
        (false, _) => None,
    };
    let (universe, positions) = if wiring.cross_entropy {
        let (u, p) = batch_universe(batch)?;
        (Some(g.constant(u.into_features())), p)
    } else {
        (None, vec![])
    };

    let mut ce_terms = Vec::new();
    let mut ch_terms = Vec::new();
    let mut sm_terms = Vec::new();
    for (i, t) in batch.iter().enumerate() {
        let x = g.constant(t.x.features().clone());
        let x_mask = t.x.mask_if_partial();
        if variant == Variant::St {
            let u = universe.expect("st trains with cross-entropy");
            let mut preds = Vec::with_capacity(t.z.len());
            for (m, &label) in t.z.iter().enumerate() {
                let ctx = if m == 0 {
                    g.constant(t.x.valid_rows())
                } else {
                    let prev = t.y.features().select_rows(&(0..m).collect::<Vec<_>>());
                    let mut data = t.x.valid_rows().into_data();
                    data.extend_from_slice(prev.data());
                    g.constant(Tensor::from_vec(data.len() / t.x.dim(), t.x.dim(), data)?)
                };
                preds.push(model.st_step_graph(g, store, ctx, label)?);
            }
            let yhat = g.concat_rows(&preds)?;
            ce_terms.push(ce_inbatch_graph(
                g,
                yhat,
                u,
                &positions[i],
                config.temperature,
            )?);
            continue;
        }
        let init = model.slot_init_for(&t.z, splitmix64(slot_seed ^ i as u64));
        let slots = model.slots_graph(g, store, &init)?;
        let yhat = model.forward_graph(g, store, x, x_mask, slots)?;
        if let Some(u) = universe {
            ce_terms.push(ce_inbatch_graph(
                g,
                yhat,
                u,
                &positions[i],
                config.temperature,
            )?);
        }
        let ytrue = g.constant(t.y.features().clone());
        if wiring.chamfer {
            ch_terms.push(chamfer_graph(g, yhat, ytrue)?);
        }
        if let Some(s) = scorer {
            let ex = s.encode_graph(g, x, x_mask)?;
            sm_terms.push(sm_reg_graph(g, s, ex, x_mask, ytrue, yhat)?);
        }
    }
    let ce = if ce_terms.is_empty() {
        None
    } else {
        Some(mean_of(g, &ce_terms)?)
    };
    let chamfer = if ch_terms.is_empty() {
        None
    } else {
        Some(mean_of(g, &ch_terms)?)
    };
    let sm = if sm_terms.is_empty() {
        None
    } else {
        Some(mean_of(g, &sm_terms)?)
    };
    let main = ce.or(chamfer).expect("every variant has a main loss");
    let total = match sm {
        Some(s) => {
            let w = g.scale(s, config.alpha)?;
            g.add(main, w)?
        }
        None => main,
    };
    Ok(LossNodes {
        ce,
        chamfer,
        sm,
        total,
    })
}

/// Loss components of the variant for a single triple; the cross-entropy
/// universe is that triple's own target set.
pub fn total_loss(
    triple: &SplitTriple,
    model: &CstModel,
    scorer: Option<&SetMatcher>,
    config: &LossConfig,
    slot_seed: u64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let nodes = batch_loss_graph(
        &mut g,
        model,
        model.params(),
        &[triple],
        scorer,
        config,
        slot_seed,
    )?;
    Ok(nodes.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[&[f64]]) -> FeatureSet {
        FeatureSet::from_rows(rows).unwrap()
    }

    #[test]
    fn chamfer_worked_example() {
        let x = set(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let y = set(&[&[0.0, 0.0]]);
        assert_eq!(chamfer(&x, &y).unwrap(), 1.0);
        assert_eq!(chamfer(&y, &x).unwrap(), 1.0);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        let e = FeatureSet::new(Tensor::zeros(0, 2));
        assert!(matches!(chamfer(&x, &e), Err(Error::EmptySet(_))));
    }

    #[test]
    fn ce_single_candidate_and_symmetric_logits() {
        let cfg = LossConfig::default();
        let y1 = set(&[&[1.0, 0.0]]);
        assert_eq!(ce_inbatch(&y1, &y1, &y1, &cfg).unwrap(), 0.0);
        let yhat = set(&[&[0.0, 1.0]]);
        let universe = set(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let l = ce_inbatch(&yhat, &y1, &universe, &cfg).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_missing_target_and_empty() {
        let cfg = LossConfig::default();
        let y = set(&[&[1.0, 0.0]]);
        let u = set(&[&[0.0, 1.0]]);
        assert!(matches!(
            ce_inbatch(&y, &y, &u, &cfg),
            Err(Error::NotInUniverse(0))
        ));
        let e = FeatureSet::new(Tensor::zeros(0, 2));
        assert!(matches!(
            ce_inbatch(&e, &e, &u, &cfg),
            Err(Error::EmptySet(_))
        ));
    }

    #[test]
    fn ce_moves_down_toward_target() {
        let cfg = LossConfig {
            temperature: 0.5,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = FeatureSet::new(Tensor::identity(4));
        let target = FeatureSet::new(Tensor::row_vector(u.row(2)));
        let start = Tensor::randn(1, 4, 0.0, 1.0, &mut rng).normalize_rows();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let mixed: Vec<f64> = start
                .row(0)
                .iter()
                .zip(u.row(2))
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect();
            let yhat = FeatureSet::new(Tensor::row_vector(&mixed).normalize_rows());
            let l = ce_inbatch(&yhat, &target, &u, &cfg).unwrap();
            assert!(l <= prev + 1e-12);
            prev = l;
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig {
            alpha: -1.0,
            temperature: 1.0
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha: 0.0,
            temperature: 0.0
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
