//! Attention blocks over sets.
//!
//! [`AttentionBlock`] is the multi-head attention block (MAB):
//!
//! ```text
//! H   = LN(Q + MultiHead(Q, K, K))
//! out = LN(H + FF(H))          FF = Linear -> ReLU -> Linear
//! ```
//!
//! Rows of `Q` are processed independently and the softmax runs over keys,
//! so the block is permutation-equivariant in its queries and invariant in
//! its keys. `SAB(X) = MAB(X, X)` and one slot-attention layer is
//! `MAB(slots, X)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::set::FeatureSet;
use crate::tensor::Tensor;

/// Affine map `x W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: format!("{prefix}.w"),
            bias: bias.then(|| format!("{prefix}.b")),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let std = (1.0 / self.in_dim as f64).sqrt();
        store.insert(
            &self.weight,
            Tensor::randn(self.in_dim, self.out_dim, 0.0, std, rng),
        )?;
        if let Some(b) = &self.bias {
            store.insert(b, Tensor::zeros(1, self.out_dim))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Row-wise layer normalisation with learnable gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    offset: String,
    dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: format!("{prefix}.gain"),
            offset: format!("{prefix}.offset"),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&self.gain, Tensor::filled(1, self.dim, 1.0))?;
        store.insert(&self.offset, Tensor::zeros(1, self.dim))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm_rows(x)?;
        let gain = g.param(store, &self.gain)?;
        let offset = g.param(store, &self.offset)?;
        let s = g.mul_row(n, gain)?;
        g.add_row(s, offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            dim: 32,
            heads: 4,
            ff_hidden: 32,
        }
    }
}

/// Multi-head attention block; see the module docs for the wiring.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    config: AttentionConfig,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl AttentionBlock {
    pub fn new(prefix: &str, config: AttentionConfig) -> Result<Self> {
        let AttentionConfig {
            dim,
            heads,
            ff_hidden,
        } = config;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionBlock {
            config,
            wq: Linear::new(&format!("{prefix}.q"), dim, dim, false),
            wk: Linear::new(&format!("{prefix}.k"), dim, dim, false),
            wv: Linear::new(&format!("{prefix}.v"), dim, dim, false),
            wo: Linear::new(&format!("{prefix}.o"), dim, dim, true),
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), dim),
            ff1: Linear::new(&format!("{prefix}.ff1"), dim, ff_hidden, true),
            ff2: Linear::new(&format!("{prefix}.ff2"), ff_hidden, dim, true),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), dim),
        })
    }

    pub fn config(&self) -> AttentionConfig {
        self.config
    }

    /// Names of the query/key/value/output projection weights, in that order.
    pub fn projection_names(&self) -> [&str; 4] {
        [
            self.wq.weight_name(),
            self.wk.weight_name(),
            self.wv.weight_name(),
            self.wo.weight_name(),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in [&self.wq, &self.wk, &self.wv, &self.wo, &self.ff1, &self.ff2] {
            l.init(store, rng)?;
        }
        self.ln1.init(store)?;
        self.ln2.init(store)
    }

    /// `MAB(queries, keys)` on graph nodes. Rows of `keys` with
    /// `key_mask[j] == false` get zero attention weight.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        keys: NodeId,
        key_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let dim = self.config.dim;
        for (what, id) in [("queries", queries), ("keys", keys)] {
            if g.value(id).cols() != dim {
                return Err(Error::shape(
                    "mab",
                    format!(
                        "{what} have dimension {}, block expects {dim}",
                        g.value(id).cols()
                    ),
                ));
            }
        }
        if g.value(queries).rows() == 0 {
            return Err(Error::EmptySet("mab queries"));
        }
        let valid_keys = match key_mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => g.value(keys).rows(),
        };
        if valid_keys == 0 {
            return Err(Error::EmptySet("mab keys"));
        }

        let q = self.wq.forward(g, store, queries)?;
        let k = self.wk.forward(g, store, keys)?;
        let v = self.wv.forward(g, store, keys)?;
        let heads = self.config.heads;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let logits = g.matmul_t(qh, kh)?;
            let logits = g.scale(logits, scale)?;
            let attn = g.softmax_rows(logits, key_mask)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let attended = self.wo.forward(g, store, cat)?;
        let res = g.add(queries, attended)?;
        let h = self.ln1.forward(g, store, res)?;
        let f = self.ff1.forward(g, store, h)?;
        let f = g.relu(f)?;
        let f = self.ff2.forward(g, store, f)?;
        let res2 = g.add(h, f)?;
        self.ln2.forward(g, store, res2)
    }

    /// `SAB(x) = MAB(x, x)`.
    pub fn sab(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        self.forward(g, store, x, x, mask)
    }
}

/// `MAB(queries, keyvalues)` on concrete sets.
pub fn mab(
    queries: &FeatureSet,
    keyvalues: &FeatureSet,
    block: &AttentionBlock,
    store: &ParamStore,
) -> Result<FeatureSet> {
    if queries.dim() != keyvalues.dim() {
        return Err(Error::shape(
            "mab",
            format!("query dim {} vs key dim {}", queries.dim(), keyvalues.dim()),
        ));
    }
    let mut g = Graph::new();
    let q = g.constant(queries.features().clone());
    let k = g.constant(keyvalues.features().clone());
    let out = block.forward(&mut g, store, q, k, keyvalues.mask_if_partial())?;
    let features = g.value(out).clone();
    queries.with_features(features)
}

/// `SAB(x) = MAB(x, x)` on a concrete set.
pub fn sab(x: &FeatureSet, block: &AttentionBlock, store: &ParamStore) -> Result<FeatureSet> {
    mab(x, x, block, store)
}

/// One slot-attention layer: slots attend to the input set.
pub fn slot_attention_layer(
    slots: &FeatureSet,
    x: &FeatureSet,
    block: &AttentionBlock,
    store: &ParamStore,
) -> Result<FeatureSet> {
    mab(slots, x, block, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = AttentionConfig {
            dim: 6,
            heads: 4,
            ff_hidden: 6,
        };
        assert!(AttentionBlock::new("b", cfg).is_err());
    }

    #[test]
    fn empty_keys_and_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttentionConfig {
            dim: 4,
            heads: 2,
            ff_hidden: 4,
        };
        let block = AttentionBlock::new("b", cfg).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng).unwrap();
        let q = FeatureSet::new(Tensor::randn(2, 4, 0.0, 1.0, &mut rng));
        let mut kv = FeatureSet::new(Tensor::zeros(0, 4));
        assert!(matches!(
            mab(&q, &kv, &block, &store),
            Err(Error::EmptySet(_))
        ));
        kv.push_masked_row(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            mab(&q, &kv, &block, &store),
            Err(Error::EmptySet(_))
        ));
        let wrong = FeatureSet::new(Tensor::randn(2, 3, 0.0, 1.0, &mut rng));
        assert!(matches!(
            mab(&q, &wrong, &block, &store),
            Err(Error::Shape { .. })
        ));
    }
}
