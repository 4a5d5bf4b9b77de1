//! Named parameter storage, SGD with momentum, and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SETCKPT\0"
//! version  u32      1
//! header   u64 length + UTF-8 bytes (free-form, usually JSON)
//! count    u64
//! repeated count times:
//!   name   u64 length + UTF-8 bytes
//!   rows   u64
//!   cols   u64
//!   values rows*cols f64 (IEEE-754 bits, little-endian)
//! ```
//!
//! Parameters are written in name order, so equal stores produce equal bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SETCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    // `None` once frozen: frozen stores never own gradient slots.
    grads: Option<BTreeMap<String, Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            grads: Some(BTreeMap::new()),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        if let Some(grads) = &mut self.grads {
            grads.insert(name.clone(), Tensor::zeros(value.rows(), value.cols()));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Drops gradient slots; graphs built afterwards treat every parameter
    /// as a constant.
    pub fn freeze(&mut self) {
        self.grads = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.grads.is_none()
    }

    pub fn grad_slot(&self, name: &str) -> Option<&Tensor> {
        self.grads.as_ref()?.get(name)
    }

    pub fn has_grad_slots(&self) -> bool {
        self.grads.as_ref().is_some_and(|g| !g.is_empty())
    }

    /// Adds `grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        let Some(slots) = &mut self.grads else {
            return Err(Error::InvalidArgument(
                "cannot accumulate gradients into a frozen store".into(),
            ));
        };
        for (name, g) in grads.iter() {
            let slot = slots
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if slot.shape() != g.shape() {
                return Err(Error::shape("accumulate", name.to_string()));
            }
            slot.add_assign(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        if let Some(slots) = &mut self.grads {
            for g in slots.values_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// SHA-256 over the checkpoint encoding (empty header), hex encoded.
    pub fn fingerprint(&self) -> String {
        let bytes = self.to_bytes("");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self, header: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a checkpoint; the returned store is trainable.
    pub fn from_bytes(bytes: &[u8]) -> Result<(String, ParamStore)> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header = read_str(&mut r)?;
        let count = read_u64(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.saturating_mul(8) <= r.len())
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor `{name}`")))?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(name, Tensor::from_vec(rows, cols, data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok((header, store))
    }

    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        let bytes = self.to_bytes(header);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(String, ParamStore)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("string length past end".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
}

/// dLoss/dParam for every parameter of a store, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert(&mut self, name: String, g: Tensor) {
        self.grads.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in other.iter() {
            match self.grads.get_mut(name) {
                Some(mine) if mine.shape() == g.shape() => mine.add_assign(g),
                Some(_) => return Err(Error::shape("gradients.add", name.to_string())),
                None => {
                    self.grads.insert(name.to_string(), g.clone());
                }
            }
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + grad`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Sgd {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("`{name}`: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> (ParamStore, Gradients) {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        let mut g = Gradients::new();
        g.insert(name.to_string(), Tensor::scalar(1.0));
        (p, g)
    }

    #[test]
    fn sgd_single_step() {
        let (mut p, g) = single("w", 1.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let (mut p, _) = single("w", 0.25);
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::scalar(0.0));
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        for _ in 0..3 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.25);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let (mut p, g) = single("w", 0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().item() + 0.1).abs() < 1e-15);
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_bad_hyperparameters_and_shapes() {
        assert!(Sgd::new(0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
        let (mut p, _) = single("w", 0.0);
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::zeros(2, 1));
        assert!(Sgd::new(0.1, 0.0).unwrap().step(&mut p, &g).is_err());
    }

    #[test]
    fn frozen_store_has_no_slots() {
        let (mut p, g) = single("w", 0.0);
        assert!(p.grad_slot("w").is_some());
        p.freeze();
        assert!(p.grad_slot("w").is_none());
        assert!(p.accumulate(&g).is_err());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ParamStore::from_bytes(b"nope").is_err());
        let (p, _) = single("w", 1.5);
        let mut bytes = p.to_bytes("h");
        bytes.push(0);
        assert!(ParamStore::from_bytes(&bytes).is_err());
    }
}
