//! Named parameter store and bit-exact text checkpoints.
//!
//! Parameters are keyed by a dotted name path (`stack0.block1.cheb.gamma2`).
//! Checkpoints serialize every f64 as its hexadecimal bit pattern, so a
//! save/load round trip reproduces values exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

const CHECKPOINT_MAGIC: &str = "evoforecast-checkpoint v1";

/// Ordered map of parameter name to tensor value.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    /// Free-form metadata persisted with the checkpoint (model config,
    /// normalization stats), kept sorted for deterministic output.
    meta: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let prev = self.entries.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    /// True when both stores hold exactly the same names and shapes.
    pub fn aligned_with(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, av), (bn, bv))| an == bn && av.shape() == bv.shape())
    }

    /// Euclidean distance between two aligned stores.
    pub fn drift(&self, other: &ParamStore) -> f64 {
        debug_assert!(self.aligned_with(other));
        let mut sq = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let d = x - y;
                sq += d * d;
            }
        }
        sq.sqrt()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        for (key, value) in &self.meta {
            writeln!(out, "meta {key} {value}")?;
        }
        for (name, tensor) in &self.entries {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            write!(out, "param {name} {}", dims.join("x"))?;
            for v in tensor.data() {
                write!(out, " {:016x}", v.to_bits())?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| TensorError::Invalid(format!("checkpoint {}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| TensorError::Invalid(format!("checkpoint read: {e}")))?
            .unwrap_or_default();
        if header != CHECKPOINT_MAGIC {
            return Err(TensorError::Invalid(format!(
                "bad checkpoint header: {header:?}"
            )));
        }
        let mut store = Self::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| TensorError::Invalid(format!("checkpoint read: {e}")))?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            match fields.next() {
                Some("meta") => {
                    let key = fields
                        .next()
                        .ok_or_else(|| bad_line(lineno, "meta without key"))?;
                    let value: Vec<&str> = fields.collect();
                    store.set_meta(key, &value.join(" "));
                }
                Some("param") => {
                    let name = fields
                        .next()
                        .ok_or_else(|| bad_line(lineno, "param without name"))?;
                    let dims = fields
                        .next()
                        .ok_or_else(|| bad_line(lineno, "param without shape"))?;
                    let shape: Vec<usize> = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split('x')
                            .map(|d| d.parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad_line(lineno, "bad shape"))?
                    };
                    let data: Vec<f64> = fields
                        .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad_line(lineno, "bad value encoding"))?;
                    store.insert(name, Tensor::new(shape, data)?);
                }
                other => {
                    return Err(bad_line(lineno, &format!("unknown record {other:?}")));
                }
            }
        }
        Ok(store)
    }
}

fn bad_line(lineno: usize, what: &str) -> TensorError {
    TensorError::Invalid(format!("checkpoint line {}: {what}", lineno + 2))
}

/// First/second moment state for the Adam optimizer, aligned with a store.
#[derive(Clone, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments_mut(&mut self, name: &str, shape: &[usize]) -> &mut (Tensor, Tensor) {
        self.moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(shape), Tensor::zeros(shape)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert(
            "a.weight",
            Tensor::new(vec![2, 2], vec![0.1, -3.5e-300, f64::MIN_POSITIVE, 7.25]).unwrap(),
        );
        store.insert(
            "b.bias",
            Tensor::new(vec![3], vec![1.0, 0.0, -0.0]).unwrap(),
        );
        store.set_meta("horizon", "12");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();

        assert_eq!(loaded.meta("horizon"), Some("12"));
        assert!(store.aligned_with(&loaded));
        for (name, tensor) in store.iter() {
            let other = loaded.get(name).unwrap();
            for (x, y) in tensor.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn load_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn drift_is_zero_against_self() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        assert_eq!(store.drift(&store.clone()), 0.0);
    }
}
