use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magic header of the parameter checkpoint container.
pub const CHECKPOINT_MAGIC: &[u8] = b"XPRO-CKPT-1";

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    group: usize,
}

/// Named learnable tensors, each tagged with an optimizer group.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: usize) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> usize {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: usize) -> Vec<ParamId> {
        self.ids().filter(|id| self.group(*id) == group).collect()
    }

    /// Mutable values of every parameter in `group`, in [`ParamStore::ids_in_group`] order.
    pub fn group_values_mut(&mut self, group: usize) -> Vec<&mut Tensor> {
        self.entries
            .iter_mut()
            .filter(|e| e.group == group)
            .map(|e| &mut e.value)
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every parameter on `tape` as a leaf; the result is indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }

    /// Copies values from `other` by name. Every parameter of `self` must be
    /// present in `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .by_name
                .get(&e.name)
                .map(|&i| &other.entries[i].value)
                .ok_or_else(|| TensorError::UnknownParam(e.name.clone()))?;
            if src.shape() != e.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_from",
                    lhs: e.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes `store` and an opaque metadata string.
///
/// Layout (little endian): magic, `u64` metadata length, metadata bytes,
/// `u64` parameter count, then per parameter: `u64` name length, name,
/// `u64` rank, `u64` dims, `f64` values.
pub fn save_checkpoint(path: &Path, store: &ParamStore, metadata: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u64(&mut w, metadata.len() as u64)?;
    w.write_all(metadata.as_bytes())?;
    write_u64(&mut w, store.entries.len() as u64)?;
    for e in &store.entries {
        write_u64(&mut w, e.name.len() as u64)?;
        w.write_all(e.name.as_bytes())?;
        write_u64(&mut w, e.value.rank() as u64)?;
        for &d in e.value.shape() {
            write_u64(&mut w, d as u64)?;
        }
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Group tags are not
/// persisted; loaded entries are all in group 0.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic header".into()));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = String::from_utf8(meta)
        .map_err(|_| TensorError::Checkpoint("metadata is not UTF-8".into()))?;
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        if store.by_name.contains_key(&name) {
            return Err(TensorError::Checkpoint(format!(
                "duplicate parameter {name}"
            )));
        }
        store.add(name, Tensor::new(shape, data)?, 0);
    }
    Ok((store, metadata))
}
