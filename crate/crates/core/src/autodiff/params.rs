use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::AutodiffError;

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Optimisation groups. Each group is stepped by its own optimizer and can
/// be frozen independently inside a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Discriminator,
}

/// Prefix that puts a parameter in [`ParamGroup::Discriminator`].
pub const DISCRIMINATOR_PREFIX: &str = "discriminator.";

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with(DISCRIMINATOR_PREFIX) {
            ParamGroup::Discriminator
        } else {
            ParamGroup::Encoder
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
}

/// Named parameter tensors. Insertion order is stable and is the order
/// used by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

const MAGIC: &[u8; 8] = b"FAIRREC1";

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of(&self.entries[id.0].name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Bit-level equality of every value.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a
                        .tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Serialise in the `FAIRREC1` checkpoint layout: magic, parameter
    /// count, then for each parameter its name length, UTF-8 name, rank,
    /// dims and values. All integers are little-endian `u64`, all values
    /// little-endian IEEE-754 `f64`.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u64).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.tensor.rank() as u64).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_values() * 8);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, AutodiffError> {
        let bad = |msg: &str| AutodiffError::Checkpoint(msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u64_buf = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64, AutodiffError> {
            r.read_exact(&mut u64_buf).map_err(|_| bad("truncated record"))?;
            Ok(u64::from_le_bytes(u64_buf))
        };
        let count = read_u64(&mut r)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            if name_len > 1 << 16 {
                return Err(bad("name too long"));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let rank = read_u64(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(bad("unsupported rank"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|_| bad("truncated values"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.id(&name).is_some() {
                return Err(bad("duplicate parameter name"));
            }
            store.insert(&name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let bytes = fs::read(path).map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(bytes.as_slice())
    }

    /// Overwrite values from `other`, which must contain the same names and
    /// shapes.
    pub fn assign_from(&mut self, other: &ParameterStore) -> Result<(), AutodiffError> {
        if other.len() != self.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .by_name(&e.name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter {}", e.name)))?;
            if src.shape() != e.tensor.shape() {
                return Err(AutodiffError::Shape {
                    op: "assign_from",
                    shapes: vec![e.tensor.shape().to_vec(), src.shape().to_vec()],
                });
            }
            e.tensor = src.clone();
        }
        Ok(())
    }
}
