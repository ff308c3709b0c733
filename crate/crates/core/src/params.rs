//! Named learnable tensors with deterministic ordering and a versioned
//! binary checkpoint format.
//!
//! Checkpoint layout: magic `RTHNCKPT`, format version, a JSON header blob
//! (caller-supplied, typically config + vocabulary), then each parameter as
//! `name, shape, row-major f64 little-endian data` in insertion order.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use crate::tensor::{Result as TensorResult, Tape, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"RTHNCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// Leading rows excluded from updates (the frozen `<pad>` row).
    pub frozen_rows: usize,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which keeps initialization, updates, and serialization stable.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: Vec<usize>) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter {name}: data/shape mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            data,
            shape,
            frozen_rows: 0,
        });
    }

    /// Uniform[-scale, scale] initialization from the store's RNG stream.
    pub fn insert_uniform(&mut self, name: &str, shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        self.insert(name, data, shape);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, vec![0.0; n], shape);
    }

    pub fn insert_full(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape);
    }

    pub fn set_frozen_rows(&mut self, name: &str, rows: usize) {
        let ix = self.index[name];
        self.params[ix].frozen_rows = rows;
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let ix = self.index[name];
        &mut self.params[ix]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copy values for every name that exists in both stores.
    pub fn copy_shared_from(&mut self, other: &ParameterStore) {
        for p in self.params.iter_mut() {
            if let Some(&ix) = other.index.get(&p.name) {
                let src = &other.params[ix];
                assert_eq!(p.shape, src.shape, "shape mismatch copying {}", p.name);
                p.data.clone_from(&src.data);
            }
        }
    }

    /// Serialize with a caller-supplied JSON header.
    pub fn save<W: Write>(&self, header_json: &str, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let hb = header_json.as_bytes();
        w.write_all(&(hb.len() as u64).to_le_bytes())?;
        w.write_all(hb)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let nb = p.name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(p.frozen_rows as u64).to_le_bytes())?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> std::result::Result<(String, Self), CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let hlen = read_u64(r)? as usize;
        let mut hb = vec![0u8; hlen];
        r.read_exact(&mut hb)?;
        let header = String::from_utf8(hb)
            .map_err(|e| CheckpointError::Corrupt(format!("header not utf-8: {e}")))?;
        let n_params = read_u64(r)? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..n_params {
            let nlen = read_u64(r)? as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|e| CheckpointError::Corrupt(format!("name not utf-8: {e}")))?;
            let frozen_rows = read_u64(r)? as usize;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, data, shape);
            store.set_frozen_rows(&name, frozen_rows);
        }
        Ok((header, store))
    }

    pub fn to_bytes(&self, header_json: &str) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(header_json, &mut out).expect("writing to Vec cannot fail");
        out
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Name-to-tensor lookup used by the encoders. [`BoundParams`] is the
/// production implementation; tests bind ad-hoc leaves directly.
pub trait Bind {
    fn id(&self, name: &str) -> TensorId;
}

/// Parameters bound onto a tape as gradient-tracked leaves.
pub struct BoundParams {
    ids: Vec<(String, TensorId)>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(store: &ParameterStore, tape: &mut Tape) -> TensorResult<Self> {
        let mut ids = Vec::with_capacity(store.len());
        let mut index = HashMap::new();
        for p in store.iter() {
            let id = tape.leaf(p.data.clone(), p.shape.clone(), true)?;
            index.insert(p.name.clone(), ids.len());
            ids.push((p.name.clone(), id));
        }
        Ok(Self { ids, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

impl Bind for BoundParams {
    fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))]
        .1
    }
}

/// Plain list binding for tests and gradient checks.
pub struct SliceBind<'a> {
    pub ids: &'a [(&'a str, TensorId)],
}

impl Bind for SliceBind<'_> {
    fn id(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| *n == name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
            .1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        store.insert_uniform("w", vec![3, 4], 0.1, &mut rng);
        store.insert("b", vec![1.0, -2.5, f64::MIN_POSITIVE], vec![3]);
        store.set_frozen_rows("w", 1);

        let bytes = store.to_bytes("{\"k\":1}");
        let (header, loaded) = ParameterStore::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(header, "{\"k\":1}");
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("w").data, store.get("w").data);
        assert_eq!(loaded.get("w").frozen_rows, 1);
        assert_eq!(loaded.get("b").data, store.get("b").data);
        // byte-for-byte stable re-serialization
        assert_eq!(loaded.to_bytes("{\"k\":1}"), bytes);
    }

    #[test]
    fn load_rejects_garbage() {
        let err = ParameterStore::load(&mut &b"NOTACKPT"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic | CheckpointError::Io(_)));
    }

    #[test]
    fn bound_params_expose_stable_ids() {
        let mut store = ParameterStore::new();
        store.insert("a", vec![1.0], vec![1]);
        store.insert("b", vec![2.0], vec![1]);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&store, &mut tape).unwrap();
        assert_eq!(tape.data(bound.id("a")), &[1.0]);
        assert_eq!(tape.data(bound.id("b")), &[2.0]);
        let names: Vec<&str> = bound.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
