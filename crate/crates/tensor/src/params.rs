//! Named parameter storage, initialization and the NMW1 weight format.
//!
//! NMW1 layout: the magic bytes `NMW1`, a little-endian `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u32` extents and the values as little-endian `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NMW1";

/// Insertion-ordered map from parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f64> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.contains(name) {
            return Err(TensorError::Parameter(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    /// Replaces an existing entry or appends a new one.
    pub fn set(&mut self, name: &str, value: Tensor<T>) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = value,
            None => self.insert(name, value).expect("absent name"),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| TensorError::Parameter(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(TensorError::Parameter(format!("missing parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::one()))
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone()).expect("names unique");
        }
        out
    }

    /// Copies every entry of `other` into `self`, overwriting equal names.
    pub fn merge(&mut self, other: &Self) {
        for (n, t) in other.iter() {
            self.set(n, t.clone());
        }
    }

    /// Overwrites values of entries also present in `other`, checking shapes.
    /// Returns the number of entries loaded.
    pub fn load_matching(&mut self, other: &Self) -> Result<usize> {
        let mut count = 0;
        for (n, t) in other.iter() {
            if let Ok(dst) = self.get_mut(n) {
                if dst.shape() != t.shape() {
                    return Err(TensorError::Format(format!(
                        "{n}: file has shape {:?}, model expects {:?}",
                        t.shape(),
                        dst.shape()
                    )));
                }
                *dst = t.clone();
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&u32_of(self.len())?.to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&u32_of(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_of(t.rank())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&u32_of(d)?.to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(TensorError::Format(format!("bad magic {magic:?}")));
        }
        let count = read_u32(r)?;
        let mut out = Self::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|e| TensorError::Format(format!("name is not UTF-8: {e}")))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(truncated)?;
                data.push(T::lit(f64::from_le_bytes(buf)));
            }
            let t = Tensor::new(&shape, data).map_err(|e| TensorError::Format(format!("{name}: {e}")))?;
            out.insert(&name, t).map_err(|e| TensorError::Format(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| TensorError::Format(format!("{n} does not fit in u32")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format("truncated file".into())
    } else {
        TensorError::Io(e)
    }
}

/// Lazily places store entries on a graph, once per name.
///
/// With `trainable` set the leaves are parameters and [`Binder::grads`]
/// collects their gradients after a backward pass; otherwise they are
/// constants and no gradient work is done.
pub struct Binder<'a, T = f64> {
    store: &'a ParamStore<T>,
    vars: HashMap<String, Var>,
    order: Vec<String>,
    trainable: bool,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self { store, vars: HashMap::new(), order: Vec::new(), trainable }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Gradients of every bound parameter, in binding order.
    pub fn grads(&self, g: &Graph<T>) -> Vec<(String, Tensor<T>)> {
        self.order
            .iter()
            .filter_map(|n| {
                let v = self.vars[n];
                g.grad(v).map(|t| (n.clone(), t))
            })
            .collect()
    }
}
