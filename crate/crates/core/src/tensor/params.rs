use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TGRFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named learnable tensors with gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    lookup: HashMap<String, ParamId>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    /// Glorot-normal weight of shape `out × inp`.
    pub fn insert_weight(
        &mut self,
        name: impl Into<String>,
        out: usize,
        inp: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / (out + inp) as f64).sqrt();
        self.insert_normal(name, &[out, inp], std, rng)
    }

    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("consistent shape"))
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(TensorError::Dim {
                op: "ParamSet::set",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        self.set(id, value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.values[id.0].data_mut()
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Registers every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.variable(v.clone())).collect(),
        }
    }

    /// Adds the gradients reached during `grads`' backward pass into the
    /// parameter buffers. Calling it repeatedly accumulates.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (buf, var) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*var) {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
        }
    }

    /// Writes the versioned binary checkpoint.
    ///
    /// Layout (all integers little-endian): magic, `u32` version, `u32`
    /// entry count, then per entry `u32` name length, UTF-8 name, `u32`
    /// rank, `u64` per dimension, and the `f64` payload.
    pub fn write_checkpoint(&self, mut out: impl Write) -> io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(value.rank() as u32).to_le_bytes())?;
            for &d in value.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut input: impl Read) -> io::Result<Self> {
        let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut input)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let rank = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            if set.lookup.contains_key(&name) {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            set.insert(name, t);
        }
        Ok(set)
    }

    /// Replaces values with those of `other`, requiring identical names and
    /// shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), TensorError> {
        if self.names != other.names {
            return Err(TensorError::Contract(
                "checkpoint parameter names do not match the model".into(),
            ));
        }
        for (id, v) in other.values.iter().enumerate() {
            self.set(ParamId(id), v.clone())?;
        }
        Ok(())
    }
}

fn read_u32(input: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters registered on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Substitutes the tape variable standing in for `id`.
    pub fn replace(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }
}

impl<'t> std::ops::Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.insert_weight("a.weight", 3, 4, &mut rng);
        p.insert("b.tiny", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        p.insert("c.scalar", Tensor::scalar(std::f64::consts::PI));
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ParamSet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p.len(), q.len());
        for id in p.ids() {
            assert_eq!(p.name(id), q.name(id));
            assert_eq!(p.get(id).shape(), q.get(id).shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(p.get(id)), bits(q.get(id)));
        }
        let mut again = Vec::new();
        q.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_rejects_bad_header() {
        let err = ParamSet::read_checkpoint(&b"NOTACKPT\x01\x00\x00\x00"[..]).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
        let mut buf = Vec::new();
        ParamSet::new().write_checkpoint(&mut buf).unwrap();
        buf[8] = 9;
        assert!(ParamSet::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn accumulate_adds_across_calls() {
        let mut p = ParamSet::new();
        let x = p.insert("x", Tensor::scalar(3.0));
        for expected in [6.0, 12.0] {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let loss = b[x].square().unwrap();
            let g = tape.backward(loss).unwrap();
            p.accumulate(&b, &g);
            assert_eq!(p.grad(x), &[expected]);
        }
        p.zero_grad();
        assert_eq!(p.grad(x), &[0.0]);
    }
}
