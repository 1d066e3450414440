//! Named, grouped trainable parameters and their on-disk store.
//!
//! Store layout (all integers little-endian):
//!
//! ```text
//! magic    b"NRTRPRM"          7 bytes
//! version  u8                  currently 1
//! tag      [u8; 32]            caller-defined (checkpoints store a config hash)
//! count    u32
//! count × record:
//!   name_len u32, name utf-8 bytes
//!   group    u8                0 = backbone, 1 = transformer
//!   rank     u32, dims u64 × rank
//!   values   f32 × product(dims)
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub const STORE_MAGIC: &[u8; 7] = b"NRTRPRM";
pub const STORE_VERSION: u8 = 1;

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Transformer,
}

impl Group {
    fn code(self) -> u8 {
        match self {
            Group::Backbone => 0,
            Group::Transformer => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Group::Backbone),
            1 => Ok(Group::Transformer),
            other => Err(TensorError::Format(format!("unknown group code {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            group,
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        self.params[id.0].grad.add_assign(grad.data());
    }

    /// Writes every parameter value, in insertion order.
    pub fn write_to<W: Write>(&self, mut w: W, tag: &[u8; 32]) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&[STORE_VERSION])?;
        w.write_all(tag)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            write_record(&mut w, &p.name, p.group, p.value.shape(), p.value.data())?;
        }
        Ok(())
    }

    /// Reads a store written by [`ParamStore::write_to`] into a store with
    /// the same layout, overwriting values and returning the tag.
    ///
    /// Names, groups and shapes must match exactly and in order.
    pub fn read_from<R: Read>(&mut self, r: R) -> Result<[u8; 32]> {
        let (tag, records) = read_records(r)?;
        self.load_records(&records)?;
        Ok(tag)
    }
}

/// One `(identifier, group, shape, values)` entry of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn write_record<W: Write, T: Element>(w: &mut W, name: &str, group: Group, shape: &[usize], data: &[T]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[group.code()])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes an arbitrary list of records (used for optimizer state).
pub fn write_records<W: Write>(mut w: W, tag: &[u8; 32], records: &[Record]) -> Result<()> {
    w.write_all(STORE_MAGIC)?;
    w.write_all(&[STORE_VERSION])?;
    w.write_all(tag)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        write_record(&mut w, &r.name, r.group, &r.shape, &r.values)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format("truncated file".into())
    } else {
        TensorError::Io(e)
    }
}

pub fn read_records<R: Read>(mut r: R) -> Result<([u8; 32], Vec<Record>)> {
    let magic: [u8; 7] = read_exact(&mut r)?;
    if &magic != STORE_MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let [version] = read_exact::<_, 1>(&mut r)?;
    if version != STORE_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let tag: [u8; 32] = read_exact(&mut r)?;
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Format("non-utf8 name".into()))?;
        let [group] = read_exact::<_, 1>(&mut r)?;
        let group = Group::from_code(group)?;
        let rank = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n = numel(&shape);
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record {
            name,
            group,
            shape,
            values,
        });
    }
    Ok((tag, records))
}

impl<T: Element> ParamStore<T> {
    /// Overwrites values from records produced by [`read_records`].
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(TensorError::Format(format!(
                "store holds {} parameters, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for (p, rec) in self.params.iter().zip(records) {
            if p.name != rec.name || p.group != rec.group || p.value.shape() != rec.shape.as_slice() {
                return Err(TensorError::Format(format!(
                    "record `{}` {:?} does not match parameter `{}` {:?}",
                    rec.name,
                    rec.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, rec) in self.params.iter_mut().zip(records) {
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&rec.values) {
                *dst = T::from_f64(src as f64);
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.params
            .iter()
            .map(|p| Record {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }
}
