//! Binary checkpoints.
//!
//! ```text
//! "CLAB" | version u32 | entry count u32
//! per entry: name len u32 | name | rank u32 | dims u32… | f32 data
//! then zero or more tagged sections:
//!   "ADPT" name | A tensor | B tensor
//!   "QMAT" name | byte len u32 | quantized matrix bytes
//!   "META" key | value
//! ```
//!
//! All integers and floats are little-endian. Tensors inside sections use the
//! same `rank | dims | data` layout as entries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Arch, ModelSpec, ToyModel};
use crate::quant::{ByteReader, QuantizedMatrix};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLAB";
pub const VERSION: u32 = 1;

const TAG_ADAPTER: &[u8; 4] = b"ADPT";
const TAG_QUANT: &[u8; 4] = b"QMAT";
const TAG_META: &[u8; 4] = b"META";

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub name: String,
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub adapters: Vec<AdapterEntry>,
    pub quantized: Vec<(String, QuantizedMatrix)>,
    pub meta: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_str(r: &mut ByteReader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("name is not valid UTF-8".into()))
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

impl Checkpoint {
    /// Parameters of `model`, plus its spec as metadata.
    pub fn from_model(model: &ToyModel) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("arch".to_string(), model.spec.arch.name().to_string());
        meta.insert("input_dim".to_string(), model.spec.input_dim.to_string());
        meta.insert("classes".to_string(), model.spec.classes.to_string());
        Checkpoint {
            params: model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            meta,
            ..Checkpoint::default()
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let get = |k: &str| self.meta.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
        let arch: Arch = get("arch")?.parse()?;
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}` in checkpoint")))
        };
        Ok(ModelSpec { arch, input_dim: num("input_dim")?, classes: num("classes")? })
    }

    pub fn to_model(&self) -> Result<ToyModel> {
        ToyModel::from_named_params(self.spec()?, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_tensor(&mut out, t);
        }
        for a in &self.adapters {
            out.extend_from_slice(TAG_ADAPTER);
            put_str(&mut out, &a.name);
            put_tensor(&mut out, &a.a);
            put_tensor(&mut out, &a.b);
        }
        for (name, q) in &self.quantized {
            out.extend_from_slice(TAG_QUANT);
            put_str(&mut out, name);
            let bytes = q.to_bytes();
            put_u32(&mut out, bytes.len());
            out.extend(bytes);
        }
        for (k, v) in &self.meta {
            out.extend_from_slice(TAG_META);
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            ck.params.push((name, read_tensor(&mut r)?));
        }
        while !r.is_done() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            match &tag {
                TAG_ADAPTER => {
                    let name = read_str(&mut r)?;
                    let a = read_tensor(&mut r)?;
                    let b = read_tensor(&mut r)?;
                    ck.adapters.push(AdapterEntry { name, a, b });
                }
                TAG_QUANT => {
                    let name = read_str(&mut r)?;
                    let len = r.u32()? as usize;
                    let (q, used) = QuantizedMatrix::from_bytes(r.take(len)?)?;
                    if used != len {
                        return Err(Error::Format(format!("quantized matrix {name}: trailing bytes")));
                    }
                    ck.quantized.push((name, q));
                }
                TAG_META => {
                    let k = read_str(&mut r)?;
                    let v = read_str(&mut r)?;
                    ck.meta.insert(k, v);
                }
                other => return Err(Error::Format(format!("unknown section tag {:?}", String::from_utf8_lossy(other)))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Size in bytes of the serialized checkpoint.
    pub fn byte_len(&self) -> usize {
        self.to_bytes().len()
    }
}
