//! Binary checkpoint and adapter files.
//!
//! Both formats share one layout, all integers little-endian:
//!
//! ```text
//! magic[8] version:u32
//! header_len:u32 header (UTF-8 key=value lines)
//! n_records:u32
//!   name_len:u32 name dtype:u8 ndim:u32 dims:u64*ndim values (f32 LE)
//! sha256[32] over every preceding byte
//! ```
//!
//! Values are stored in single precision. Files are canonical, so saving a
//! loaded file reproduces it byte for byte.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::model::{hex, AdapterSet, Group, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::styledata::PretrainMode;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSWPCKPT";
pub const ADAPTER_MAGIC: &[u8; 8] = b"SSWPADPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

struct Record<'a> {
    name: String,
    shape: Vec<usize>,
    values: Box<dyn Iterator<Item = f32> + 'a>,
}

fn record<'a, T: Scalar>(name: &str, t: &'a Tensor<T>) -> Record<'a> {
    Record {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        values: Box::new(t.data().iter().map(|v| v.to_f64_lossy() as f32)),
    }
}

fn encode(magic: &[u8; 8], header: &str, records: Vec<Record<'_>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for d in &r.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

struct Decoded {
    header: String,
    records: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Checks magic, version and checksum, in that order, before parsing any
/// record.
fn decode(magic: &[u8; 8], buf: &[u8]) -> Result<Decoded> {
    if buf.len() < 8 + 4 + 32 {
        return Err(Error::Format("file too short".into()));
    }
    if &buf[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut c = Cursor { buf: body, pos: 12 };
    let header_len = c.u32()? as usize;
    let header = c.str(header_len)?.to_string();
    let n = c.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name_len = c.u32()? as usize;
        let name = c.str(name_len)?.to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("record `{name}`: unknown dtype tag {dtype}")));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record `{name}`: shape overflows")))?;
        let raw = c.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::Format("record too large".into()))?,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push((name, shape, values));
    }
    if c.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(Decoded { header, records })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_tensor<T: Scalar>(name: &str, shape: Vec<usize>, values: Vec<f32>) -> Result<Tensor<T>> {
    Tensor::new(shape, values.into_iter().map(|v| T::of(v as f64)).collect())
        .map_err(|e| Error::Format(format!("record `{name}`: {e}")))
}

/// Serialized checkpoint of the base parameters (the adapter slot is not
/// stored).
pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let records = model.params().iter().map(|(n, _, t)| record(n, t)).collect();
    encode(CHECKPOINT_MAGIC, &model.config().to_kv(), records)
}

pub fn checkpoint_from_bytes<T: Scalar>(buf: &[u8]) -> Result<Model<T>> {
    let d = decode(CHECKPOINT_MAGIC, buf)?;
    let config = ModelConfig::from_kv(&d.header)?;
    let mut model = Model::build(config)?;
    let mut seen = std::collections::HashSet::new();
    for (name, shape, values) in d.records {
        let slot = model
            .params_mut()
            .get_mut(&name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
        if slot.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: file has {shape:?}, config implies {:?}",
                slot.shape()
            )));
        }
        *slot = to_tensor(&name, shape, values)?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    if let Some((missing, _, _)) = model.params().iter().find(|(n, _, _)| !seen.contains(*n)) {
        return Err(Error::Format(format!("checkpoint lacks parameter `{missing}`")));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write(path, &checkpoint_bytes(model))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    checkpoint_from_bytes(&read(path)?)
}

/// SHA-256 over the model config and the single-precision values of every
/// base parameter outside the encoder, i.e. the part of the network an
/// adapter's behavior depends on. Encoder-only fine-tuning keeps the
/// fingerprint, so adapters trained before it still load afterwards. A model
/// and its reloaded checkpoint share a fingerprint.
pub fn base_fingerprint<T: Scalar>(model: &Model<T>) -> String {
    let mut h = Sha256::new();
    for (name, group, t) in model.params().iter() {
        if group == Group::Encoder {
            continue;
        }
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update((v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    h.update(model.config().to_kv().as_bytes());
    hex(&h.finalize())
}

/// A trained adapter set plus the metadata needed to install it safely.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterFile<T> {
    pub mode: PretrainMode,
    /// [`base_fingerprint`] of the model the adapters were trained against.
    pub fingerprint: String,
    pub adapters: AdapterSet<T>,
}

pub fn adapter_bytes<T: Scalar>(adapters: &AdapterSet<T>, mode: PretrainMode, fingerprint: &str) -> Vec<u8> {
    let header = format!(
        "fingerprint={fingerprint}\nlayers={}\nmode={mode}\nstyle_id={}\n",
        adapters.layers.len(),
        adapters.style_id
    );
    let named = adapters.named();
    let records = named.iter().map(|(n, t)| record(n, *t)).collect();
    encode(ADAPTER_MAGIC, &header, records)
}

pub fn adapter_from_bytes<T: Scalar>(buf: &[u8]) -> Result<AdapterFile<T>> {
    let d = decode(ADAPTER_MAGIC, buf)?;
    let kv: HashMap<String, String> = parse_kv(&d.header)?.into_iter().map(|(k, v, _)| (k, v)).collect();
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("adapter header lacks `{k}`")))
    };
    let layers: usize = get("layers")?
        .parse()
        .map_err(|_| Error::Format("adapter header: bad layer count".into()))?;
    let mode: PretrainMode = get("mode")?
        .parse()
        .map_err(|e| Error::Format(format!("adapter header: {e}")))?;
    let mut named = HashMap::new();
    for (name, shape, values) in d.records {
        let t = to_tensor(&name, shape, values)?;
        if named.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate adapter record `{name}`")));
        }
    }
    Ok(AdapterFile {
        mode,
        fingerprint: get("fingerprint")?,
        adapters: AdapterSet::from_named(&get("style_id")?, layers, named)?,
    })
}

pub fn save_adapter<T: Scalar>(
    adapters: &AdapterSet<T>,
    mode: PretrainMode,
    fingerprint: &str,
    path: &Path,
) -> Result<()> {
    write(path, &adapter_bytes(adapters, mode, fingerprint))
}

pub fn read_adapter<T: Scalar>(path: &Path) -> Result<AdapterFile<T>> {
    adapter_from_bytes(&read(path)?)
}

/// Reads an adapter file and installs it on `model` after checking the base
/// fingerprint and shapes. Returns the file's metadata.
pub fn load_adapter<T: Scalar>(path: &Path, model: &mut Model<T>) -> Result<AdapterFile<T>> {
    let file = read_adapter::<T>(path)?;
    install(&file, model)?;
    Ok(file)
}

pub fn check_fingerprint<T: Scalar>(file: &AdapterFile<T>, model: &Model<T>) -> Result<()> {
    let found = base_fingerprint(model);
    if found != file.fingerprint {
        return Err(Error::Fingerprint {
            expected: file.fingerprint.clone(),
            found,
        });
    }
    Ok(())
}

/// Installs an already-read adapter file, enforcing the fingerprint contract.
pub fn install<T: Scalar>(file: &AdapterFile<T>, model: &mut Model<T>) -> Result<()> {
    check_fingerprint(file, model)?;
    model.swap_adapters(file.adapters.clone())?;
    Ok(())
}
