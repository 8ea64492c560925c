//! Flat weight checkpoints.
//!
//! Layout (little-endian): magic `PSTRM`, version `u16`, then one record per
//! tensor until end of file: name length `u16`, UTF-8 name, rank `u8`, `rank`
//! dims as `u32`, and the `f32` payload in row-major order. The architecture
//! is recovered from the tensor names and shapes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::engine::Model;
use crate::error::{Error, Result};
use crate::io::FormatError;
use crate::param::Parameters;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PSTRM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_records<W: Write>(records: &[TensorRecord], mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize || r.shape.len() > u8::MAX as usize {
            return Err(FormatError::InvalidRecord(format!("tensor {} cannot be encoded", r.name)).into());
        }
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(FormatError::Dims(format!("tensor {} payload does not match {:?}", r.name, r.shape)).into());
        }
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u8(r.shape.len() as u8)?;
        for &d in &r.shape {
            let d = u32::try_from(d).map_err(|_| FormatError::Dims(format!("dim {d} exceeds u32")))?;
            w.write_u32::<LittleEndian>(d)?;
        }
        for &v in &r.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            FormatError::Truncated(what.to_string()).into()
        } else {
            e.into()
        }
    }
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<TensorRecord>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(truncated("checkpoint magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "PSTRM",
            found: magic.to_vec(),
        }
        .into());
    }
    let version = r.read_u16::<LittleEndian>().map_err(truncated("checkpoint version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let mut records = Vec::new();
    loop {
        let mut first = [0u8; 1];
        let n = loop {
            match r.read(&mut first) {
                Ok(n) => break n,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        };
        if n == 0 {
            break;
        }
        let second = r.read_u8().map_err(truncated("tensor name length"))?;
        let len = u16::from_le_bytes([first[0], second]) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated("tensor name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| FormatError::InvalidRecord("tensor name is not UTF-8".into()))?;
        let rank = r.read_u8().map_err(truncated("tensor rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(truncated("tensor dims"))? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Dims(format!("tensor {name} shape {shape:?} overflows")))?;
        let mut data = Vec::new();
        for _ in 0..count {
            data.push(r.read_f32::<LittleEndian>().map_err(truncated(&name))?);
        }
        records.push(TensorRecord { name, shape, data });
    }
    Ok(records)
}

/// Snapshot of every parameter tensor, narrowed to `f32`.
pub fn model_records(model: &Model) -> Vec<TensorRecord> {
    model
        .params()
        .into_iter()
        .map(|(name, p)| TensorRecord {
            name,
            shape: p.shape().to_vec(),
            data: p.value.data().iter().map(|&v| v as f32).collect(),
        })
        .collect()
}

fn shape_of<'a>(map: &'a BTreeMap<String, TensorRecord>, name: &str) -> Result<&'a [usize]> {
    map.get(name)
        .map(|r| r.shape.as_slice())
        .ok_or_else(|| FormatError::InvalidRecord(format!("checkpoint is missing tensor {name}")).into())
}

/// Rebuilds a model from checkpoint records.
pub fn model_from_records(records: Vec<TensorRecord>) -> Result<Model> {
    let mut map = BTreeMap::new();
    for r in records {
        let name = r.name.clone();
        if map.insert(name.clone(), r).is_some() {
            return Err(FormatError::InvalidRecord(format!("duplicate tensor {name}")).into());
        }
    }
    let dims_err = |msg: String| -> Error { FormatError::Dims(msg).into() };
    let (attn_dim, feature_dim) = match shape_of(&map, "attention.feature_proj")? {
        [a, d] => (*a, *d),
        s => return Err(dims_err(format!("attention.feature_proj has shape {s:?}"))),
    };
    let hidden_dim = match shape_of(&map, "attention.hidden_proj")? {
        [_, h] => *h,
        s => return Err(dims_err(format!("attention.hidden_proj has shape {s:?}"))),
    };
    let layers = (0..).take_while(|l| map.contains_key(&format!("stack.layer{l}.weight"))).count();
    let config = RunConfig {
        layers,
        hidden_dim,
        attention_dim: attn_dim,
        ..RunConfig::default()
    };
    let mut model = Model::zeros(feature_dim, &config)
        .map_err(|e| dims_err(format!("checkpoint describes an invalid architecture: {e}")))?;

    for (name, p) in model.params_mut() {
        let r = map
            .remove(&name)
            .ok_or_else(|| FormatError::InvalidRecord(format!("checkpoint is missing tensor {name}")))?;
        if r.shape != p.shape() {
            return Err(dims_err(format!(
                "tensor {name}: expected shape {:?}, found {:?}",
                p.shape(),
                r.shape
            )));
        }
        for (v, &s) in p.value.data_mut().iter_mut().zip(&r.data) {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
            }
            *v = s as f64;
        }
    }
    if let Some(extra) = map.keys().next() {
        return Err(FormatError::InvalidRecord(format!("unexpected tensor {extra}")).into());
    }
    Ok(model)
}

pub fn write_checkpoint<W: Write>(model: &Model, w: W) -> Result<()> {
    write_records(&model_records(model), w)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
    model_from_records(read_records(r)?)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
