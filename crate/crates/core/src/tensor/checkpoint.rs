//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "PHSEPCKP"
//! version      u32      1
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON (epoch, best validation loss, config, ...)
//! n_params     u32
//! n_params x param:
//!     name     u32 length + UTF-8 bytes
//!     group    u8   (0 backbone, 1 control, 2 basis)
//!     trainable u8
//!     tensor   (see below)
//! has_opt      u8
//! if has_opt == 1:
//!     step     u64
//!     lr, beta1, beta2, eps   f64 each
//!     n_slots  u32
//!     n_slots x slot: name (u32 length + bytes), first-moment tensor, second-moment tensor
//!
//! tensor:
//!     dtype    u8   (0 f32, 1 f64)
//!     ndim     u32
//!     dims     ndim x u64
//!     values   product(dims) raw little-endian elements
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use super::{numel, DType, OptimizerState, ParamGroup, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PHSEPCKP";
pub const VERSION: u32 = 1;

/// In-memory view of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub metadata: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("parameter name is not UTF-8"))
}

fn write_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.code());
    out.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
    for &d in t.shape() {
        out.write_u64::<LittleEndian>(d as u64).unwrap();
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<T: Real>(r: &mut Cursor<&[u8]>) -> Result<Tensor<T>> {
    let dtype = DType::from_code(r.read_u8()?).ok_or_else(|| bad("unknown dtype code"))?;
    if dtype != T::DTYPE {
        return Err(bad(format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let shape = (0..ndim)
        .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let width = std::mem::size_of::<T>();
    let n = numel(&shape);
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn encode<T: Real>(
    params: &ParamStore<T>,
    optimizer: Option<&OptimizerState<T>>,
    metadata: &serde_json::Value,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    let meta = serde_json::to_vec(metadata).expect("json value serializes");
    out.write_u64::<LittleEndian>(meta.len() as u64).unwrap();
    out.extend_from_slice(&meta);
    out.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for (name, p) in params.iter() {
        write_str(&mut out, name);
        out.push(p.group.code());
        out.push(p.trainable as u8);
        write_tensor(&mut out, &p.value);
    }
    match optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.write_u64::<LittleEndian>(st.step).unwrap();
            for v in [st.lr, st.beta1, st.beta2, st.eps] {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
            out.write_u32::<LittleEndian>(st.first.len() as u32).unwrap();
            for (name, m) in &st.first {
                write_str(&mut out, name);
                write_tensor(&mut out, m);
                write_tensor(&mut out, &st.second[name]);
            }
        }
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta = vec![0; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = serde_json::from_slice(&meta)?;
    let n = r.read_u32::<LittleEndian>()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let group = ParamGroup::from_code(r.read_u8()?).ok_or_else(|| bad("unknown group code"))?;
        let trainable = r.read_u8()? != 0;
        let t = read_tensor(&mut r)?;
        params.insert(name, t, trainable, group);
    }
    let optimizer = match r.read_u8()? {
        0 => None,
        1 => {
            let step = r.read_u64::<LittleEndian>()?;
            let mut f = [0.0; 4];
            for v in &mut f {
                *v = r.read_f64::<LittleEndian>()?;
            }
            let slots = r.read_u32::<LittleEndian>()?;
            let mut first = IndexMap::new();
            let mut second = IndexMap::new();
            for _ in 0..slots {
                let name = read_str(&mut r)?;
                first.insert(name.clone(), read_tensor(&mut r)?);
                second.insert(name, read_tensor(&mut r)?);
            }
            Some(OptimizerState {
                step,
                lr: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
                first,
                second,
            })
        }
        _ => return Err(bad("bad optimizer flag")),
    };
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        metadata,
    })
}

pub fn save<T: Real>(
    path: &Path,
    params: &ParamStore<T>,
    optimizer: Option<&OptimizerState<T>>,
    metadata: &serde_json::Value,
) -> Result<()> {
    let bytes = encode(params, optimizer, metadata);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.kernel", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), true, ParamGroup::Backbone);
        s.insert("a.running_var", Tensor::full(vec![2, 1], 0.25), false, ParamGroup::Control);
        s
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 1..64), step in 0u64..1000) {
            let store = store_from(&values);
            let mut first = IndexMap::new();
            let mut second = IndexMap::new();
            first.insert("a.kernel".to_string(), Tensor::new(vec![values.len()], values.clone()).unwrap());
            second.insert("a.kernel".to_string(), Tensor::full(vec![values.len()], 1e-30f32));
            let opt = OptimizerState { step, lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-7, first, second };
            let meta = serde_json::json!({"epoch": 3, "best_val": 0.125});
            let bytes = encode(&store, Some(&opt), &meta);
            let back = decode::<f32>(&bytes).unwrap();
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            for ((n1, p1), (n2, p2)) in store.iter().zip(back.params.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(p1.value.shape(), p2.value.shape());
                prop_assert_eq!(bits(&p1.value), bits(&p2.value));
                prop_assert_eq!(p1.trainable, p2.trainable);
                prop_assert_eq!(p1.group, p2.group);
            }
            let bo = back.optimizer.unwrap();
            prop_assert_eq!(bo.step, step);
            prop_assert_eq!(bits(&bo.first["a.kernel"]), bits(&opt.first["a.kernel"]));
            prop_assert_eq!(&back.metadata, &meta);
            prop_assert_eq!(encode(&back.params, Some(&bo), &back.metadata), bytes);
        }
    }

    #[test]
    fn rejects_wrong_dtype_and_magic() {
        let bytes = encode(&store_from(&[1.0]), None, &serde_json::Value::Null);
        assert!(decode::<f64>(&bytes).is_err());
        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(decode::<f32>(&broken).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
