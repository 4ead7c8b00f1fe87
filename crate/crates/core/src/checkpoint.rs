//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "CAPST001"
//! version  u32
//! config   u32 length + UTF-8 `key = value` lines
//! tensors  table
//! momentum table
//! epoch    u64
//! seed     u64
//!
//! table    u32 count, then per tensor:
//!          u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!          u32 rank, u64 dims, raw little-endian values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CAPST001";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

/// A decoded checkpoint. Tensor values are widened to `f64`, which is exact
/// for both stored precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub momentum: Vec<(String, Tensor<f64>)>,
    pub epoch: u64,
    pub seed: u64,
    /// Precision the values were stored in.
    pub dtype: DType,
}

/// Borrowed view used for writing.
pub struct CheckpointRef<'a, T> {
    pub config: &'a str,
    pub tensors: Vec<(String, &'a Tensor<T>)>,
    pub momentum: Vec<(String, &'a Tensor<T>)>,
    pub epoch: u64,
    pub seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_table<'a, T: Scalar + 'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<T>)>) {
    put_u32(out, items.len() as u32);
    for (name, t) in items {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        put_u32(out, t.ndim() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

/// Serialises a checkpoint to bytes.
pub fn encode<T: Scalar>(ck: &CheckpointRef<'_, T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, ck.config.len() as u32);
    out.extend_from_slice(ck.config.as_bytes());
    put_table(&mut out, ck.tensors.iter().map(|(n, t)| (n.as_str(), *t)));
    put_table(&mut out, ck.momentum.iter().map(|(n, t)| (n.as_str(), *t)));
    put_u64(&mut out, ck.epoch);
    put_u64(&mut out, ck.seed);
    out
}

pub fn save<T: Scalar>(ck: &CheckpointRef<'_, T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(ck))?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated stream while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn table(&mut self) -> Result<(Vec<(String, Tensor<f64>)>, Option<DType>)> {
        let count = self.u32("table size")? as usize;
        let mut out = Vec::new();
        let mut dtype = None;
        for _ in 0..count {
            let len = self.u32("name length")? as usize;
            if len > MAX_NAME {
                return Err(Error::Format(format!("tensor name length {len} out of range")));
            }
            let name = String::from_utf8(self.bytes(len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let code = self.u8("dtype")?;
            let dt = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code} for `{name}`")))?;
            dtype.get_or_insert(dt);
            let rank = self.u32("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Format(format!("rank {rank} of `{name}` out of range")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && n < (1 << 32))
                .ok_or_else(|| Error::Format(format!("bad shape {shape:?} for `{name}`")))?;
            let raw = self.bytes(numel * dt.size(), "tensor data")?;
            let data: Vec<f64> = match dt {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            out.push((name, Tensor::from_parts(shape, data)));
        }
        Ok((out, dtype))
    }
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<String> {
    let magic = r.bytes(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let len = r.u32("config length")? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("config block of {len} bytes out of range")));
    }
    String::from_utf8(r.bytes(len, "config")?).map_err(|_| Error::Format("config block is not UTF-8".into()))
}

pub fn decode<R: Read>(source: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: source };
    let config = read_header(&mut r)?;
    let (tensors, dt) = r.table()?;
    let (momentum, _) = r.table()?;
    let epoch = r.u64("epoch")?;
    let seed = r.u64("seed")?;
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        config,
        tensors,
        momentum,
        epoch,
        seed,
        dtype: dt.unwrap_or(DType::F32),
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(BufReader::new(File::open(path)?))
}

/// Reads only the parameter table of a checkpoint stream.
pub fn read_tensor_table<R: Read>(source: R) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = Reader { inner: source };
    read_header(&mut r)?;
    Ok(r.table()?.0)
}
