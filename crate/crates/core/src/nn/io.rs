//! Model file layout (little-endian):
//!
//! ```text
//! "RFPM" | version u16 | variant tag u8
//! branch count u8, per branch: input h,w,c | conv1 out,kh,kw | pool1 ph,pw
//!                              | conv2 out,kh,kw | pool2 ph,pw     (u16 each)
//! hidden u16 | classes u16 | dropout f64 | seed u64
//! metadata length u32 | metadata UTF-8
//! per state tensor: rank u16 | dims u16… | values f32…
//! CRC32 u32 of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BranchSpec, ConvSpec, ModelSpec, Network, NnError};
use crate::preprocess::PipelineVariant;

pub const MODEL_MAGIC: &[u8; 4] = b"RFPM";
pub const MODEL_VERSION: u16 = 1;

fn u16_of(v: usize, what: &str) -> Result<[u8; 2], NnError> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| NnError::Format(format!("{what} {v} exceeds u16")))
}

/// Serializes the network plus a free-form metadata string.
pub fn write_model<W: Write>(mut w: W, net: &Network, metadata: &str) -> Result<(), NnError> {
    let spec = net.spec();
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.push(spec.variant.tag());
    buf.push(u8::try_from(spec.branches.len()).map_err(|_| NnError::Format("too many branches".into()))?);
    for b in &spec.branches {
        let vals = [
            b.input[0],
            b.input[1],
            b.input[2],
            b.conv1.out_channels,
            b.conv1.kh,
            b.conv1.kw,
            b.pool1.0,
            b.pool1.1,
            b.conv2.out_channels,
            b.conv2.kh,
            b.conv2.kw,
            b.pool2.0,
            b.pool2.1,
        ];
        for v in vals {
            buf.extend_from_slice(&u16_of(v, "branch dimension")?);
        }
    }
    buf.extend_from_slice(&u16_of(spec.hidden, "hidden width")?);
    buf.extend_from_slice(&u16_of(spec.classes, "class count")?);
    buf.extend_from_slice(&spec.dropout.to_le_bytes());
    buf.extend_from_slice(&net.seed().to_le_bytes());
    let meta = metadata.as_bytes();
    buf.extend_from_slice(&(u32::try_from(meta.len()).map_err(|_| NnError::Format("metadata too long".into()))?).to_le_bytes());
    buf.extend_from_slice(meta);
    for t in net.state() {
        buf.extend_from_slice(&u16_of(t.shape().len(), "rank")?);
        for &d in t.shape() {
            buf.extend_from_slice(&u16_of(d, "dimension")?);
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a model file; returns the network and its metadata string.
pub fn read_model<R: Read>(mut r: R) -> Result<(Network, String), NnError> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    if all.len() < 4 + 2 + 1 + 4 {
        return Err(NnError::Format("file too short".into()));
    }
    let (body, tail) = all.split_at(all.len() - 4);
    if &body[..4] != MODEL_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(NnError::Checksum { stored, computed });
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u16()?;
    if version != MODEL_VERSION as usize {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let tag = c.u8()?;
    let variant = PipelineVariant::from_tag(tag).ok_or_else(|| NnError::Format(format!("unknown variant tag {tag}")))?;
    let nb = c.u8()? as usize;
    let mut branches = Vec::with_capacity(nb);
    for _ in 0..nb {
        let mut v = [0usize; 13];
        for x in &mut v {
            *x = c.u16()?;
        }
        branches.push(BranchSpec {
            input: [v[0], v[1], v[2]],
            conv1: ConvSpec {
                out_channels: v[3],
                kh: v[4],
                kw: v[5],
            },
            pool1: (v[6], v[7]),
            conv2: ConvSpec {
                out_channels: v[8],
                kh: v[9],
                kw: v[10],
            },
            pool2: (v[11], v[12]),
        });
    }
    let hidden = c.u16()?;
    let classes = c.u16()?;
    let dropout = c.f64()?;
    let seed = c.u64()?;
    let meta_len = c.u32()? as usize;
    let metadata = String::from_utf8(c.take(meta_len)?.to_vec())
        .map_err(|_| NnError::Format("metadata is not UTF-8".into()))?;
    let spec = ModelSpec {
        variant,
        branches,
        hidden,
        dropout,
        classes,
    };
    let mut net = Network::new(spec, seed)?;
    for t in net.state_mut() {
        let rank = c.u16()?;
        let dims = (0..rank).map(|_| c.u16()).collect::<Result<Vec<_>, _>>()?;
        if dims != t.shape() {
            return Err(NnError::Format(format!("tensor shape {dims:?}, expected {:?}", t.shape())));
        }
        let raw = c.take(4 * t.len())?;
        for (dst, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
        }
    }
    if c.pos != body.len() {
        return Err(NnError::Format(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok((net, metadata))
}

pub fn save_model(path: &Path, net: &Network, metadata: &str) -> Result<(), NnError> {
    write_model(BufWriter::new(File::create(path)?), net, metadata)
}

pub fn load_model(path: &Path) -> Result<(Network, String), NnError> {
    read_model(BufReader::new(File::open(path)?))
}
