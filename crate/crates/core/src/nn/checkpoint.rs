//! Binary checkpoint format.
//!
//! ```text
//! "LPCK"  u32 version (=1)  u32 descriptor_len  descriptor  tensors
//!
//! descriptor := u32 num_classes  u32 num_units  unit*  u32 num_head  layer*
//! unit       := u32 record_len  u32 id  u8 skip (0 none, 1 identity, 2 projection)
//!               u8 post_relu  u32 num_body  layer*  [layer (projection)]
//! layer      := u32 record_len  u8 tag  payload
//!   0 Dense      u32 in_dim  u32 out_dim  u8 has_bias
//!   1 Conv1d     u32 in_ch  u32 out_ch  u32 kernel  u32 stride  u32 padding  u8 has_bias
//!   2 BatchNorm  u32 channels  f32 eps  f32 momentum
//!   3 ReLU, 4 GlobalAvgPool1d, 5 Flatten   (empty)
//! tensors    := for every layer in declaration order, its parameters then
//!               its buffers, as f32 little-endian
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use super::layer::{BatchNorm1d, Conv1d, Dense, PrimitiveLayer};
use super::model::{ModelGraph, Skip, Unit};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LPCK";
pub const VERSION: u32 = 1;

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        file: "checkpoint",
        message: message.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, record: Vec<u8>) {
    put_u32(out, record.len());
    out.extend(record);
}

fn encode_layer(layer: &PrimitiveLayer) -> Vec<u8> {
    let mut r = Vec::new();
    match layer {
        PrimitiveLayer::Dense(d) => {
            r.push(0);
            put_u32(&mut r, d.in_dim);
            put_u32(&mut r, d.out_dim);
            r.push(d.bias.is_some() as u8);
        }
        PrimitiveLayer::Conv1d(c) => {
            r.push(1);
            for v in [c.in_ch, c.out_ch, c.kernel, c.stride, c.padding] {
                put_u32(&mut r, v);
            }
            r.push(c.bias.is_some() as u8);
        }
        PrimitiveLayer::BatchNorm1d(b) => {
            r.push(2);
            put_u32(&mut r, b.channels);
            r.extend_from_slice(&b.eps.to_le_bytes());
            r.extend_from_slice(&b.momentum.to_le_bytes());
        }
        PrimitiveLayer::Relu => r.push(3),
        PrimitiveLayer::GlobalAvgPool1d => r.push(4),
        PrimitiveLayer::Flatten => r.push(5),
    }
    r
}

pub fn to_bytes(model: &ModelGraph) -> Vec<u8> {
    let mut desc = Vec::new();
    put_u32(&mut desc, model.num_classes);
    put_u32(&mut desc, model.units.len());
    for unit in &model.units {
        let mut r = Vec::new();
        put_u32(&mut r, unit.id);
        r.push(match unit.skip {
            Skip::None => 0,
            Skip::Identity => 1,
            Skip::Projection(_) => 2,
        });
        r.push(unit.post_relu as u8);
        put_u32(&mut r, unit.body.len());
        for layer in &unit.body {
            put_record(&mut r, encode_layer(layer));
        }
        if let Skip::Projection(p) = &unit.skip {
            put_record(&mut r, encode_layer(p));
        }
        put_record(&mut desc, r);
    }
    put_u32(&mut desc, model.head.len());
    for layer in &model.head {
        put_record(&mut desc, encode_layer(layer));
    }

    let mut out = Vec::with_capacity(12 + desc.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, desc.len());
    out.extend(desc);
    for layer in model.layers() {
        for t in layer.params().into_iter().chain(layer.buffers()) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format_err(format!("invalid flag byte {v}"))),
        }
    }

    /// Sub-reader over a length-prefixed record; the record must be consumed exactly.
    fn record<T>(&mut self, f: impl FnOnce(&mut Reader<'a>) -> Result<T>) -> Result<T> {
        let len = self.u32()?;
        let mut sub = Reader {
            buf: self.take(len)?,
            pos: 0,
        };
        let v = f(&mut sub)?;
        if sub.pos != sub.buf.len() {
            return Err(format_err("record length does not match contents"));
        }
        Ok(v)
    }
}

fn positive(v: usize, what: &str) -> Result<usize> {
    if v == 0 {
        return Err(format_err(format!("{what} must be positive")));
    }
    Ok(v)
}

fn decode_layer(r: &mut Reader) -> Result<PrimitiveLayer> {
    r.record(|r| {
        Ok(match r.u8()? {
            0 => {
                let (i, o) = (positive(r.u32()?, "in_dim")?, positive(r.u32()?, "out_dim")?);
                PrimitiveLayer::Dense(Dense::new(i, o, r.flag()?))
            }
            1 => {
                let in_ch = positive(r.u32()?, "in_ch")?;
                let out_ch = positive(r.u32()?, "out_ch")?;
                let kernel = positive(r.u32()?, "kernel")?;
                let stride = positive(r.u32()?, "stride")?;
                let padding = r.u32()?;
                PrimitiveLayer::Conv1d(Conv1d::new(in_ch, out_ch, kernel, stride, padding, r.flag()?))
            }
            2 => {
                let mut bn = BatchNorm1d::new(positive(r.u32()?, "channels")?);
                bn.eps = r.f32()?;
                bn.momentum = r.f32()?;
                PrimitiveLayer::BatchNorm1d(bn)
            }
            3 => PrimitiveLayer::Relu,
            4 => PrimitiveLayer::GlobalAvgPool1d,
            5 => PrimitiveLayer::Flatten,
            t => return Err(format_err(format!("unknown layer tag {t}"))),
        })
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(format_err("bad magic (expected \"LPCK\")"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let mut model = r.record(|r| {
        let num_classes = positive(r.u32()?, "num_classes")?;
        let n_units = r.u32()?;
        let mut units = Vec::with_capacity(n_units.min(1024));
        for _ in 0..n_units {
            units.push(r.record(|r| {
                let id = r.u32()?;
                let skip_kind = r.u8()?;
                let post_relu = r.flag()?;
                let n_body = r.u32()?;
                let body = (0..n_body).map(|_| decode_layer(r)).collect::<Result<Vec<_>>>()?;
                let skip = match skip_kind {
                    0 => Skip::None,
                    1 => Skip::Identity,
                    2 => Skip::Projection(decode_layer(r)?),
                    k => return Err(format_err(format!("unknown skip kind {k}"))),
                };
                Ok(Unit {
                    id,
                    body,
                    skip,
                    post_relu,
                })
            })?);
        }
        let n_head = r.u32()?;
        let head = (0..n_head).map(|_| decode_layer(r)).collect::<Result<Vec<_>>>()?;
        Ok(ModelGraph {
            units,
            head,
            num_classes,
        })
    })?;
    for layer in model.layers_mut() {
        for t in layer.tensors_mut() {
            for v in t.data_mut() {
                *v = r.f32()?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
