//! Model file: `TSAM1`, a `u32` length and the canonical `key = value`
//! config text, a `u32` blob count, then per blob the `u32` name length,
//! UTF-8 name, `u32` rank, `u32` dims and little-endian `f32` values.

use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 5] = b"TSAM1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: KeyValues,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        let text = self.meta.to_text();
        put_u32(&mut buf, text.len())?;
        buf.extend_from_slice(text.as_bytes());
        put_u32(&mut buf, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut buf, d)?;
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        if buf.len() < 5 || &buf[..5] != MODEL_MAGIC {
            return Err(Error::Format(format!("{}: not a model checkpoint", origin.display())));
        }
        let mut r = Reader { buf, pos: 5 };
        let meta = KeyValues::parse(&r.string()?, origin)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| Error::Format("bad tensor size".into()))?)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{}: trailing bytes", origin.display())));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
