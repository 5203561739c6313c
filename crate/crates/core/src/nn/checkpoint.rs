//! Versioned flat binary weight file.
//!
//! Layout (all integers little-endian `u32`):
//! `b"VXNC"`, version, entry count, then per entry: name length, UTF-8 name,
//! rank, extents, and `product(extents)` little-endian `f32` values.

use std::fs;
use std::path::Path;

use super::{ParamKind, Parameters, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn capture<S: Scalar>(model: &mut impl Parameters<S>) -> Self {
        let mut entries = Vec::new();
        model.visit("", &mut |name, t, _| {
            entries.push(Entry {
                name: name.trim_start_matches('.').to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            });
        });
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        self.entries.push(Entry { name: name.to_string(), shape: shape.to_vec(), data });
    }

    /// Copies every matching entry into the model; all parameters must be present.
    pub fn restore<S: Scalar>(&self, model: &mut impl Parameters<S>) -> Result<()> {
        let mut err = None;
        model.visit("", &mut |name, t, _| {
            if err.is_some() {
                return;
            }
            let name = name.trim_start_matches('.');
            match self.get(name) {
                Some(e) if e.shape == t.shape() => {
                    for (dst, &v) in t.data_mut().iter_mut().zip(&e.data) {
                        *dst = S::from_f64_lossy(v as f64);
                    }
                }
                Some(e) => {
                    err = Some(Error::Shape(format!("checkpoint entry {name}: shape {:?} vs model {:?}", e.shape, t.shape())))
                }
                None => err = Some(Error::Config(format!("checkpoint is missing parameter {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.fail(at + 4, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.fail(r.pos - 4, &format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.fail(r.pos, "entry too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, &format!("unexpected end of file (wanted {n} bytes)")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn fail(&self, offset: usize, msg: &str) -> Error {
        Error::Checkpoint { offset: offset as u64, msg: msg.to_string() }
    }
}

/// Gradient-free parameter count, handy for reports.
pub fn parameter_count<S: Scalar>(model: &mut impl Parameters<S>) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Weight {
            n += t.len();
        }
    });
    n
}

pub fn zero_grads<S: Scalar>(model: &mut impl Parameters<S>) {
    model.visit("", &mut |_, t: &mut Tensor<S>, _| t.zero_grad());
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("vfe.0.linear.weight", &[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]);
        c.push("rpn.head.bias", &[1], vec![7.0]);
        c
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 4),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<u32>(), 1..64), name in "[a-z.]{1,20}") {
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let mut c = Checkpoint::default();
            c.push(&name, &[data.len()], data.clone());
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let bits: Vec<u32> = back.entries[0].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, vals);
        }
    }
}
