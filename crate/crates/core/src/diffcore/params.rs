use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const PARAM_MAGIC: [u8; 4] = *b"DDMC";
pub const PARAM_FORMAT_VERSION: u16 = 1;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Entries whose name ends in one of these are state, not weights.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer_name(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

#[derive(Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named tensors in a fixed order.
///
/// Every set carries a process-unique id used by [`Graph::param`] to bind
/// leaves; clones get a fresh id.
///
/// [`Graph::param`]: super::Graph::param
#[derive(Debug)]
pub struct ParamSet<T = f32> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                })
                .collect(),
        }
    }
}

impl<T: Real> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            uid: next_uid(),
            entries: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        self.entries.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.value(i))
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        !is_buffer_name(&self.entries[i].name)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        (0..self.len())
            .filter(|&i| self.is_trainable(i))
            .map(|i| self.value(i).len())
            .sum()
    }

    /// Copy values from `other`, which must have the same layout.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Integrity(format!(
                "parameter count {} != {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter layout differs at `{}`",
                    a.name
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            uid: next_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Binary form: magic, version, count, then per tensor name, rank,
    /// extents and float32 values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&PARAM_MAGIC);
        out.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.value.shape().len() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                out.extend_from_slice(&(v.to_f64_real() as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parse one serialised set from the front of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != PARAM_MAGIC {
            return Err(Error::BadMagic {
                expected: PARAM_MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = r.u16()?;
        if version != PARAM_FORMAT_VERSION {
            return Err(Error::Version {
                expected: PARAM_FORMAT_VERSION,
                found: version,
            });
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::real(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            if set.index_of(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            set.push(name, Tensor::new(shape, data)?);
        }
        Ok((set, r.pos))
    }

    /// SHA-256 of the serialised bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Kaiming-uniform weights for a layer with `fan_in` inputs.
pub fn kaiming_uniform<T: Real, R: Rng>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let shape = shape.into();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::real(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape")
}
