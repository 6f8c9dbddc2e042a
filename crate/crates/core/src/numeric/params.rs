use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::array::DenseArray;
use crate::error::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// The focused-view fusion network.
    Fusion,
    /// Everything else: encoders, indicators, temperature.
    Base,
}

impl Group {
    fn tag(self) -> u8 {
        match self {
            Group::Fusion => 1,
            Group::Base => 0,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Group::Base),
            1 => Some(Group::Fusion),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: DenseArray,
    pub group: Group,
}

/// Named trainable parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray, group: Group) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Parameter { value, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn group(&self, name: &str) -> Option<Group> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Absorb every parameter of `other`; fails on name collisions.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.value, p.group)?;
        }
        Ok(())
    }

    /// Order-dependent digest of all values, used to detect updates.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.params {
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
            for x in p.value.data() {
                h = (h ^ x.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Serialize as a checkpoint: magic, version, count, then one record per
    /// parameter (name, group, shape, little-endian `f64` data).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[p.group.tag()])?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut rd = ByteReader::new(r);
        let magic = rd.bytes(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a parameter checkpoint"));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let count = rd.u64()?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let at = rd.offset();
            let name_len = rd.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::format(at, "parameter name too long"));
            }
            let name = String::from_utf8(rd.bytes(name_len)?)
                .map_err(|_| Error::format(at + 4, "parameter name is not UTF-8"))?;
            let at = rd.offset();
            let group = Group::from_tag(rd.u8()?)
                .ok_or_else(|| Error::format(at, "unknown parameter group"))?;
            let at = rd.offset();
            let ndim = rd.u32()? as usize;
            if ndim > 8 {
                return Err(Error::format(at, format!("implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(rd.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| Error::format(at, "parameter too large"))?;
            let data = rd.f64s(n)?;
            let value = DenseArray::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            set.insert(name, value, group)
                .map_err(|e| Error::format(at, e.to_string()))?;
        }
        rd.expect_eof()?;
        Ok(set)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TBPK";
const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian reader that tracks its byte offset for error reporting.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(self.offset, "truncated file"),
            _ => Error::Io(e),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            self.fill(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format(self.offset, "trailing bytes after last record")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("a.weight", DenseArray::matrix(2, 3, vec![1.0, -0.0, 2.5, f64::MIN_POSITIVE, 1e300, -7.0]).unwrap(), Group::Base)
            .unwrap();
        p.insert("fusion.scale", DenseArray::scalar(0.0), Group::Fusion).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.insert("a.weight", DenseArray::scalar(1.0), Group::Base).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ParameterSet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(q.len(), 2);
        for (name, param) in p.iter() {
            assert!(param.value.bit_eq(q.get(name).unwrap()));
            assert_eq!(q.group(name), Some(param.group));
        }
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match ParameterSet::read_checkpoint(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_rejected() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        buf[4] = 9;
        assert!(matches!(
            ParameterSet::read_checkpoint(buf.as_slice()),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
