use indexmap::IndexMap;

use super::{Result, Tensor, TensorError};

/// Magic bytes of the checkpoint container.
pub const PARAMSET_MAGIC: &[u8; 4] = b"FSPS";
const PARAMSET_VERSION: u16 = 1;

/// Ordered, named collection of tensors making up a full model state:
/// weights, biases, BatchNorm statistics and scaling factors.
///
/// Insertion order is preserved and is part of the manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar elements across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn same_manifest(&self, other: &ParamSet) -> bool {
        self.manifest_mismatch(other).is_none()
    }

    /// First name at which the manifests of `self` and `other` disagree.
    pub fn manifest_mismatch(&self, other: &ParamSet) -> Option<String> {
        for (a, b) in self.tensors.iter().zip(other.tensors.iter()) {
            if a.0 != b.0 {
                return Some(a.0.clone());
            }
            if a.1.shape() != b.1.shape() {
                return Some(a.0.clone());
            }
        }
        match self.len().cmp(&other.len()) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => self.tensors.keys().nth(other.len()).cloned(),
            std::cmp::Ordering::Less => other.tensors.keys().nth(self.len()).cloned(),
        }
    }

    /// Copy of the subset of tensors whose names satisfy `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Same manifest with every element set to zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Serializes as `FSPS`, u16 version, u32 count, then per tensor:
    /// u16 name length, name, u8 rank, u32 dims, little-endian f64 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + self.numel() * 8);
        out.extend_from_slice(PARAMSET_MAGIC);
        out.extend_from_slice(&PARAMSET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != PARAMSET_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != PARAMSET_VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TensorError::Format("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.array()?));
            }
            set.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Format("trailing bytes".into()));
        }
        Ok(set)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
