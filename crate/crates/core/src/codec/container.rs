//! Byte layout (little-endian):
//!
//! ```text
//! "FSFL" u16:version u32:count
//! count x { u16:name_len name u8:rank u32:dims[rank] f64:step u64:payload_len payload }
//! ```

use super::{check_step, decode_levels, encode_levels, CodecError, QuantizedTensor, Result};

pub const MAGIC: &[u8; 4] = b"FSFL";
pub const FORMAT_VERSION: u16 = 1;

/// Upper bound on elements per tensor accepted by the decoder.
const MAX_NUMEL: usize = 1 << 32;

/// Header fields of one tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub step_size: f64,
    pub payload_bytes: usize,
    /// Bytes of the whole record including its header.
    pub record_bytes: usize,
}

pub fn encode(tensors: &[QuantizedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count =
        u32::try_from(tensors.len()).map_err(|_| CodecError::Unrepresentable("<stream>".into(), "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for q in tensors {
        check_step(&q.name, q.step_size)?;
        let unrep = |why| CodecError::Unrepresentable(q.name.clone(), why);
        let name_len = u16::try_from(q.name.len()).map_err(|_| unrep("name too long"))?;
        let rank = u8::try_from(q.shape.len()).map_err(|_| unrep("rank above 255"))?;
        if q.shape.iter().product::<usize>() != q.levels.len() {
            return Err(unrep("level count does not match shape"));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(q.name.as_bytes());
        out.push(rank);
        for &d in &q.shape {
            let d = u32::try_from(d).map_err(|_| unrep("dimension above u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&q.step_size.to_bits().to_le_bytes());
        let payload = encode_levels(&q.levels);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CodecError::Corrupt(format!("stream truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Parses the header and the record headers, returning (record, payload) pairs.
fn parse(bytes: &[u8]) -> Result<Vec<(RecordInfo, &[u8])>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CodecError::Corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != FORMAT_VERSION {
        return Err(CodecError::Corrupt(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(r.array("tensor count")?);
    let mut records = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CodecError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = u32::from_le_bytes(r.array("dimension")?) as usize;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= MAX_NUMEL)
                .ok_or_else(|| CodecError::Corrupt(format!("`{name}` has an implausible shape")))?;
            shape.push(d);
        }
        let step_size = f64::from_bits(u64::from_le_bytes(r.array("step size")?));
        if !(step_size > 0.0 && step_size.is_finite()) {
            return Err(CodecError::Corrupt(format!(
                "`{name}` has invalid step size {step_size}"
            )));
        }
        let len = u64::from_le_bytes(r.array("payload length")?);
        let len = usize::try_from(len).map_err(|_| CodecError::Corrupt("payload length overflow".into()))?;
        let payload = r.take(len, "payload")?;
        records.push((
            RecordInfo {
                name,
                shape,
                step_size,
                payload_bytes: len,
                record_bytes: r.pos - start,
            },
            payload,
        ));
    }
    if r.pos != bytes.len() {
        return Err(CodecError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<QuantizedTensor>> {
    parse(bytes)?
        .into_iter()
        .map(|(info, payload)| {
            let numel = info.shape.iter().product();
            let levels =
                decode_levels(payload, numel).map_err(|e| CodecError::Corrupt(format!("`{}`: {e}", info.name)))?;
            Ok(QuantizedTensor {
                name: info.name,
                shape: info.shape,
                step_size: info.step_size,
                levels,
            })
        })
        .collect()
}

/// Record headers without decoding payloads.
pub fn inspect(bytes: &[u8]) -> Result<Vec<RecordInfo>> {
    Ok(parse(bytes)?.into_iter().map(|(info, _)| info).collect())
}
