//! Canonical little-endian serialization of [`Kjt`] and [`Ikjt`].
//!
//! ```text
//! tensor   := tag:u8                      0 = KJT, 1 = IKJT
//!             key_count:u32 { key_len:u32 key:utf8 }*
//!             batch_size:u64
//!             inverse:stream              empty for a KJT
//!             offsets:stream * key_count  in key order
//!             values:stream  * key_count  in key order
//! stream   := count:u64 { item:u64 }*
//! ```
//!
//! The serialized length is the byte count used by all transport accounting.

use indexmap::IndexMap;

use super::{Ikjt, JaggedTensor, Kjt, TensorError};

pub const TAG_KJT: u8 = 0;
pub const TAG_IKJT: u8 = 1;

const STREAM_HEADER: usize = 8;
const ITEM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireTensor {
    Kjt(Kjt),
    Ikjt(Ikjt),
}

/// Bytes needed to ship one jagged tensor's offsets and values streams.
pub fn slice_wire_len(jt: &JaggedTensor) -> usize {
    2 * STREAM_HEADER + ITEM * (jt.num_rows() + jt.values().len())
}

/// Bytes of the values stream payload alone.
pub fn values_payload_len(jt: &JaggedTensor) -> usize {
    ITEM * jt.values().len()
}

fn header_len<'a>(keys: impl Iterator<Item = &'a str>) -> usize {
    1 + 4 + keys.map(|k| 4 + k.len()).sum::<usize>() + 8
}

pub fn kjt_wire_len(kjt: &Kjt) -> usize {
    header_len(kjt.keys()) + STREAM_HEADER + kjt.iter().map(|(_, jt)| slice_wire_len(jt)).sum::<usize>()
}

pub fn ikjt_wire_len(ikjt: &Ikjt) -> usize {
    header_len(ikjt.group_keys().iter().map(String::as_str))
        + STREAM_HEADER
        + ITEM * ikjt.inverse_lookup().len()
        + ikjt.features().map(|(_, jt)| slice_wire_len(jt)).sum::<usize>()
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_stream(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = u64>) {
    put_u64(out, items.len() as u64);
    for item in items {
        put_u64(out, item);
    }
}

fn put_header<'a>(out: &mut Vec<u8>, tag: u8, keys: &[&'a str], batch_size: usize) {
    out.push(tag);
    put_u32(out, keys.len() as u32);
    for key in keys {
        put_u32(out, key.len() as u32);
        out.extend_from_slice(key.as_bytes());
    }
    put_u64(out, batch_size as u64);
}

fn put_slices<'a>(out: &mut Vec<u8>, tensors: &[&'a JaggedTensor]) {
    for jt in tensors {
        put_stream(out, jt.offsets().iter().map(|&o| o as u64));
    }
    for jt in tensors {
        put_stream(out, jt.values().iter().copied());
    }
}

pub fn encode_kjt(kjt: &Kjt, out: &mut Vec<u8>) {
    let keys: Vec<&str> = kjt.keys().collect();
    put_header(out, TAG_KJT, &keys, kjt.batch_size());
    put_stream(out, std::iter::empty::<u64>());
    let tensors: Vec<&JaggedTensor> = kjt.iter().map(|(_, jt)| jt).collect();
    put_slices(out, &tensors);
}

pub fn encode_ikjt(ikjt: &Ikjt, out: &mut Vec<u8>) {
    let keys: Vec<&str> = ikjt.group_keys().iter().map(String::as_str).collect();
    put_header(out, TAG_IKJT, &keys, ikjt.batch_size());
    put_stream(out, ikjt.inverse_lookup().iter().map(|&i| i as u64));
    let tensors: Vec<&JaggedTensor> = ikjt.features().map(|(_, jt)| jt).collect();
    put_slices(out, &tensors);
}

pub(crate) struct WireReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                TensorError::Decode(format!("need {n} bytes at offset {}", self.pos))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        self.take(n)
    }

    fn stream(&mut self) -> Result<Vec<u64>, TensorError> {
        let count = self.u64()? as usize;
        if count > (self.buf.len() - self.pos) / ITEM {
            return Err(TensorError::Decode(format!(
                "stream of {count} items overruns buffer at offset {}",
                self.pos
            )));
        }
        (0..count).map(|_| self.u64()).collect()
    }

    fn usize_stream(&mut self) -> Result<Vec<usize>, TensorError> {
        Ok(self.stream()?.into_iter().map(|v| v as usize).collect())
    }
}

pub(crate) fn read_tensor(r: &mut WireReader<'_>) -> Result<WireTensor, TensorError> {
    let tag = r.u8()?;
    let key_count = r.u32()? as usize;
    let mut keys = Vec::with_capacity(key_count.min(1024));
    for _ in 0..key_count {
        let len = r.u32()? as usize;
        let raw = r.bytes(len)?;
        let key = std::str::from_utf8(raw)
            .map_err(|e| TensorError::Decode(format!("key is not utf-8: {e}")))?;
        keys.push(key.to_owned());
    }
    let batch_size = r.u64()? as usize;
    let inverse = r.usize_stream()?;
    let offsets: Vec<Vec<usize>> = (0..key_count)
        .map(|_| r.usize_stream())
        .collect::<Result<_, _>>()?;
    let values: Vec<Vec<u64>> = (0..key_count)
        .map(|_| r.stream())
        .collect::<Result<_, _>>()?;
    let tensors: Vec<JaggedTensor> = values
        .into_iter()
        .zip(offsets)
        .map(|(v, o)| JaggedTensor::new(v, o))
        .collect::<Result<_, _>>()?;
    match tag {
        TAG_KJT => {
            if !inverse.is_empty() {
                return Err(TensorError::Decode("KJT carries an inverse lookup".into()));
            }
            let entries: IndexMap<String, JaggedTensor> = keys.into_iter().zip(tensors).collect();
            if entries.len() != key_count {
                return Err(TensorError::Decode("duplicate key in KJT".into()));
            }
            Ok(WireTensor::Kjt(Kjt::new(batch_size, entries)?))
        }
        TAG_IKJT => {
            if inverse.len() != batch_size {
                return Err(TensorError::Decode(format!(
                    "inverse lookup has {} entries for batch size {batch_size}",
                    inverse.len()
                )));
            }
            Ok(WireTensor::Ikjt(Ikjt::new(keys, inverse, tensors)?))
        }
        other => Err(TensorError::Decode(format!("unknown tensor tag {other}"))),
    }
}

/// Decodes one tensor from the front of `buf`, returning it and the number of
/// bytes consumed.
pub fn decode_tensor(buf: &[u8]) -> Result<(WireTensor, usize), TensorError> {
    let mut r = WireReader::new(buf);
    let tensor = read_tensor(&mut r)?;
    Ok((tensor, r.position()))
}
