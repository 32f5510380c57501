//! Varint packing and the block compressor shared by files and log shards.

use crate::datagen::ImpressionRecord;

/// Codec tag written into file headers.
pub const CODEC_ZSTD: u8 = 1;
pub const DEFAULT_LEVEL: i32 = 3;

pub fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

/// Decodes one LEB128 varint, advancing `pos`.
pub fn get_varint(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let mut out = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *buf.get(*pos)?;
        *pos += 1;
        out |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Some(out);
        }
    }
    None
}

pub fn compress(raw: &[u8], level: i32) -> std::io::Result<Vec<u8>> {
    zstd::bulk::compress(raw, level)
}

pub fn decompress(compressed: &[u8], raw_len: usize) -> std::io::Result<Vec<u8>> {
    zstd::bulk::decompress(compressed, raw_len)
}

/// Row-oriented log encoding of records, as a message bus would carry them:
/// every record repeats its feature keys.
pub fn encode_log(records: &[ImpressionRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        put_varint(&mut out, r.session_id);
        put_varint(&mut out, r.timestamp);
        out.push(r.label);
        put_varint(&mut out, r.features.len() as u64);
        for (key, list) in &r.features {
            put_varint(&mut out, key.len() as u64);
            out.extend_from_slice(key.as_bytes());
            put_varint(&mut out, list.len() as u64);
            for &id in list {
                put_varint(&mut out, id);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SizeStats {
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
}

impl SizeStats {
    /// `raw / compressed`, or 1.0 for empty input.
    pub fn ratio(&self) -> f64 {
        if self.raw_bytes == 0 || self.compressed_bytes == 0 {
            1.0
        } else {
            self.raw_bytes as f64 / self.compressed_bytes as f64
        }
    }
}

/// Compresses each shard's log independently and sums the sizes.
pub fn log_compression(shards: &[Vec<ImpressionRecord>], level: i32) -> std::io::Result<SizeStats> {
    let mut stats = SizeStats {
        raw_bytes: 0,
        compressed_bytes: 0,
    };
    for shard in shards {
        let raw = encode_log(shard);
        stats.raw_bytes += raw.len() as u64;
        stats.compressed_bytes += compress(&raw, level)?.len() as u64;
    }
    Ok(stats)
}
