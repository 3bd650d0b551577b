use sha2::{Digest, Sha256};

use super::{DbLayout, PirError};

pub const SHARD_FORMAT_VERSION: u8 = 1;
/// version (1) | token bits (2) | shard bits (1) | bucket bits (1) | slots (1)
/// | shard id (2) | day (4)
pub const SHARD_HEADER_LEN: usize = 12;

/// One shard: `2^bucket_bits` fixed-size buckets in index order.
#[derive(Clone, PartialEq, Eq)]
pub struct Shard {
    layout: DbLayout,
    shard_id: u16,
    day: u32,
    buckets: Vec<u8>,
}

impl std::fmt::Debug for Shard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Shard")
            .field("layout", &self.layout)
            .field("shard_id", &self.shard_id)
            .field("day", &self.day)
            .field("bytes", &self.buckets.len())
            .finish()
    }
}

impl Shard {
    /// Place right-aligned remainders into their buckets. Fails if any bucket
    /// would exceed `layout.slots`.
    pub fn build(layout: DbLayout, shard_id: u16, day: u32, entries: &[(u64, Vec<u8>)]) -> Result<Self, PirError> {
        layout.validate()?;
        let blen = layout.bucket_len();
        let slen = layout.slot_len();
        let mut buckets = vec![0u8; layout.shard_payload_len()];
        for (bucket, rem) in entries {
            if *bucket >= layout.n_buckets() as u64 || rem.len() != slen {
                return Err(PirError::Layout("entry does not fit layout".into()));
            }
            let b = &mut buckets[*bucket as usize * blen..(*bucket as usize + 1) * blen];
            let count = b[0] as usize;
            if count >= layout.slots as usize {
                return Err(PirError::BucketOverflow { bucket: *bucket, slots: layout.slots });
            }
            b[1 + count * slen..1 + (count + 1) * slen].copy_from_slice(rem);
            b[0] += 1;
        }
        Ok(Shard { layout, shard_id, day, buckets })
    }

    pub fn layout(&self) -> &DbLayout {
        &self.layout
    }

    pub fn shard_id(&self) -> u16 {
        self.shard_id
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    pub fn bucket(&self, index: usize) -> &[u8] {
        let blen = self.layout.bucket_len();
        &self.buckets[index * blen..(index + 1) * blen]
    }

    pub fn payload(&self) -> &[u8] {
        &self.buckets
    }

    pub fn contains(&self, bucket: u64, remainder: &[u8]) -> bool {
        bucket_contains(self.bucket(bucket as usize), &self.layout, remainder).unwrap_or(false)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SHARD_HEADER_LEN + self.buckets.len());
        out.push(SHARD_FORMAT_VERSION);
        out.extend_from_slice(&self.layout.token_bits.to_le_bytes());
        out.push(self.layout.shard_bits);
        out.push(self.layout.bucket_bits);
        out.push(self.layout.slots);
        out.extend_from_slice(&self.shard_id.to_le_bytes());
        out.extend_from_slice(&self.day.to_le_bytes());
        out.extend_from_slice(&self.buckets);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PirError> {
        if bytes.len() < SHARD_HEADER_LEN {
            return Err(PirError::ShardFormat("truncated header".into()));
        }
        if bytes[0] != SHARD_FORMAT_VERSION {
            return Err(PirError::ShardFormat(format!("unsupported version {}", bytes[0])));
        }
        let layout = DbLayout {
            token_bits: u16::from_le_bytes([bytes[1], bytes[2]]),
            shard_bits: bytes[3],
            bucket_bits: bytes[4],
            slots: bytes[5],
        };
        layout.validate()?;
        let shard_id = u16::from_le_bytes([bytes[6], bytes[7]]);
        if shard_id as usize >= layout.n_shards() {
            return Err(PirError::ShardFormat("shard id out of range".into()));
        }
        let day = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let buckets = bytes[SHARD_HEADER_LEN..].to_vec();
        if buckets.len() != layout.shard_payload_len() {
            return Err(PirError::ShardFormat("payload length does not match layout".into()));
        }
        for b in buckets.chunks_exact(layout.bucket_len()) {
            if b[0] > layout.slots {
                return Err(PirError::ShardFormat("bucket count exceeds slots".into()));
            }
        }
        Ok(Shard { layout, shard_id, day, buckets })
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// Scan a reconstructed bucket for `remainder`.
pub fn bucket_contains(bucket: &[u8], layout: &DbLayout, remainder: &[u8]) -> Result<bool, PirError> {
    if bucket.len() != layout.bucket_len() {
        return Err(PirError::AnswerLength { expected: layout.bucket_len(), got: bucket.len() });
    }
    let count = bucket[0];
    if count > layout.slots {
        return Err(PirError::Integrity { count, slots: layout.slots });
    }
    let slen = layout.slot_len();
    Ok(bucket[1..].chunks_exact(slen).take(count as usize).any(|s| s == remainder))
}
