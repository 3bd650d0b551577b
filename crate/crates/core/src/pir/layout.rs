use serde::{Deserialize, Serialize};

use super::PirError;
use crate::group::TransformedToken;

/// Shape of one day's database: `2^shard_bits` shards of `2^bucket_bits`
/// buckets, each bucket holding up to `slots` remainders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DbLayout {
    pub token_bits: u16,
    pub shard_bits: u8,
    pub bucket_bits: u8,
    pub slots: u8,
}

/// Where a transformed token lives, plus the bits actually stored.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Address {
    pub shard: u16,
    pub bucket: u64,
    /// Right-aligned big-endian remainder, `slot_len()` bytes.
    pub remainder: Vec<u8>,
}

pub const MAX_SHARD_BITS: u8 = 16;
pub const MAX_BUCKET_BITS: u8 = 30;

impl DbLayout {
    pub fn new(token_bits: u16, shard_bits: u8, bucket_bits: u8, slots: u8) -> Result<Self, PirError> {
        let l = DbLayout { token_bits, shard_bits, bucket_bits, slots };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), PirError> {
        let bad = |m: &str| Err(PirError::Layout(m.to_string()));
        if self.shard_bits > MAX_SHARD_BITS {
            return bad("too many shards");
        }
        if self.bucket_bits == 0 || self.bucket_bits > MAX_BUCKET_BITS {
            return bad("bucket bits outside 1..=30");
        }
        if self.token_bits > crate::group::MAX_TRUNCATED_BITS {
            return bad("token bits exceed 256");
        }
        if (self.shard_bits as u16 + self.bucket_bits as u16) >= self.token_bits {
            return bad("addressing leaves no remainder bits");
        }
        Ok(())
    }

    pub fn n_shards(&self) -> usize {
        1 << self.shard_bits
    }

    pub fn n_buckets(&self) -> usize {
        1 << self.bucket_bits
    }

    pub fn remainder_bits(&self) -> u16 {
        self.token_bits - self.shard_bits as u16 - self.bucket_bits as u16
    }

    pub fn slot_len(&self) -> usize {
        (self.remainder_bits() as usize).div_ceil(8)
    }

    /// Count byte plus `slots` fixed-width entries.
    pub fn bucket_len(&self) -> usize {
        1 + self.slots as usize * self.slot_len()
    }

    pub fn shard_payload_len(&self) -> usize {
        self.n_buckets() * self.bucket_len()
    }

    /// Top `shard_bits` select the shard, the next `bucket_bits` the bucket;
    /// the rest is stored.
    pub fn address(&self, tt: &TransformedToken) -> Result<Address, PirError> {
        if tt.len_bits() != self.token_bits {
            return Err(PirError::TokenLength { expected: self.token_bits, got: tt.len_bits() });
        }
        let s = self.shard_bits as u16;
        let b = self.bucket_bits as u16;
        let shard = if s == 0 { 0 } else { tt.bits_u64(0, s) as u16 };
        let bucket = tt.bits_u64(s, b);
        Ok(Address { shard, bucket, remainder: tt.suffix_bytes(s + b) })
    }

    /// Inverse of [`DbLayout::address`].
    pub fn reconstruct(&self, addr: &Address) -> TransformedToken {
        let prefix = ((addr.shard as u64) << self.bucket_bits) | addr.bucket;
        TransformedToken::from_parts(
            prefix,
            self.shard_bits as u16 + self.bucket_bits as u16,
            &addr.remainder,
            self.remainder_bits(),
        )
    }
}
