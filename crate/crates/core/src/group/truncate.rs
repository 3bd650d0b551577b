use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GroupElement, GroupError};

/// Longest supported truncated output.
pub const MAX_TRUNCATED_BITS: u16 = 256;

const TRUNCATE_DST: &[u8] = b"epione/v1/truncate";

/// Truncated output length `t`: either `lambda + ceil(log2(n_upper))`, or a
/// fixed override (default 74).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationParams {
    out_bits: u16,
    lambda: Option<u16>,
    n_upper: Option<u64>,
}

impl Default for TruncationParams {
    fn default() -> Self {
        TruncationParams { out_bits: 74, lambda: None, n_upper: None }
    }
}

impl TruncationParams {
    /// `t = lambda + ceil(log2(n_upper))`.
    pub fn from_security(lambda: u16, n_upper: u64) -> Result<Self, GroupError> {
        if n_upper == 0 {
            return Err(GroupError::Truncation("server set bound must be positive".into()));
        }
        let log_n = ceil_log2(n_upper);
        let out_bits = lambda as u32 + log_n;
        if out_bits == 0 || out_bits > MAX_TRUNCATED_BITS as u32 {
            return Err(GroupError::Truncation(format!("{out_bits} bits out of range")));
        }
        Ok(TruncationParams { out_bits: out_bits as u16, lambda: Some(lambda), n_upper: Some(n_upper) })
    }

    pub fn with_bits(out_bits: u16) -> Result<Self, GroupError> {
        if out_bits == 0 || out_bits > MAX_TRUNCATED_BITS {
            return Err(GroupError::Truncation(format!("{out_bits} bits out of range")));
        }
        Ok(TruncationParams { out_bits, lambda: None, n_upper: None })
    }

    pub fn out_bits(&self) -> u16 {
        self.out_bits
    }

    pub fn lambda(&self) -> Option<u16> {
        self.lambda
    }

    pub fn n_upper(&self) -> Option<u64> {
        self.n_upper
    }
}

pub(crate) fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// A `len`-bit string, most significant bit first. Bits past `len` are zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransformedToken {
    bytes: [u8; 32],
    len: u16,
}

impl TransformedToken {
    pub(crate) fn from_element(elem: &GroupElement, len: u16) -> Self {
        let digest = Sha256::new().chain_update(TRUNCATE_DST).chain_update(elem.to_bytes()).finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest);
        Self::from_bytes_truncated(bytes, len)
    }

    /// Keep the first `len` bits of `bytes`.
    pub fn from_bytes_truncated(mut bytes: [u8; 32], len: u16) -> Self {
        assert!(len <= MAX_TRUNCATED_BITS);
        let full = (len / 8) as usize;
        let rem = len % 8;
        if full < 32 {
            if rem == 0 {
                bytes[full..].fill(0);
            } else {
                bytes[full] &= 0xffu8 << (8 - rem);
                bytes[full + 1..].fill(0);
            }
        }
        TransformedToken { bytes, len }
    }

    /// Build from an unsigned integer holding the low `len` bits (`len <= 128`).
    pub fn from_u128(value: u128, len: u16) -> Self {
        assert!(len <= 128);
        let shifted = if len == 0 { 0 } else { value << (128 - len) };
        let mut bytes = [0u8; 32];
        bytes[..16].copy_from_slice(&shifted.to_be_bytes());
        Self::from_bytes_truncated(bytes, len)
    }

    pub fn len_bits(&self) -> u16 {
        self.len
    }

    /// Minimal big-endian byte view (`ceil(len/8)` bytes).
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..(self.len as usize).div_ceil(8)]
    }

    pub fn bit(&self, i: u16) -> bool {
        debug_assert!(i < self.len);
        (self.bytes[(i / 8) as usize] >> (7 - i % 8)) & 1 == 1
    }

    /// Bits `[start, start+count)` as an unsigned integer (`count <= 64`).
    pub fn bits_u64(&self, start: u16, count: u16) -> u64 {
        assert!(count <= 64 && start + count <= self.len);
        let mut v = 0u64;
        for i in start..start + count {
            v = (v << 1) | self.bit(i) as u64;
        }
        v
    }

    /// Bits `[start, len)` right-aligned into a big-endian byte string of
    /// `ceil((len-start)/8)` bytes.
    pub fn suffix_bytes(&self, start: u16) -> Vec<u8> {
        let n = self.len - start;
        let out_len = (n as usize).div_ceil(8);
        let mut out = vec![0u8; out_len];
        let pad = (out_len * 8) as u16 - n;
        for i in 0..n {
            if self.bit(start + i) {
                let pos = pad + i;
                out[(pos / 8) as usize] |= 1 << (7 - pos % 8);
            }
        }
        out
    }

    /// Inverse of splitting into a `prefix` integer of `prefix_bits` bits and a
    /// right-aligned suffix byte string.
    pub fn from_parts(prefix: u64, prefix_bits: u16, suffix: &[u8], suffix_bits: u16) -> Self {
        let len = prefix_bits + suffix_bits;
        assert!(len <= MAX_TRUNCATED_BITS && prefix_bits <= 64);
        let mut bytes = [0u8; 32];
        let mut set = |pos: u16| bytes[(pos / 8) as usize] |= 1 << (7 - pos % 8);
        for i in 0..prefix_bits {
            if (prefix >> (prefix_bits - 1 - i)) & 1 == 1 {
                set(i);
            }
        }
        let pad = (suffix.len() * 8) as u16 - suffix_bits;
        for i in 0..suffix_bits {
            let pos = pad + i;
            if (suffix[(pos / 8) as usize] >> (7 - pos % 8)) & 1 == 1 {
                set(prefix_bits + i);
            }
        }
        TransformedToken { bytes, len }
    }
}

impl fmt::Debug for TransformedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransformedToken({}/{})", hex::encode(self.as_bytes()), self.len)
    }
}
