//! Tree-based distributed point function over the XOR group.
//!
//! `gen` produces two keys whose full-domain evaluations XOR to a vector that
//! is zero everywhere except at `alpha`, where it equals `beta`. Each key is
//! a root seed plus one correction word per tree level, so key size is affine
//! in the domain bit length.
//!
//! Tree nodes are packed into a `u128`: the low bit is the control bit and
//! the remaining 127 bits the seed. The PRG is keyed on the seed with the low
//! bit cleared, and its output carries the child control bit in the same
//! position, so correcting a child is a single XOR.
//!
//! Two output modes exist. [`Beta::Bit`] returns the leaf control bits (the
//! form used for bucket selection in PIR; no output correction is needed).
//! [`Beta::Bytes`] carries a `w`-byte payload via a final correction word.

mod prg;

use rand::{CryptoRng, RngCore};

use crate::par::Parallelism;
use prg::Prg;

pub const MAX_DOMAIN_BITS: u8 = 32;
const SEED_LEN: usize = 16;
const CW_LEN: usize = SEED_LEN + 1;
const HEADER_LEN: usize = 2 + SEED_LEN;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DpfError {
    #[error("domain bits {0} outside 1..=32")]
    DomainBits(u8),
    #[error("alpha {alpha} outside domain of {domain_bits} bits")]
    AlphaOutOfRange { alpha: u64, domain_bits: u8 },
    #[error("point {x} outside domain of {domain_bits} bits")]
    PointOutOfRange { x: u64, domain_bits: u8 },
    #[error("malformed key at byte {offset}: {reason}")]
    Decode { offset: usize, reason: &'static str },
    #[error("full-domain evaluation of {0} bits is too large")]
    DomainTooLarge(u8),
}

/// Output value at the distinguished point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Beta {
    /// A single 1 bit.
    Bit,
    /// An arbitrary byte string of fixed width.
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointSpec {
    pub alpha: u64,
    pub beta: Beta,
}

impl PointSpec {
    pub fn unit(alpha: u64) -> Self {
        PointSpec { alpha, beta: Beta::Bit }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrectionWord {
    /// Seed correction with the low bit clear.
    pub seed: u128,
    pub t_left: bool,
    pub t_right: bool,
}

impl CorrectionWord {
    #[inline]
    fn left(&self) -> u128 {
        self.seed | self.t_left as u128
    }

    #[inline]
    fn right(&self) -> u128 {
        self.seed | self.t_right as u128
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DpfKey {
    pub party: u8,
    pub domain_bits: u8,
    pub root_seed: u128,
    pub correction_words: Vec<CorrectionWord>,
    /// Empty for [`Beta::Bit`].
    pub final_correction: Vec<u8>,
}

/// Length in bytes of an encoded key.
pub fn key_len(domain_bits: u8, payload_len: usize) -> usize {
    HEADER_LEN + CW_LEN * domain_bits as usize + 2 + payload_len
}

/// Packed little-endian bit vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitVector {
    words: Vec<u64>,
    len: usize,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        BitVector { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        let w = &mut self.words[i / 64];
        *w = (*w & !(1 << (i % 64))) | ((v as u64) << (i % 64));
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn xor(&self, other: &BitVector) -> BitVector {
        assert_eq!(self.len, other.len);
        BitVector { words: self.words.iter().zip(&other.words).map(|(a, b)| a ^ b).collect(), len: self.len }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }
}

fn check_domain(domain_bits: u8) -> Result<(), DpfError> {
    if domain_bits == 0 || domain_bits > MAX_DOMAIN_BITS {
        return Err(DpfError::DomainBits(domain_bits));
    }
    Ok(())
}

fn random_seed<R: RngCore>(rng: &mut R) -> u128 {
    let mut b = [0u8; 16];
    rng.fill_bytes(&mut b);
    u128::from_le_bytes(b) & !1
}

#[inline]
fn bit_of(alpha: u64, domain_bits: u8, level: u8) -> bool {
    (alpha >> (domain_bits - 1 - level)) & 1 == 1
}

/// Generate a key pair for `spec` over a domain of `2^domain_bits` points.
pub fn gen<R: RngCore + CryptoRng>(
    spec: &PointSpec,
    domain_bits: u8,
    rng: &mut R,
) -> Result<(DpfKey, DpfKey), DpfError> {
    check_domain(domain_bits)?;
    if spec.alpha >> domain_bits != 0 {
        return Err(DpfError::AlphaOutOfRange { alpha: spec.alpha, domain_bits });
    }
    let prg = Prg::new();
    let root0 = random_seed(rng);
    let root1 = random_seed(rng);
    // Control bits start at 0 and 1.
    let mut v0 = root0;
    let mut v1 = root1 | 1;
    let mut cws = Vec::with_capacity(domain_bits as usize);
    for level in 0..domain_bits {
        let e0 = prg.expand(v0 & !1);
        let e1 = prg.expand(v1 & !1);
        let a = bit_of(spec.alpha, domain_bits, level);
        let (lose0, lose1) = if a { (e0.left, e1.left) } else { (e0.right, e1.right) };
        let cw = CorrectionWord {
            seed: lose0 ^ lose1,
            t_left: e0.t_left ^ e1.t_left ^ a ^ true,
            t_right: e0.t_right ^ e1.t_right ^ a,
        };
        let (keep0, keep1, keep_cw) = if a {
            (e0.right | e0.t_right as u128, e1.right | e1.t_right as u128, cw.right())
        } else {
            (e0.left | e0.t_left as u128, e1.left | e1.t_left as u128, cw.left())
        };
        v0 = keep0 ^ if v0 & 1 == 1 { keep_cw } else { 0 };
        v1 = keep1 ^ if v1 & 1 == 1 { keep_cw } else { 0 };
        cws.push(cw);
    }
    let final_correction = match &spec.beta {
        Beta::Bit => Vec::new(),
        Beta::Bytes(beta) => {
            let mut c0 = vec![0u8; beta.len()];
            let mut c1 = vec![0u8; beta.len()];
            prg.convert(v0 & !1, &mut c0);
            prg.convert(v1 & !1, &mut c1);
            c0.iter().zip(&c1).zip(beta).map(|((a, b), c)| a ^ b ^ c).collect()
        }
    };
    let k0 = DpfKey {
        party: 0,
        domain_bits,
        root_seed: root0,
        correction_words: cws.clone(),
        final_correction: final_correction.clone(),
    };
    let k1 = DpfKey { party: 1, domain_bits, root_seed: root1, correction_words: cws, final_correction };
    Ok((k0, k1))
}

impl DpfKey {
    fn root(&self) -> u128 {
        self.root_seed | self.party as u128
    }

    pub fn payload_len(&self) -> usize {
        self.final_correction.len()
    }

    pub fn domain_size(&self) -> usize {
        1usize << self.domain_bits
    }

    fn leaf(&self, prg: &Prg, x: u64) -> u128 {
        let mut v = self.root();
        for (level, cw) in self.correction_words.iter().enumerate() {
            let e = prg.expand(v & !1);
            let t = v & 1 == 1;
            v = if bit_of(x, self.domain_bits, level as u8) {
                (e.right | e.t_right as u128) ^ if t { cw.right() } else { 0 }
            } else {
                (e.left | e.t_left as u128) ^ if t { cw.left() } else { 0 }
            };
        }
        v
    }

    /// Bit-mode evaluation at a single point.
    pub fn eval_bit(&self, x: u64) -> Result<bool, DpfError> {
        if x >> self.domain_bits != 0 {
            return Err(DpfError::PointOutOfRange { x, domain_bits: self.domain_bits });
        }
        Ok(self.leaf(&Prg::new(), x) & 1 == 1)
    }

    /// Payload-mode evaluation at a single point.
    pub fn eval_bytes(&self, x: u64) -> Result<Vec<u8>, DpfError> {
        if x >> self.domain_bits != 0 {
            return Err(DpfError::PointOutOfRange { x, domain_bits: self.domain_bits });
        }
        let prg = Prg::new();
        let v = self.leaf(&prg, x);
        let mut out = vec![0u8; self.payload_len()];
        self.finish_payload(&prg, v, &mut out);
        Ok(out)
    }

    fn finish_payload(&self, prg: &Prg, leaf: u128, out: &mut [u8]) {
        prg.convert(leaf & !1, out);
        if leaf & 1 == 1 {
            out.iter_mut().zip(&self.final_correction).for_each(|(o, c)| *o ^= c);
        }
    }

    /// Expand `nodes` (all at `from_level`) down to the leaves.
    fn expand_from(&self, prg: &Prg, mut nodes: Vec<u128>, from_level: usize) -> Vec<u128> {
        let (mut scratch, mut left, mut right) = (Vec::new(), Vec::new(), Vec::new());
        let mut seeds = Vec::new();
        for cw in &self.correction_words[from_level..] {
            seeds.clear();
            seeds.extend(nodes.iter().map(|v| v & !1));
            prg.expand_many(&seeds, &mut scratch, &mut left, &mut right);
            let (cl, cr) = (cw.left(), cw.right());
            let mut next = Vec::with_capacity(nodes.len() * 2);
            for ((&v, &l), &r) in nodes.iter().zip(&left).zip(&right) {
                let mask = 0u128.wrapping_sub(v & 1);
                next.push(l ^ (cl & mask));
                next.push(r ^ (cr & mask));
            }
            nodes = next;
        }
        nodes
    }

    /// Split point for parallel expansion: subtrees rooted `levels` deep.
    fn split_levels(&self, par: Parallelism) -> usize {
        let b = self.domain_bits as usize;
        if !par.is_parallel() || b < 12 {
            0
        } else {
            (b - 6).min(6)
        }
    }

    fn check_full(&self) -> Result<(), DpfError> {
        if self.domain_bits > 30 {
            return Err(DpfError::DomainTooLarge(self.domain_bits));
        }
        Ok(())
    }

    /// Leaf control bits over the whole domain.
    pub fn eval_full(&self) -> Result<BitVector, DpfError> {
        self.eval_full_with(Parallelism::Sequential)
    }

    pub fn eval_full_with(&self, par: Parallelism) -> Result<BitVector, DpfError> {
        self.check_full()?;
        let prg = Prg::new();
        let n = self.domain_size();
        let mut out = BitVector::zeros(n);
        let split = self.split_levels(par);
        let tops = self.expand_from_to(&prg, split);
        let per_subtree = n >> split;
        let words_per = per_subtree.div_ceil(64);
        par.for_each_chunk_mut(&mut out.words, words_per, |i, words| {
            let leaves = self.expand_from(&Prg::new(), vec![tops[i]], split);
            for (w, chunk) in words.iter_mut().zip(leaves.chunks(64)) {
                *w = chunk.iter().enumerate().fold(0u64, |acc, (j, v)| acc | (((v & 1) as u64) << j));
            }
        });
        Ok(out)
    }

    /// Payload outputs over the whole domain, `payload_len` bytes per point.
    pub fn eval_full_bytes(&self) -> Result<Vec<u8>, DpfError> {
        self.eval_full_bytes_with(Parallelism::Sequential)
    }

    pub fn eval_full_bytes_with(&self, par: Parallelism) -> Result<Vec<u8>, DpfError> {
        self.check_full()?;
        let w = self.payload_len();
        let n = self.domain_size();
        let mut out = vec![0u8; n * w];
        if w == 0 {
            return Ok(out);
        }
        let prg = Prg::new();
        let split = self.split_levels(par);
        let tops = self.expand_from_to(&prg, split);
        let per_subtree = n >> split;
        par.for_each_chunk_mut(&mut out, per_subtree * w, |i, bytes| {
            let prg = Prg::new();
            let leaves = self.expand_from(&prg, vec![tops[i]], split);
            for (leaf, o) in leaves.iter().zip(bytes.chunks_mut(w)) {
                self.finish_payload(&prg, *leaf, o);
            }
        });
        Ok(out)
    }

    /// Nodes at depth `levels`, in index order.
    fn expand_from_to(&self, prg: &Prg, levels: usize) -> Vec<u128> {
        let trimmed = DpfKey {
            correction_words: self.correction_words[..levels].to_vec(),
            final_correction: Vec::new(),
            ..*self
        };
        trimmed.expand_from(prg, vec![self.root()], 0)
    }

    pub fn encoded_len(&self) -> usize {
        key_len(self.domain_bits, self.payload_len())
    }

    /// Layout: party (1) | domain bits (1) | root seed (16) | per level:
    /// seed correction (16) + flags (1; bit 0 left, bit 1 right) | payload
    /// length (u16 LE) | final correction.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.party);
        out.push(self.domain_bits);
        out.extend_from_slice(&self.root_seed.to_le_bytes());
        for cw in &self.correction_words {
            out.extend_from_slice(&cw.seed.to_le_bytes());
            out.push(cw.t_left as u8 | (cw.t_right as u8) << 1);
        }
        out.extend_from_slice(&(self.final_correction.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.final_correction);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DpfError> {
        let err = |offset, reason| DpfError::Decode { offset, reason };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), "truncated header"));
        }
        let party = bytes[0];
        if party > 1 {
            return Err(err(0, "party id must be 0 or 1"));
        }
        let domain_bits = bytes[1];
        if domain_bits == 0 || domain_bits > MAX_DOMAIN_BITS {
            return Err(err(1, "domain bits out of range"));
        }
        let root_seed = u128::from_le_bytes(bytes[2..18].try_into().unwrap());
        if root_seed & 1 != 0 {
            return Err(err(2, "root seed low bit set"));
        }
        let mut off = HEADER_LEN;
        let mut correction_words = Vec::with_capacity(domain_bits as usize);
        for _ in 0..domain_bits {
            if bytes.len() < off + CW_LEN {
                return Err(err(bytes.len(), "truncated correction word"));
            }
            let seed = u128::from_le_bytes(bytes[off..off + SEED_LEN].try_into().unwrap());
            let flags = bytes[off + SEED_LEN];
            if seed & 1 != 0 {
                return Err(err(off, "correction seed low bit set"));
            }
            if flags > 3 {
                return Err(err(off + SEED_LEN, "unknown correction flags"));
            }
            correction_words.push(CorrectionWord { seed, t_left: flags & 1 == 1, t_right: flags & 2 == 2 });
            off += CW_LEN;
        }
        if bytes.len() < off + 2 {
            return Err(err(bytes.len(), "truncated payload length"));
        }
        let w = u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
        off += 2;
        if bytes.len() != off + w {
            return Err(err(off, "payload length mismatch"));
        }
        Ok(DpfKey { party, domain_bits, root_seed, correction_words, final_correction: bytes[off..].to_vec() })
    }
}
