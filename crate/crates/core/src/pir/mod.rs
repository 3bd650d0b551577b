//! Two-server PIR over fixed-size buckets, used as keyword PIR.
//!
//! A transformed token is split into a shard id (sent in the clear), a
//! bucket index (hidden inside a DPF key pair) and a remainder that never
//! leaves the client. Each server returns the XOR of all buckets its
//! expanded key selects; XORing both answers yields the target bucket, which
//! the client scans for the remainder.

mod layout;
mod shard;

use rand::{CryptoRng, RngCore};

use crate::dpf::{self, DpfError, DpfKey, PointSpec};
use crate::group::TransformedToken;
use crate::par::Parallelism;

pub use layout::{Address, DbLayout, MAX_BUCKET_BITS, MAX_SHARD_BITS};
pub use shard::{bucket_contains, Shard, SHARD_FORMAT_VERSION, SHARD_HEADER_LEN};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PirError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("transformed token has {got} bits, layout expects {expected}")]
    TokenLength { expected: u16, got: u16 },
    #[error("bucket {bucket} exceeds {slots} slots")]
    BucketOverflow { bucket: u64, slots: u8 },
    #[error("malformed shard: {0}")]
    ShardFormat(String),
    #[error("query does not match shard: {0}")]
    Mismatch(String),
    #[error("answer length {got}, expected {expected}")]
    AnswerLength { expected: usize, got: usize },
    #[error("reconstructed bucket claims {count} entries but holds {slots}")]
    Integrity { count: u8, slots: u8 },
    #[error(transparent)]
    Dpf(#[from] DpfError),
    #[error("server failure: {0}")]
    Server(String),
}

/// What one server receives for one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PirQuery {
    pub shard_id: u16,
    pub key: DpfKey,
}

/// One server's XOR share of a bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PirAnswer(pub Vec<u8>);

/// Client-side state for one outstanding lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingLookup {
    pub shard: u16,
    pub remainder: Vec<u8>,
}

/// Build the two per-server queries for `tt`.
pub fn query<R: RngCore + CryptoRng>(
    tt: &TransformedToken,
    layout: &DbLayout,
    rng: &mut R,
) -> Result<(PirQuery, PirQuery, PendingLookup), PirError> {
    let addr = layout.address(tt)?;
    let (k0, k1) = dpf::gen(&PointSpec::unit(addr.bucket), layout.bucket_bits, rng)?;
    Ok((
        PirQuery { shard_id: addr.shard, key: k0 },
        PirQuery { shard_id: addr.shard, key: k1 },
        PendingLookup { shard: addr.shard, remainder: addr.remainder },
    ))
}

/// XOR of every bucket whose selection bit is set.
pub fn select_xor(selection: &dpf::BitVector, shard: &Shard) -> PirAnswer {
    let blen = shard.layout().bucket_len();
    let payload = shard.payload();
    let mut acc = vec![0u8; blen];
    for (wi, &word) in selection.words().iter().enumerate() {
        let mut w = word;
        while w != 0 {
            let j = wi * 64 + w.trailing_zeros() as usize;
            w &= w - 1;
            let b = &payload[j * blen..(j + 1) * blen];
            acc.iter_mut().zip(b).for_each(|(a, x)| *a ^= x);
        }
    }
    PirAnswer(acc)
}

/// Server side: expand the key and fold the shard.
pub fn answer(q: &PirQuery, shard: &Shard) -> Result<PirAnswer, PirError> {
    answer_with(q, shard, Parallelism::Sequential)
}

pub fn answer_with(q: &PirQuery, shard: &Shard, par: Parallelism) -> Result<PirAnswer, PirError> {
    check_query(q, shard)?;
    let sel = q.key.eval_full_with(par)?;
    Ok(select_xor(&sel, shard))
}

fn check_query(q: &PirQuery, shard: &Shard) -> Result<(), PirError> {
    if q.shard_id != shard.shard_id() {
        return Err(PirError::Mismatch(format!("shard {} vs {}", q.shard_id, shard.shard_id())));
    }
    if q.key.domain_bits != shard.layout().bucket_bits {
        return Err(PirError::Mismatch(format!(
            "key domain {} bits vs {} bucket bits",
            q.key.domain_bits,
            shard.layout().bucket_bits
        )));
    }
    Ok(())
}

/// Answer a batch against the shards of one day, in request order.
/// Parallelism is across queries.
pub fn answer_batch(queries: &[PirQuery], shards: &[Shard], par: Parallelism) -> Result<Vec<PirAnswer>, PirError> {
    par.try_map(queries, |q| {
        let shard =
            shards.get(q.shard_id as usize).ok_or_else(|| PirError::Mismatch(format!("no shard {}", q.shard_id)))?;
        answer_with(q, shard, Parallelism::Sequential)
    })
}

/// Client side: reconstruct the bucket and look for the remainder.
pub fn membership(a: &PirAnswer, b: &PirAnswer, pending: &PendingLookup, layout: &DbLayout) -> Result<bool, PirError> {
    if a.0.len() != b.0.len() {
        return Err(PirError::AnswerLength { expected: a.0.len(), got: b.0.len() });
    }
    let bucket: Vec<u8> = a.0.iter().zip(&b.0).map(|(x, y)| x ^ y).collect();
    bucket_contains(&bucket, layout, &pending.remainder)
}

/// A PIR server reachable by the client. Implementations must return
/// answers in request order.
pub trait PirServer {
    fn answer_batch(&self, day: u32, queries: &[PirQuery]) -> Result<Vec<PirAnswer>, PirError>;
}

/// DPF key shares for a batch of lookups, one list per server, plus the
/// client-side state needed to read the answers.
#[derive(Clone, Debug)]
pub struct PreparedQueries {
    pub server1: Vec<PirQuery>,
    pub server2: Vec<PirQuery>,
    pub pending: Vec<PendingLookup>,
}

pub fn prepare_queries<R: RngCore + CryptoRng>(
    tts: &[TransformedToken],
    layout: &DbLayout,
    rng: &mut R,
) -> Result<PreparedQueries, PirError> {
    let mut p = PreparedQueries {
        server1: Vec::with_capacity(tts.len()),
        server2: Vec::with_capacity(tts.len()),
        pending: Vec::with_capacity(tts.len()),
    };
    for tt in tts {
        let (a, b, l) = query(tt, layout, rng)?;
        p.server1.push(a);
        p.server2.push(b);
        p.pending.push(l);
    }
    Ok(p)
}

/// Combine both servers' answers and count the hits.
pub fn count_matches(
    r0: &[PirAnswer],
    r1: &[PirAnswer],
    pending: &[PendingLookup],
    layout: &DbLayout,
) -> Result<usize, PirError> {
    if r0.len() != pending.len() || r1.len() != pending.len() {
        return Err(PirError::Server("answer count does not match query count".into()));
    }
    let mut count = 0;
    for ((a, b), p) in r0.iter().zip(r1).zip(pending) {
        if a.0.len() != layout.bucket_len() {
            return Err(PirError::AnswerLength { expected: layout.bucket_len(), got: a.0.len() });
        }
        count += membership(a, b, p, layout)? as usize;
    }
    Ok(count)
}

/// Count how many of `tts` are present in the day's database. One batched
/// round trip per server; any failure fails the whole batch.
pub fn multi_query<R: RngCore + CryptoRng>(
    tts: &[TransformedToken],
    layout: &DbLayout,
    day: u32,
    servers: (&dyn PirServer, &dyn PirServer),
    rng: &mut R,
) -> Result<usize, PirError> {
    if tts.is_empty() {
        return Ok(0);
    }
    let p = prepare_queries(tts, layout, rng)?;
    let r0 = servers.0.answer_batch(day, &p.server1)?;
    let r1 = servers.1.answer_batch(day, &p.server2)?;
    count_matches(&r0, &r1, &p.pending, layout)
}

/// In-memory server holding one day's shards.
pub struct LocalPirServer {
    pub day: u32,
    pub shards: Vec<Shard>,
    pub parallelism: Parallelism,
}

impl PirServer for LocalPirServer {
    fn answer_batch(&self, day: u32, queries: &[PirQuery]) -> Result<Vec<PirAnswer>, PirError> {
        if day != self.day {
            return Err(PirError::Server(format!("no database for day {day}")));
        }
        answer_batch(queries, &self.shards, self.parallelism)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn rng(s: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(s)
    }

    fn random_tt(r: &mut ChaCha20Rng, bits: u16) -> TransformedToken {
        let mut b = [0u8; 32];
        r.fill_bytes(&mut b);
        TransformedToken::from_bytes_truncated(b, bits)
    }

    /// Build all shards for `tts`, sizing slots to the max load.
    fn build(layout_proto: DbLayout, tts: &[TransformedToken], day: u32) -> (DbLayout, Vec<Shard>) {
        let mut per_shard: Vec<Vec<(u64, Vec<u8>)>> = vec![Vec::new(); layout_proto.n_shards()];
        for tt in tts {
            let a = layout_proto.address(tt).unwrap();
            per_shard[a.shard as usize].push((a.bucket, a.remainder));
        }
        let mut loads = std::collections::HashMap::new();
        for (s, es) in per_shard.iter().enumerate() {
            for (b, _) in es {
                *loads.entry((s, *b)).or_insert(0u8) += 1;
            }
        }
        let slots = loads.values().copied().max().unwrap_or(1).max(1);
        let layout = DbLayout { slots, ..layout_proto };
        let shards =
            per_shard.iter().enumerate().map(|(i, es)| Shard::build(layout, i as u16, day, es).unwrap()).collect();
        (layout, shards)
    }

    #[test]
    fn single_real_bucket() {
        let layout = DbLayout::new(16, 0, 1, 1).unwrap();
        let tt = TransformedToken::from_u128(0x8123, 16);
        let (layout, shards) = build(layout, &[tt], 0);
        let (q0, q1, p) = query(&tt, &layout, &mut rng(1)).unwrap();
        let a = answer(&q0, &shards[0]).unwrap();
        let b = answer(&q1, &shards[0]).unwrap();
        let bucket: Vec<u8> = a.0.iter().zip(&b.0).map(|(x, y)| x ^ y).collect();
        assert_eq!(bucket, shards[0].bucket(1));
        assert!(membership(&a, &b, &p, &layout).unwrap());
    }

    #[test]
    fn reconstruction_matches_plain_read() {
        let mut r = rng(2);
        let proto = DbLayout::new(40, 2, 12, 1).unwrap();
        let tts: Vec<_> = (0..5000).map(|_| random_tt(&mut r, 40)).collect();
        let (layout, shards) = build(proto, &tts, 3);
        for _ in 0..300 {
            let shard = r.gen_range(0..4u16);
            let bucket = r.gen_range(0..4096u64);
            let (k0, k1) = dpf::gen(&PointSpec::unit(bucket), 12, &mut r).unwrap();
            let a = answer(&PirQuery { shard_id: shard, key: k0 }, &shards[shard as usize]).unwrap();
            let b = answer(&PirQuery { shard_id: shard, key: k1 }, &shards[shard as usize]).unwrap();
            assert_eq!(a.0.len(), layout.bucket_len());
            let got: Vec<u8> = a.0.iter().zip(&b.0).map(|(x, y)| x ^ y).collect();
            assert_eq!(got, shards[shard as usize].bucket(bucket as usize));
        }
    }

    #[test]
    fn unrelated_bucket_change_is_invisible() {
        let mut r = rng(3);
        let proto = DbLayout::new(24, 0, 6, 1).unwrap();
        let tts: Vec<_> = (0..100).map(|_| random_tt(&mut r, 24)).collect();
        let (layout, shards) = build(proto, &tts, 0);
        let target = layout.address(&tts[0]).unwrap().bucket;
        let other = (target + 1) % 64;
        let mut bytes = shards[0].to_bytes();
        let off = SHARD_HEADER_LEN + other as usize * layout.bucket_len();
        bytes[off] = 0;
        bytes[off + 1..off + layout.bucket_len()].fill(0);
        let mutated = Shard::from_bytes(&bytes).unwrap();
        let (q0, q1, p) = query(&tts[0], &layout, &mut r).unwrap();
        let a = answer(&q0, &mutated).unwrap();
        let b = answer(&q1, &mutated).unwrap();
        assert!(membership(&a, &b, &p, &layout).unwrap());
        let orig: Vec<u8> = answer(&q0, &shards[0])
            .unwrap()
            .0
            .iter()
            .zip(&answer(&q1, &shards[0]).unwrap().0)
            .map(|(x, y)| x ^ y)
            .collect();
        let now: Vec<u8> = a.0.iter().zip(&b.0).map(|(x, y)| x ^ y).collect();
        assert_eq!(orig, now);
    }

    #[test]
    fn membership_edge_cases() {
        let layout = DbLayout::new(16, 0, 4, 2).unwrap();
        let rem = vec![0x0a, 0xbc];
        let zero = PirAnswer(vec![0; layout.bucket_len()]);
        let p = PendingLookup { shard: 0, remainder: rem.clone() };
        let mut bucket = vec![1u8, 0x0a, 0xbc, 0, 0];
        assert!(membership(&PirAnswer(bucket.clone()), &zero, &p, &layout).unwrap());
        bucket[0] = 0;
        assert!(!membership(&PirAnswer(bucket.clone()), &zero, &p, &layout).unwrap());
        bucket[0] = 3;
        assert_eq!(membership(&PirAnswer(bucket), &zero, &p, &layout), Err(PirError::Integrity { count: 3, slots: 2 }));
        assert!(matches!(membership(&PirAnswer(vec![0; 4]), &zero, &p, &layout), Err(PirError::AnswerLength { .. })));
    }

    #[test]
    fn answers_have_uniform_length() {
        let mut r = rng(4);
        let proto = DbLayout::new(30, 0, 8, 1).unwrap();
        let tts: Vec<_> = (0..400).map(|_| random_tt(&mut r, 30)).collect();
        let (layout, shards) = build(proto, &tts, 0);
        for bucket in 0..256u64 {
            let (k0, _) = dpf::gen(&PointSpec::unit(bucket), 8, &mut r).unwrap();
            assert_eq!(answer(&PirQuery { shard_id: 0, key: k0 }, &shards[0]).unwrap().0.len(), layout.bucket_len());
        }
    }

    #[test]
    fn multi_query_matches_hash_set() {
        let mut r = rng(5);
        let proto = DbLayout::new(48, 1, 9, 1).unwrap();
        let tts: Vec<_> = (0..2000).map(|_| random_tt(&mut r, 48)).collect();
        let (layout, shards) = build(proto, &tts, 9);
        let s1 = LocalPirServer { day: 9, shards: shards.clone(), parallelism: Parallelism::Sequential };
        let s2 = LocalPirServer { day: 9, shards, parallelism: Parallelism::Rayon };
        let set: HashSet<_> = tts.iter().copied().collect();
        for _ in 0..20 {
            let mut probe: Vec<_> = (0..50).map(|_| random_tt(&mut r, 48)).collect();
            let hits = r.gen_range(0..30);
            probe.extend((0..hits).map(|_| tts[r.gen_range(0..tts.len())]));
            probe.sort();
            probe.dedup();
            let want = probe.iter().filter(|t| set.contains(t)).count();
            assert_eq!(multi_query(&probe, &layout, 9, (&s1, &s2), &mut r).unwrap(), want);
        }
        assert_eq!(multi_query(&[], &layout, 9, (&s1, &s2), &mut r).unwrap(), 0);
        assert!(multi_query(&tts[..1], &layout, 8, (&s1, &s2), &mut r).is_err());
    }

    #[test]
    fn false_positives_bounded_by_truncation() {
        // 12 remainder bits, mean load ~1.5 per bucket: each absent probe matches
        // with probability count/2^12.
        let mut r = rng(6);
        let proto = DbLayout::new(18, 0, 6, 1).unwrap();
        let tts: Vec<_> = (0..96).map(|_| random_tt(&mut r, 18)).collect();
        let (layout, shards) = build(proto, &tts, 0);
        assert_eq!(layout.remainder_bits(), 12);
        let set: HashSet<_> = tts.iter().copied().collect();
        let trials = 20_000;
        let mut fp = 0;
        let mut absent = 0;
        for _ in 0..trials {
            let t = random_tt(&mut r, 18);
            if set.contains(&t) {
                continue;
            }
            absent += 1;
            let a = layout.address(&t).unwrap();
            fp += shards[0].contains(a.bucket, &a.remainder) as usize;
        }
        // Expected rate = mean load / 4096 = 96/64/4096; allow 3x.
        let expected = 96.0 / 64.0 / 4096.0;
        let rate = fp as f64 / absent as f64;
        assert!(rate <= 3.0 * expected + 3.0 / absent as f64, "rate {rate} vs {expected}");
        assert!(layout.slots as f64 / 4096.0 >= expected);
    }

    #[test]
    fn shard_round_trip_and_rejects() {
        let mut r = rng(7);
        let proto = DbLayout::new(32, 1, 5, 1).unwrap();
        let tts: Vec<_> = (0..50).map(|_| random_tt(&mut r, 32)).collect();
        let (_, shards) = build(proto, &tts, 77);
        let bytes = shards[1].to_bytes();
        assert_eq!(Shard::from_bytes(&bytes).unwrap(), shards[1]);
        assert!(Shard::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 2;
        assert!(Shard::from_bytes(&bad).is_err());
    }

    #[test]
    fn overflow_detected() {
        let layout = DbLayout::new(16, 0, 1, 1).unwrap();
        let e = vec![(0u64, vec![0u8, 1]), (0u64, vec![0u8, 2])];
        assert_eq!(Shard::build(layout, 0, 0, &e), Err(PirError::BucketOverflow { bucket: 0, slots: 1 }));
    }
}
