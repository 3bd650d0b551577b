//! Reference computations for the acceptance suite. None of these call into
//! the code paths they check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar as DalekScalar;
use rand::{Rng, RngCore};
use sha2::Sha512;

use epione::dpf::BitVector;

const HASH_DST: &[u8] = b"epione/v1/hash-to-group";

/// `H(msg)` straight from the curve library.
pub fn hash_point(msg: &[u8]) -> RistrettoPoint {
    let mut input = HASH_DST.to_vec();
    input.push(0);
    input.extend_from_slice(msg);
    RistrettoPoint::hash_from_bytes::<Sha512>(&input)
}

pub fn scalar(bytes: [u8; 32]) -> DalekScalar {
    DalekScalar::from_bytes_mod_order(bytes)
}

pub fn pow_bytes(point: &[u8; 32], exp: &DalekScalar) -> [u8; 32] {
    let p = CompressedRistretto(*point).decompress().expect("valid point");
    (p * exp).compress().to_bytes()
}

pub fn plain_intersection<T: Eq + Hash>(x: &[T], y: &[T]) -> usize {
    let xs: HashSet<&T> = x.iter().collect();
    let ys: HashSet<&T> = y.iter().collect();
    ys.iter().filter(|t| xs.contains(*t)).count()
}

/// Two uniformly random selection vectors that differ only at `alpha`.
pub fn naive_shares<R: RngCore>(alpha: usize, n: usize, rng: &mut R) -> (BitVector, BitVector) {
    let mut a = BitVector::zeros(n);
    for i in 0..n {
        a.set(i, rng.gen());
    }
    let mut b = a.clone();
    b.set(alpha, !a.get(alpha));
    (a, b)
}

/// Bucket bytes are a count followed by fixed-width slots.
pub fn bucket_holds(bucket: &[u8], slot_len: usize, remainder: &[u8]) -> bool {
    let count = bucket[0] as usize;
    (0..count).any(|i| &bucket[1 + i * slot_len..1 + (i + 1) * slot_len] == remainder)
}

/// One client's plaintext history for the incremental-query check.
pub struct History {
    pub retention: u32,
    pub window: u32,
    pub last_day: u32,
    /// Days the client ran its check.
    pub online: Vec<u32>,
    /// Token ids received per day.
    pub received: BTreeMap<u32, Vec<u64>>,
    /// Token ids held by each day's database.
    pub db: BTreeMap<u32, BTreeSet<u64>>,
}

impl History {
    pub fn random<R: Rng>(rng: &mut R) -> History {
        let retention = rng.gen_range(3..=15);
        let window = rng.gen_range(1..=retention);
        let last_day = rng.gen_range(5..=45);
        let mut received: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        let mut db: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
        let mut next = 0u64;
        for e in 1..=last_day {
            for _ in 0..rng.gen_range(0..4) {
                let id = next;
                next += 1;
                received.entry(e).or_default().push(id);
                // A token can only be in databases built on or after the
                // day it was exchanged.
                if rng.gen_bool(0.3) {
                    let d = (e + rng.gen_range(0..window)).min(last_day + 3);
                    db.entry(d).or_default().insert(id);
                }
            }
        }
        // Online with gaps, some longer than the retention period.
        let mut online = Vec::new();
        let mut d = rng.gen_range(1..=4);
        while d <= last_day {
            online.push(d);
            d += if rng.gen_bool(0.2) { rng.gen_range(2..=retention + 5) } else { 1 };
        }
        History { retention, window, last_day, online, received, db }
    }

    pub fn retained(&self, t: u32) -> Vec<u32> {
        ((t + 1).saturating_sub(self.retention).max(1)..=t).collect()
    }

    /// Tokens the client still holds on day `t`.
    pub fn held(&self, t: u32) -> BTreeSet<u64> {
        let lo = (t + 1).saturating_sub(self.window);
        self.received.range(lo..=t).flat_map(|(_, v)| v.iter().copied()).collect()
    }

    /// Everything a single full-window check on day `t` would find.
    pub fn monolithic(&self, t: u32) -> BTreeSet<(u32, u64)> {
        let held = self.held(t);
        self.retained(t)
            .into_iter()
            .flat_map(|d| self.db.get(&d).into_iter().flatten().filter(|y| held.contains(y)).map(move |y| (d, *y)))
            .collect()
    }
}
