//! Server-side database lifecycle: ingest sealed seeds, regenerate tokens,
//! transform and truncate them, and lay them out as a day's PIR shards.

mod plan;
mod seal;
mod store;

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::group::{truncate, GroupError, TruncationParams};
use crate::par::Parallelism;
use crate::pir::{DbLayout, PirError, Shard, MAX_BUCKET_BITS, MAX_SHARD_BITS};
use crate::psica::ServerKeyState;
use crate::tokens::{Token, TokenGenerator, TokenSchedule};

pub use plan::{incremental_plan, resolve_plan, PlannedCheck, PlannedDays, TokenSubset};
pub use seal::{open, seal, EncryptedSeed, SealError, SeedDisclosure, ServerKeyPair, ENCRYPTED_SEED_LEN};
pub use store::{publish, DayIndex, DayStore, Manifest, ReplicaSink, DEFAULT_RETENTION_DAYS};

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error(transparent)]
    Pir(#[from] PirError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("bucket load {load} exceeds slot cap {cap}")]
    SlotCap { load: usize, cap: u8 },
    #[error("layout: {0}")]
    Layout(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("digest mismatch for {0}")]
    Digest(String),
    #[error("replica rejected database after {attempts} attempts: {reason}")]
    Publish { attempts: u32, reason: String },
}

/// Result of regenerating the tokens of the day's diagnosed users.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub tokens: Vec<Token>,
    pub accepted: usize,
    pub rejected: usize,
}

/// Open every upload and regenerate its window. Uploads that fail to
/// decrypt or ask for a window longer than the schedule's are skipped.
pub fn ingest(uploads: &[EncryptedSeed], keys: &ServerKeyPair, schedule: TokenSchedule) -> IngestReport {
    let mut report = IngestReport::default();
    for (i, u) in uploads.iter().enumerate() {
        let d = match open(keys, u) {
            Ok(d) if d.window >= 1 && d.window <= schedule.window_days => d,
            Ok(d) => {
                warn!("upload {i}: window {} outside 1..={}", d.window, schedule.window_days);
                report.rejected += 1;
                continue;
            }
            Err(e) => {
                warn!("upload {i}: {e}");
                report.rejected += 1;
                continue;
            }
        };
        let tokens = TokenGenerator::new(&d.seed, schedule).window(d.end_day, d.window).expect("window checked above");
        report.tokens.extend(tokens);
        report.accepted += 1;
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LayoutPolicy {
    /// Pick the shard count so each shard has about `2^target_bucket_bits`
    /// buckets at a mean load of at most `max_mean_load`.
    Auto { target_bucket_bits: u8, max_mean_load: u32 },
    /// Fixed geometry. `slots: None` sizes slots to the maximum load.
    Fixed { shard_bits: u8, bucket_bits: u8, slots: Option<u8> },
}

impl Default for LayoutPolicy {
    fn default() -> Self {
        LayoutPolicy::Auto { target_bucket_bits: 18, max_mean_load: 4 }
    }
}

impl LayoutPolicy {
    /// `(shard_bits, bucket_bits)` for `n` tokens.
    pub fn geometry(&self, n: usize) -> (u8, u8) {
        match *self {
            LayoutPolicy::Fixed { shard_bits, bucket_bits, .. } => (shard_bits, bucket_bits),
            LayoutPolicy::Auto { target_bucket_bits, max_mean_load } => {
                let per_bucket = max_mean_load.max(1) as u64;
                let buckets_needed = (n as u64).div_ceil(per_bucket).max(2);
                let total_bits = crate::group::ceil_log2(buckets_needed) as u8;
                let bucket_bits = total_bits.clamp(1, target_bucket_bits.min(MAX_BUCKET_BITS));
                let shard_bits = (total_bits - bucket_bits.min(total_bits)).min(MAX_SHARD_BITS);
                (shard_bits, bucket_bits)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub layout: LayoutPolicy,
    /// Truncation length; 74 by default. `None` uses
    /// `lambda + ceil(log2 n_upper)`.
    pub token_bits: Option<u16>,
    pub lambda: u16,
    /// Upper bound on database size used for the truncation length.
    pub n_upper: u64,
    /// Largest allowed bucket load.
    pub max_slots: u8,
    pub parallelism: Parallelism,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            layout: LayoutPolicy::default(),
            token_bits: Some(74),
            lambda: 40,
            n_upper: 1 << 24,
            max_slots: 32,
            parallelism: Parallelism::default(),
        }
    }
}

impl BuildConfig {
    pub fn truncation(&self) -> Result<TruncationParams, GroupError> {
        match self.token_bits {
            Some(b) => TruncationParams::with_bits(b),
            None => TruncationParams::from_security(self.lambda, self.n_upper),
        }
    }
}

/// Build the day's database from the regenerated tokens.
pub fn build_day(tokens: &[Token], key: &ServerKeyState, config: &BuildConfig, day: u32) -> Result<DayStore, DbError> {
    let mut seen = HashSet::with_capacity(tokens.len());
    let unique: Vec<Token> = tokens.iter().filter(|t| seen.insert(**t)).copied().collect();
    let trunc = config.truncation()?;
    let (shard_bits, bucket_bits) = config.layout.geometry(unique.len());
    let proto = DbLayout { token_bits: trunc.out_bits(), shard_bits, bucket_bits, slots: 1 };
    proto.validate()?;

    let addresses =
        config.parallelism.try_map(&unique, |t| proto.address(&truncate(&key.transform_token(t), &trunc)))?;

    let mut per_shard: Vec<Vec<(u64, Vec<u8>)>> = vec![Vec::new(); proto.n_shards()];
    for a in addresses {
        per_shard[a.shard as usize].push((a.bucket, a.remainder));
    }
    // Sort so slot contents do not depend on upload order.
    let mut max_load = 0usize;
    for entries in &mut per_shard {
        entries.sort_unstable();
        entries.dedup();
        let mut run = 0usize;
        for (i, e) in entries.iter().enumerate() {
            run = if i > 0 && entries[i - 1].0 == e.0 { run + 1 } else { 1 };
            max_load = max_load.max(run);
        }
    }
    let (slots, cap) = match config.layout {
        LayoutPolicy::Fixed { slots: Some(s), .. } => (s, s),
        _ => (max_load.clamp(1, 255) as u8, config.max_slots),
    };
    if max_load > cap as usize {
        return Err(DbError::SlotCap { load: max_load, cap });
    }
    let layout = DbLayout { slots, ..proto };
    let shards = (0..layout.n_shards())
        .map(|i| Shard::build(layout, i as u16, day, &per_shard[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let token_count = per_shard.iter().map(|s| s.len() as u64).sum();
    Ok(DayStore::new(day, key.epoch_id(), layout, token_count, shards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::hash_to_group;
    use crate::tokens::Seed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(s: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(s)
    }

    fn small_config() -> BuildConfig {
        BuildConfig { token_bits: Some(40), parallelism: Parallelism::Sequential, ..BuildConfig::default() }
    }

    #[test]
    fn ingest_regenerates_and_skips_bad() {
        let mut r = rng(1);
        let keys = ServerKeyPair::generate(&mut r);
        let sched = TokenSchedule { slots_per_day: 4, window_days: 3 };
        let seed = Seed::random(&mut r);
        let good = seal(&keys.public, &SeedDisclosure { seed: seed.clone(), end_day: 10, window: 3 }, &mut r);
        let too_long = seal(&keys.public, &SeedDisclosure { seed: seed.clone(), end_day: 10, window: 9 }, &mut r);
        let other = ServerKeyPair::generate(&mut r);
        let wrong_key = seal(&other.public, &SeedDisclosure { seed: seed.clone(), end_day: 10, window: 3 }, &mut r);
        let rep = ingest(&[good, too_long, wrong_key], &keys, sched);
        assert_eq!((rep.accepted, rep.rejected), (1, 2));
        assert_eq!(rep.tokens, TokenGenerator::new(&seed, sched).window(10, 3).unwrap());
        assert_eq!(rep.tokens.len(), 12);
    }

    #[test]
    fn auto_geometry() {
        let p = LayoutPolicy::default();
        assert_eq!(p.geometry(0), (0, 1));
        assert_eq!(p.geometry(1_000_000), (0, 18));
        assert_eq!(p.geometry((8 * 4) << 18), (3, 18));
        let (s, b) = p.geometry(1000);
        assert_eq!(s, 0);
        assert!(1000.0 / (1u64 << b) as f64 <= 4.0);
    }

    #[test]
    fn built_db_contains_exactly_the_tokens() {
        let mut r = rng(2);
        let key = ServerKeyState::generate(1, &mut r);
        let tokens: Vec<Token> = (0..500).map(|_| Token::random(&mut r)).collect();
        let cfg = small_config();
        let store = build_day(&tokens, &key, &cfg, 7).unwrap();
        assert_eq!(store.token_count, 500);
        let trunc = cfg.truncation().unwrap();
        for t in &tokens {
            let tt = truncate(&hash_to_group(t.as_bytes()).pow(key.exponent()), &trunc);
            assert!(store.contains(&tt).unwrap());
        }
        let absent = (0..500)
            .filter(|_| {
                store.contains(&truncate(&hash_to_group(&Token::random(&mut r).0).pow(key.exponent()), &trunc)).unwrap()
            })
            .count();
        assert_eq!(absent, 0);
    }

    #[test]
    fn build_is_order_independent_and_dedups() {
        let mut r = rng(3);
        let key = ServerKeyState::generate(1, &mut r);
        let tokens: Vec<Token> = (0..200).map(|_| Token::random(&mut r)).collect();
        let mut rev = tokens.clone();
        rev.reverse();
        rev.extend_from_slice(&tokens[..10]);
        let a = build_day(&tokens, &key, &small_config(), 1).unwrap();
        let b = build_day(&rev, &key, &small_config(), 1).unwrap();
        assert_eq!(a.info().digest, b.info().digest);
        assert_eq!(b.token_count, 200);
    }

    #[test]
    fn parallel_build_matches_sequential() {
        let mut r = rng(4);
        let key = ServerKeyState::generate(1, &mut r);
        let tokens: Vec<Token> = (0..300).map(|_| Token::random(&mut r)).collect();
        let seq = build_day(&tokens, &key, &small_config(), 1).unwrap();
        let par =
            build_day(&tokens, &key, &BuildConfig { parallelism: Parallelism::Rayon, ..small_config() }, 1).unwrap();
        assert_eq!(seq.info(), par.info());
    }

    #[test]
    fn slot_cap_enforced() {
        let mut r = rng(5);
        let key = ServerKeyState::generate(1, &mut r);
        let tokens: Vec<Token> = (0..64).map(|_| Token::random(&mut r)).collect();
        let cfg = BuildConfig {
            layout: LayoutPolicy::Fixed { shard_bits: 0, bucket_bits: 1, slots: None },
            max_slots: 8,
            ..small_config()
        };
        assert!(matches!(build_day(&tokens, &key, &cfg, 1), Err(DbError::SlotCap { cap: 8, .. })));
        let fixed = BuildConfig {
            layout: LayoutPolicy::Fixed { shard_bits: 0, bucket_bits: 1, slots: Some(2) },
            ..small_config()
        };
        assert!(matches!(build_day(&tokens, &key, &fixed, 1), Err(DbError::SlotCap { cap: 2, .. })));
    }

    #[test]
    fn empty_day_builds() {
        let mut r = rng(6);
        let key = ServerKeyState::generate(1, &mut r);
        let s = build_day(&[], &key, &small_config(), 3).unwrap();
        assert_eq!(s.token_count, 0);
        assert_eq!(s.layout.slots, 1);
    }
}
