use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DbError;
use crate::group::TransformedToken;
use crate::pir::{bucket_contains, DbLayout, Shard};
use crate::psica::DayInfo;

pub const DEFAULT_RETENTION_DAYS: u32 = 15;

/// One day's database: every shard plus the public description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DayStore {
    pub day: u32,
    pub epoch_id: u32,
    pub layout: DbLayout,
    pub token_count: u64,
    pub shards: Vec<Shard>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestShard {
    pub id: u16,
    pub file: String,
    pub digest: String,
}

/// `manifest.json` in a day directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub day: u32,
    pub epoch_id: u32,
    pub layout: DbLayout,
    pub token_count: u64,
    pub digest: String,
    pub shards: Vec<ManifestShard>,
}

fn day_digest(day: u32, epoch_id: u32, layout: &DbLayout, token_count: u64, shard_digests: &[[u8; 32]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"epione/v1/day-digest");
    h.update(day.to_le_bytes());
    h.update(epoch_id.to_le_bytes());
    h.update(layout.token_bits.to_le_bytes());
    h.update([layout.shard_bits, layout.bucket_bits, layout.slots]);
    h.update(token_count.to_le_bytes());
    for d in shard_digests {
        h.update(d);
    }
    h.finalize().into()
}

impl DayStore {
    pub fn new(day: u32, epoch_id: u32, layout: DbLayout, token_count: u64, shards: Vec<Shard>) -> Self {
        DayStore { day, epoch_id, layout, token_count, shards }
    }

    pub fn info(&self) -> DayInfo {
        let digests: Vec<[u8; 32]> = self.shards.iter().map(Shard::digest).collect();
        DayInfo {
            day: self.day,
            epoch_id: self.epoch_id,
            layout: self.layout,
            token_count: self.token_count,
            digest: day_digest(self.day, self.epoch_id, &self.layout, self.token_count, &digests),
        }
    }

    /// Direct (non-private) lookup, for tests and diagnostics.
    pub fn contains(&self, tt: &TransformedToken) -> Result<bool, DbError> {
        let a = self.layout.address(tt)?;
        let shard = &self.shards[a.shard as usize];
        Ok(bucket_contains(shard.bucket(a.bucket as usize), &self.layout, &a.remainder)?)
    }

    pub fn size_bytes(&self) -> usize {
        self.shards.len() * self.layout.shard_payload_len()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            day: self.day,
            epoch_id: self.epoch_id,
            layout: self.layout,
            token_count: self.token_count,
            digest: hex::encode(self.info().digest),
            shards: self
                .shards
                .iter()
                .map(|s| ManifestShard {
                    id: s.shard_id(),
                    file: format!("shard-{:04}.bin", s.shard_id()),
                    digest: hex::encode(s.digest()),
                })
                .collect(),
        }
    }

    /// Write `manifest.json` and one file per shard into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), DbError> {
        fs::create_dir_all(dir)?;
        for s in &self.shards {
            fs::write(dir.join(format!("shard-{:04}.bin", s.shard_id())), s.to_bytes())?;
        }
        let m = serde_json::to_vec_pretty(&self.manifest()).map_err(|e| DbError::Manifest(e.to_string()))?;
        fs::write(dir.join("manifest.json"), m)?;
        Ok(())
    }

    /// Load and verify a day directory written by [`DayStore::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self, DbError> {
        let raw = fs::read(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_slice(&raw).map_err(|e| DbError::Manifest(e.to_string()))?;
        m.layout.validate()?;
        if m.shards.len() != m.layout.n_shards() {
            return Err(DbError::Manifest(format!(
                "{} shard entries for {} shards",
                m.shards.len(),
                m.layout.n_shards()
            )));
        }
        let mut shards = Vec::with_capacity(m.shards.len());
        for (i, e) in m.shards.iter().enumerate() {
            if e.id as usize != i || e.file.contains('/') || e.file.contains("..") {
                return Err(DbError::Manifest(format!("bad shard entry {i}")));
            }
            let s = Shard::from_bytes(&fs::read(dir.join(&e.file))?)?;
            if hex::encode(s.digest()) != e.digest {
                return Err(DbError::Digest(e.file.clone()));
            }
            if *s.layout() != m.layout || s.shard_id() != e.id || s.day() != m.day {
                return Err(DbError::Manifest(format!("{} header disagrees with manifest", e.file)));
            }
            shards.push(s);
        }
        let store = DayStore::new(m.day, m.epoch_id, m.layout, m.token_count, shards);
        if hex::encode(store.info().digest) != m.digest {
            return Err(DbError::Digest("manifest.json".into()));
        }
        Ok(store)
    }
}

/// Days retained by a PIR server.
#[derive(Debug, Clone)]
pub struct DayIndex {
    retention_days: u32,
    days: BTreeMap<u32, (Arc<DayStore>, DayInfo)>,
}

impl Default for DayIndex {
    fn default() -> Self {
        DayIndex::new(DEFAULT_RETENTION_DAYS)
    }
}

impl DayIndex {
    pub fn new(retention_days: u32) -> Self {
        assert!(retention_days > 0);
        DayIndex { retention_days, days: BTreeMap::new() }
    }

    pub fn retention_days(&self) -> u32 {
        self.retention_days
    }

    /// Insert or replace a day, then drop days that fell out of retention
    /// relative to the newest day held.
    pub fn insert(&mut self, store: DayStore) {
        let info = store.info();
        self.days.insert(store.day, (Arc::new(store), info));
        let newest = *self.days.keys().next_back().unwrap();
        self.expire(newest);
    }

    /// Keep days in `current + 1 - retention ..= current`.
    pub fn expire(&mut self, current_day: u32) {
        let min = (current_day + 1).saturating_sub(self.retention_days);
        self.days.retain(|d, _| *d >= min);
    }

    pub fn get(&self, day: u32) -> Option<Arc<DayStore>> {
        self.days.get(&day).map(|(s, _)| s.clone())
    }

    /// Public description, computed once at insertion.
    pub fn info(&self, day: u32) -> Option<&DayInfo> {
        self.days.get(&day).map(|(_, i)| i)
    }

    pub fn days(&self) -> Vec<u32> {
        self.days.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

/// Where server 1 pushes a finished database. Returns the digest the replica
/// computed over what it stored.
pub trait ReplicaSink {
    fn install(&self, store: &DayStore) -> Result<[u8; 32], String>;
}

/// Push `store` to the replica and check it reports the same digest,
/// retrying up to `attempts` times.
pub fn publish(store: &DayStore, replica: &dyn ReplicaSink, attempts: u32) -> Result<(), DbError> {
    let want = store.info().digest;
    let mut reason = String::from("no attempts");
    for attempt in 1..=attempts.max(1) {
        match replica.install(store) {
            Ok(got) if got == want => {
                info!("day {} published on attempt {attempt}", store.day);
                return Ok(());
            }
            Ok(got) => reason = format!("digest {} != {}", hex::encode(got), hex::encode(want)),
            Err(e) => reason = e,
        }
        warn!("publishing day {} failed: {reason}", store.day);
    }
    Err(DbError::Publish { attempts: attempts.max(1), reason })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psica::ServerKeyState;
    use crate::serverdb::{build_day, BuildConfig};
    use crate::tokens::Token;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::cell::Cell;

    fn store(day: u32, n: usize) -> DayStore {
        let mut r = ChaCha20Rng::seed_from_u64(day as u64);
        let key = ServerKeyState::generate(1, &mut r);
        let tokens: Vec<Token> = (0..n).map(|_| Token::random(&mut r)).collect();
        let cfg = BuildConfig { token_bits: Some(48), ..BuildConfig::default() };
        build_day(&tokens, &key, &cfg, day).unwrap()
    }

    #[test]
    fn dir_round_trip_and_tamper() {
        let s = store(4, 100);
        let dir = tempfile::tempdir().unwrap();
        s.write_dir(dir.path()).unwrap();
        assert_eq!(DayStore::read_dir(dir.path()).unwrap(), s);

        let f = dir.path().join("shard-0000.bin");
        let mut bytes = fs::read(&f).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(DayStore::read_dir(dir.path()), Err(DbError::Digest(_))));
    }

    #[test]
    fn retention_window() {
        let mut idx = DayIndex::new(3);
        for d in 1..=5 {
            idx.insert(store(d, 4));
        }
        assert_eq!(idx.days(), vec![3, 4, 5]);
        assert!(idx.get(2).is_none());
        idx.expire(6);
        assert_eq!(idx.days(), vec![4, 5]);
    }

    struct Flaky {
        fail_first: Cell<u32>,
    }

    impl ReplicaSink for Flaky {
        fn install(&self, store: &DayStore) -> Result<[u8; 32], String> {
            if self.fail_first.get() > 0 {
                self.fail_first.set(self.fail_first.get() - 1);
                return Ok([0; 32]);
            }
            Ok(store.info().digest)
        }
    }

    #[test]
    fn publish_retries_on_mismatch() {
        let s = store(1, 10);
        publish(&s, &Flaky { fail_first: Cell::new(2) }, 3).unwrap();
        assert!(matches!(
            publish(&s, &Flaky { fail_first: Cell::new(5) }, 3),
            Err(DbError::Publish { attempts: 3, .. })
        ));
    }
}
