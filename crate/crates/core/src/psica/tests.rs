use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::group::{hash_to_group, Scalar};
use crate::par::Parallelism;
use crate::serverdb::{build_day, BuildConfig, DayStore};

fn rng(s: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(s)
}

fn tokens(n: usize, r: &mut ChaCha20Rng) -> Vec<Token> {
    (0..n).map(|_| Token::random(r)).collect()
}

fn test_policy() -> ServerPolicy {
    ServerPolicy { min_batch: 1, ..ServerPolicy::default() }
}

struct Server<'a> {
    key: Option<&'a ServerKeyState>,
    store: &'a DayStore,
    policy: ServerPolicy,
    pending: std::sync::Mutex<Vec<Vec<PirAnswer>>>,
}

fn server<'a>(key: Option<&'a ServerKeyState>, store: &'a DayStore) -> Server<'a> {
    Server { key, store, policy: test_policy(), pending: Default::default() }
}

impl PsiServer for Server<'_> {
    fn day_info(&self, day: u32) -> Result<DayInfo, PsiError> {
        if day != self.store.day {
            return Err(PsiError::UnknownDay(day));
        }
        Ok(self.store.info())
    }

    fn transform(
        &self,
        session: &SessionId,
        _day: u32,
        blinded: &[GroupElement],
        proof: Option<&BatchProofBundle>,
    ) -> Result<Vec<GroupElement>, PsiError> {
        let key = self.key.ok_or(PsiError::Unsupported("transform"))?;
        if let Some(p) = proof {
            if !verify_batch_consistency(p, blinded) {
                return Err(PsiError::BadBatchProof);
            }
        }
        server_transform(blinded, key, &self.policy, &mut key.session_rng(session), Parallelism::Sequential)
    }

    fn submit_queries(&self, _session: &SessionId, day: u32, queries: &[PirQuery]) -> Result<(), PsiError> {
        if day != self.store.day {
            return Err(PsiError::UnknownDay(day));
        }
        let a = pir::answer_batch(queries, &self.store.shards, Parallelism::Sequential)?;
        self.pending.lock().unwrap().push(a);
        Ok(())
    }

    fn collect_answers(&self, _session: &SessionId) -> Result<Vec<PirAnswer>, PsiError> {
        Ok(self.pending.lock().unwrap().remove(0))
    }
}

fn setup(db: &[Token], day: u32, r: &mut ChaCha20Rng) -> (ServerKeyState, DayStore) {
    let key = ServerKeyState::generate(1, r);
    let cfg = BuildConfig { token_bits: Some(60), parallelism: Parallelism::Sequential, ..BuildConfig::default() };
    let store = build_day(db, &key, &cfg, day).unwrap();
    (key, store)
}

fn run(db: &[Token], client: &[Token], config: PsiConfig, seed: u64) -> PsiOutcome {
    let mut r = rng(seed);
    let (key, store) = setup(db, 5, &mut r);
    let s1 = server(Some(&key), &store);
    let s2 = server(None, &store);
    let mut state = ClientQueryState::new(false, &mut r);
    psi_ca(client, &mut state, &s1, &s2, 5, &config, &mut r).unwrap()
}

#[test]
fn blinding_cancels() {
    let mut r = rng(1);
    let y = hash_to_group(b"token");
    let k = Scalar::random_nonzero(&mut r);
    let rr = Scalar::random_nonzero(&mut r);
    let m = y.pow(&rr).pow(&k);
    assert_eq!(m.pow(&rr.invert().unwrap()), y.pow(&k));
}

#[test]
fn small_example_counts_intersection() {
    let mut r = rng(2);
    let [a, b, c, d] = [(); 4].map(|_| Token::random(&mut r));
    assert_eq!(run(&[a, b, c], &[b, d], PsiConfig::default(), 3).cardinality, 1);
    assert_eq!(run(&[a, b, c], &[a, b, c, d], PsiConfig::default(), 4).cardinality, 3);
    assert_eq!(run(&[a], &[d], PsiConfig::default(), 5).cardinality, 0);
    assert_eq!(run(&[], &[d], PsiConfig::default(), 6).cardinality, 0);
}

#[test]
fn duplicates_count_once_and_padding_is_neutral() {
    let mut r = rng(7);
    let db = tokens(50, &mut r);
    let mut client = db[..5].to_vec();
    client.extend_from_slice(&db[..5]);
    client.extend(tokens(3, &mut r));
    let plain = run(&db, &client, PsiConfig::default(), 8);
    assert_eq!(plain.cardinality, 5);
    assert_eq!(plain.blinded, 8);
    let padded = run(&db, &client, PsiConfig { pad_to: Some(32), batch_proof: true }, 9);
    assert_eq!(padded.cardinality, 5);
    assert_eq!(padded.blinded, 32);
}

#[test]
fn matches_dh_psi_oracle() {
    let mut r = rng(10);
    let db = tokens(300, &mut r);
    let mut client = tokens(40, &mut r);
    client.extend_from_slice(&db[100..117]);
    let oracle = dh_psi_oracle(&db, &client, &mut r).len();
    assert_eq!(oracle, 17);
    assert_eq!(run(&db, &client, PsiConfig::default(), 11).cardinality, oracle);
}

#[test]
fn transform_is_multiset_of_powers() {
    let mut r = rng(12);
    let key = ServerKeyState::generate(1, &mut r);
    let input: Vec<GroupElement> = (0..20u32).map(|i| hash_to_group(&i.to_le_bytes())).collect();
    let out = server_transform(&input, &key, &test_policy(), &mut r, Parallelism::Sequential).unwrap();
    let mut want: Vec<[u8; 32]> = input.iter().map(|e| e.pow(key.exponent()).to_bytes()).collect();
    let mut got: Vec<[u8; 32]> = out.iter().map(|e| e.to_bytes()).collect();
    want.sort();
    got.sort();
    assert_eq!(want, got);
}

#[test]
fn permutation_is_uniform_on_three() {
    let mut r = rng(13);
    let key = ServerKeyState::generate(1, &mut r);
    let input: Vec<GroupElement> = (0..3u32).map(|i| hash_to_group(&i.to_le_bytes())).collect();
    let powered: Vec<GroupElement> = input.iter().map(|e| e.pow(key.exponent())).collect();
    let runs = 6000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..runs {
        let out = server_transform(&input, &key, &test_policy(), &mut r, Parallelism::Sequential).unwrap();
        let perm: Vec<usize> = out.iter().map(|o| powered.iter().position(|p| p == o).unwrap()).collect();
        *counts.entry(perm).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = runs as f64 / 6.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 5 degrees of freedom; the 0.999 quantile is 20.5.
    assert!(chi2 < 20.5, "chi2 = {chi2}");
}

#[test]
fn reply_length_mismatch_is_protocol_error() {
    let mut r = rng(14);
    let mut st = ClientQueryState::new(false, &mut r);
    st.begin_session(1, &mut r);
    let b = st.blind(&tokens(3, &mut r));
    assert!(matches!(st.unblind_elements(&b[..2]), Err(PsiError::Protocol(_))));
}

#[test]
fn policy_rejects_small_and_empty_batches() {
    let mut r = rng(15);
    let key = ServerKeyState::generate(1, &mut r);
    let p = ServerPolicy::default();
    let few: Vec<GroupElement> = (0..3u32).map(|i| hash_to_group(&i.to_le_bytes())).collect();
    assert!(matches!(server_transform(&few, &key, &p, &mut r, Parallelism::Sequential), Err(PsiError::Policy(_))));
    assert!(matches!(
        server_transform(&[], &key, &test_policy(), &mut r, Parallelism::Sequential),
        Err(PsiError::Policy(_))
    ));
}

#[test]
fn rate_limiter_counts_per_day() {
    let l = RateLimiter::default();
    let c = [7u8; 16];
    for _ in 0..2 {
        l.try_acquire(c, 1, 2).unwrap();
    }
    assert_eq!(l.try_acquire(c, 1, 2), Err(PsiError::RateLimited));
    l.try_acquire([8u8; 16], 1, 2).unwrap();
    l.try_acquire(c, 2, 2).unwrap();
}

#[test]
fn caching_reuses_values_within_epoch() {
    let mut r = rng(16);
    let db = tokens(40, &mut r);
    let (key, store) = setup(&db, 5, &mut r);
    let s1 = server(Some(&key), &store);
    let s2 = server(None, &store);
    let mut state = ClientQueryState::new(true, &mut r);
    let mut client = db[..4].to_vec();
    client.extend(tokens(4, &mut r));
    let first = psi_ca(&client, &mut state, &s1, &s2, 5, &PsiConfig::default(), &mut r).unwrap();
    assert_eq!((first.cardinality, first.blinded), (4, 8));
    client.push(db[10]);
    client.push(Token::random(&mut r));
    let second = psi_ca(&client, &mut state, &s1, &s2, 5, &PsiConfig::default(), &mut r).unwrap();
    assert_eq!((second.cardinality, second.blinded, second.queried), (5, 2, 10));
    assert_eq!(state.cache_groups(), 2);

    // A new epoch flushes everything.
    let key2 = ServerKeyState::generate(2, &mut r);
    let store2 = build_day(&db, &key2, &BuildConfig { token_bits: Some(60), ..BuildConfig::default() }, 5).unwrap();
    let s1 = server(Some(&key2), &store2);
    let s2 = server(None, &store2);
    let third = psi_ca(&client, &mut state, &s1, &s2, 5, &PsiConfig::default(), &mut r).unwrap();
    assert_eq!((third.cardinality, third.blinded), (5, 10));
}

#[test]
fn expiring_a_group_retransforms_survivors() {
    let mut r = rng(17);
    let mut st = ClientQueryState::new(true, &mut r);
    st.begin_session(1, &mut r);
    let t = tokens(4, &mut r);
    let vals = vec![GroupElement::generator(); 2];
    st.store(&t[..2], vals.clone(), 3);
    st.store(&t[2..], vals, 6);
    st.expire(4);
    assert_eq!(st.uncached(&t), t[..2].to_vec());
    assert_eq!(st.cache_groups(), 1);
}

#[test]
fn server_disagreement_detected() {
    let mut r = rng(18);
    let db = tokens(10, &mut r);
    let (key, store) = setup(&db, 5, &mut r);
    let (_, other) = setup(&tokens(10, &mut r), 5, &mut r);
    let s1 = server(Some(&key), &store);
    let s2 = server(None, &other);
    let mut state = ClientQueryState::new(false, &mut r);
    assert_eq!(
        psi_ca(&db, &mut state, &s1, &s2, 5, &PsiConfig::default(), &mut r),
        Err(PsiError::ServerDisagreement(5))
    );
}

#[test]
fn server2_cannot_transform() {
    let mut r = rng(19);
    let (_, store) = setup(&tokens(4, &mut r), 5, &mut r);
    let s2 = server(None, &store);
    let mut state = ClientQueryState::new(false, &mut r);
    assert_eq!(
        psi_ca(&tokens(2, &mut r), &mut state, &s2, &s2, 5, &PsiConfig::default(), &mut r),
        Err(PsiError::Unsupported("transform"))
    );
}
