use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::net::{LocalTransport, RemoteServer};
use crate::psica::{PsiError, ServerPolicy};
use crate::serverdb::BuildConfig;
use crate::tokens::TokenSchedule;

fn small() -> SimConfig {
    SimConfig {
        population: 12,
        days: 5,
        contacts_per_day: 3,
        diagnoses: 3,
        first_diagnosis_day: 2,
        slots_per_day: 8,
        window_days: 4,
        retention_days: 5,
        keep_frames: true,
        ..SimConfig::default()
    }
}

#[test]
fn key_file_round_trip() {
    let mut r = ChaCha20Rng::seed_from_u64(1);
    let mut s = Server1Secrets::generate(3, &mut r);
    let json = serde_json::to_string(&s).unwrap();
    let back: Server1Secrets = serde_json::from_str(&json).unwrap();
    assert_eq!(back.key_state().unwrap().exponent(), s.key_state().unwrap().exponent());
    assert_eq!(back.public().unwrap().upload_public().unwrap(), s.upload_keys().unwrap().public);
    assert_eq!(back.server2().sync_credential().unwrap(), s.sync_credential().unwrap());
    s.rotate(&mut r);
    assert_eq!(s.key_state().unwrap().epoch_id(), 4);
    assert_ne!(s.exponent, back.exponent);
    s.exponent = "00".repeat(32);
    assert!(s.key_state().is_err());
}

#[test]
fn simulation_matches_ground_truth() {
    let out = simulate(&small(), 7).unwrap();
    let r = &out.report;
    assert_eq!(r.failed_sessions, 0, "{:#?}", r.lines);
    assert_eq!(r.mismatches, 0);
    assert!(r.exposed_clients > 0, "seed produced no exposure");
    assert_eq!((r.false_alerts, r.missed_alerts), (0, 0));
    assert!(dataflow_check(&out).is_empty(), "{:?}", dataflow_check(&out));
}

#[test]
fn simulation_is_reproducible() {
    let a = simulate(&small(), 3).unwrap().report;
    let b = simulate(&small(), 3).unwrap().report;
    let c = simulate(&small(), 4).unwrap().report;
    assert_eq!(a.lines, b.lines);
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn tcp_and_local_runs_agree() {
    let cfg = SimConfig { population: 6, days: 3, keep_frames: false, ..small() };
    let local = simulate(&cfg, 11).unwrap().report;
    let tcp = simulate(&SimConfig { transport: TransportKind::Tcp, ..cfg }, 11).unwrap().report;
    assert_eq!(local.lines, tcp.lines);
    assert_eq!(local.upload_bytes, tcp.upload_bytes);
}

#[test]
fn offline_clients_catch_up() {
    let cfg = SimConfig { offline_probability: 0.5, days: 6, ..small() };
    let out = simulate(&cfg, 21).unwrap();
    assert!(out.report.lines.iter().any(|l| l.ends_with("offline")));
    assert!(out.report.lines.iter().any(|l| l.contains("days=[") && l.contains(", ")));
    assert_eq!((out.report.mismatches, out.report.failed_sessions), (0, 0));
}

#[test]
fn config_parsing_and_validation() {
    let c = SimConfig::from_toml("population = 5\ntransport = \"tcp\"\n").unwrap();
    assert_eq!((c.population, c.transport), (5, TransportKind::Tcp));
    assert!(SimConfig::from_toml("population = 1").is_err());
    assert!(SimConfig::from_toml("consent_probability = 1.5").is_err());
    assert!(SimConfig::from_toml("colour = 3").is_err());
}

fn deployment(r: &mut ChaCha20Rng) -> (Arc<Server1>, Arc<Server2>, Server1Secrets) {
    let secrets = Server1Secrets::generate(1, r);
    let config = Server1Config {
        schedule: TokenSchedule { slots_per_day: 4, window_days: 3 },
        build: BuildConfig { token_bits: Some(60), ..BuildConfig::default() },
        policy: ServerPolicy { min_batch: 1, queries_per_day: 2, ..ServerPolicy::default() },
        retention_days: 4,
        ..Server1Config::default()
    };
    let s1 = Server1::new(secrets.upload_keys().unwrap(), secrets.key_state().unwrap(), config);
    let s2 = Server2::new(4, None, Default::default());
    (Arc::new(s1), Arc::new(s2), secrets)
}

fn client_config() -> ClientConfig {
    ClientConfig {
        schedule: TokenSchedule { slots_per_day: 4, window_days: 3 },
        retention_days: 4,
        ..ClientConfig::default()
    }
}

#[test]
fn end_to_end_alert_and_rate_limit() {
    let mut r = ChaCha20Rng::seed_from_u64(5);
    let (s1, s2, _) = deployment(&mut r);
    let mut alice = ClientApp::new(client_config(), s1.public_key(), &mut r);
    let mut bob = ClientApp::new(client_config(), s1.public_key(), &mut r);
    alice.record(bob.sent_token(1, 2), 1);
    bob.record(alice.sent_token(1, 2), 1);

    let mut provider = Provider::new([bob.id]);
    assert_eq!(alice.diagnose(&mut provider, true, 1, &mut r), Err(ProviderError::NotVerified));
    assert!(bob.diagnose(&mut provider, true, 1, &mut r).unwrap());
    let (_, batch) = provider.flush(&mut r);
    s1.receive_batch(batch);
    let built = s1.end_of_day(1, Some(&*s2)).unwrap();
    // The window is clipped at day 0: days 0 and 1.
    assert_eq!((built.uploads_accepted, built.info.token_count), (1, 8));

    let link1 = RemoteServer::new(LocalTransport::new(s1.clone()));
    let link2 = RemoteServer::new(LocalTransport::new(s2.clone()));
    link1.authenticate(alice.id).unwrap();
    let days = link1.retained_days().unwrap();
    let out = alice.daily_query(1, &link1, &link2, &days, &mut r).unwrap();
    assert_eq!(out.result.cardinality, 1);
    assert!(alice.is_alerted(1) && alice.is_alerted(3) && !alice.is_alerted(4));

    // Already checked today: nothing to query.
    let again = alice.daily_query(1, &link1, &link2, &days, &mut r).unwrap();
    assert!(again.days_checked.is_empty());

    // Credential limit is per day on the server's clock.
    let mut carol = ClientApp::new(ClientConfig { caching: false, ..client_config() }, s1.public_key(), &mut r);
    carol.record(bob.sent_token(1, 0), 1);
    let carol_link = RemoteServer::new(LocalTransport::new(s1.clone()));
    carol_link.authenticate(alice.id).unwrap();
    carol.daily_query(1, &carol_link, &link2, &days, &mut r).unwrap();
    carol.set_last_query_day(None);
    assert_eq!(carol.daily_query(1, &carol_link, &link2, &days, &mut r), Err(PsiError::RateLimited));
}

#[test]
fn unauthenticated_transform_is_refused() {
    let mut r = ChaCha20Rng::seed_from_u64(6);
    let (s1, s2, _) = deployment(&mut r);
    s1.end_of_day(1, Some(&*s2)).unwrap();
    let mut c = ClientApp::new(client_config(), s1.public_key(), &mut r);
    c.record(crate::tokens::Token::random(&mut r), 1);
    let link1 = RemoteServer::new(LocalTransport::new(s1.clone()));
    let link2 = RemoteServer::new(LocalTransport::new(s2.clone()));
    assert!(matches!(c.daily_query(1, &link1, &link2, &[1], &mut r), Err(PsiError::Policy(_))));
}

#[test]
fn epoch_rotation_rebuilds_and_flushes_cache() {
    let mut r = ChaCha20Rng::seed_from_u64(8);
    let (s1, s2, mut secrets) = deployment(&mut r);
    let mut alice = ClientApp::new(client_config(), s1.public_key(), &mut r);
    let bob = ClientApp::new(client_config(), s1.public_key(), &mut r);
    alice.record(bob.sent_token(1, 1), 1);
    let mut provider = Provider::new([bob.id]);
    bob.diagnose(&mut provider, true, 1, &mut r).unwrap();
    s1.receive_batch(provider.flush(&mut r).1);
    s1.end_of_day(1, Some(&*s2)).unwrap();
    let before = s2.day_info(1).unwrap();

    secrets.rotate(&mut r);
    s1.rotate_epoch(secrets.key_state().unwrap(), Some(&*s2)).unwrap();
    let after = s2.day_info(1).unwrap();
    assert_eq!(after.epoch_id, 2);
    assert_ne!(before.digest, after.digest);

    let link1 = RemoteServer::new(LocalTransport::new(s1.clone()));
    let link2 = RemoteServer::new(LocalTransport::new(s2.clone()));
    link1.authenticate(alice.id).unwrap();
    let out = alice.daily_query(1, &link1, &link2, &[1], &mut r).unwrap();
    assert_eq!((out.result.cardinality, out.blinded), (1, 1));
}

#[test]
fn server2_refuses_unauthorised_sync() {
    let mut r = ChaCha20Rng::seed_from_u64(9);
    let (s1, _, secrets) = deployment(&mut r);
    let s2 = Arc::new(Server2::new(4, Some(secrets.sync_credential().unwrap()), Default::default()));
    let replica = crate::net::RemoteReplica(LocalTransport::new(s2.clone()));
    assert!(s1.end_of_day(1, Some(&replica)).is_err());
    assert!(s2.retained_days().is_empty());
}

#[test]
fn diagnosed_user_keeps_querying_without_self_alert() {
    let mut r = ChaCha20Rng::seed_from_u64(12);
    let (s1, s2, _) = deployment(&mut r);
    let alice = ClientApp::new(client_config(), s1.public_key(), &mut r);
    let mut bob = ClientApp::new(client_config(), s1.public_key(), &mut r);
    bob.record(alice.sent_token(1, 1), 1);

    let mut provider = Provider::new([alice.id, bob.id]);
    assert!(bob.diagnose(&mut provider, true, 1, &mut r).unwrap());
    s1.receive_batch(provider.flush(&mut r).1);
    s1.end_of_day(1, Some(&*s2)).unwrap();

    let link1 = RemoteServer::new(LocalTransport::new(s1.clone()));
    let link2 = RemoteServer::new(LocalTransport::new(s2.clone()));
    link1.authenticate(bob.id).unwrap();
    // Bob's own sent tokens are in the database, but his query uses what he received.
    assert_eq!(bob.daily_query(1, &link1, &link2, &[1], &mut r).unwrap().result.cardinality, 0);
    assert!(!bob.is_alerted(1));

    assert!(alice.diagnose(&mut provider, true, 2, &mut r).unwrap());
    s1.receive_batch(provider.flush(&mut r).1);
    s1.end_of_day(2, Some(&*s2)).unwrap();
    assert_eq!(bob.daily_query(2, &link1, &link2, &[1, 2], &mut r).unwrap().result.cardinality, 1);
}

#[test]
fn two_meetings_count_twice_and_refusal_uploads_nothing() {
    let mut r = ChaCha20Rng::seed_from_u64(10);
    let (s1, s2, _) = deployment(&mut r);
    let mut alice = ClientApp::new(client_config(), s1.public_key(), &mut r);
    let bob = ClientApp::new(client_config(), s1.public_key(), &mut r);
    let dave = ClientApp::new(client_config(), s1.public_key(), &mut r);
    alice.record(bob.sent_token(1, 0), 1);
    alice.record(bob.sent_token(1, 3), 1);
    alice.record(dave.sent_token(1, 1), 1);

    let mut provider = Provider::new([bob.id, dave.id]);
    assert!(bob.diagnose(&mut provider, true, 1, &mut r).unwrap());
    assert!(!dave.diagnose(&mut provider, false, 1, &mut r).unwrap());
    assert_eq!(provider.pending(), 1);
    s1.receive_batch(provider.flush(&mut r).1);
    s1.end_of_day(1, Some(&*s2)).unwrap();

    let link1 = RemoteServer::new(LocalTransport::new(s1.clone()));
    let link2 = RemoteServer::new(LocalTransport::new(s2.clone()));
    link1.authenticate(alice.id).unwrap();
    assert_eq!(alice.daily_query(1, &link1, &link2, &[1], &mut r).unwrap().result.cardinality, 2);
}

#[test]
fn provider_shuffles_batches() {
    let mut r = ChaCha20Rng::seed_from_u64(11);
    let pk = crate::group::GroupElement::generator();
    let users: Vec<ClientApp> = (0..3).map(|_| ClientApp::new(client_config(), pk, &mut r)).collect();
    let mut reordered = 0;
    for _ in 0..20 {
        let mut provider = Provider::new(users.iter().map(|u| u.id));
        let sealed: Vec<_> = users.iter().map(|u| u.diagnosis_payload(true, 1, &mut r).unwrap()).collect();
        for (u, s) in users.iter().zip(&sealed) {
            provider.submit(u.id, s.clone()).unwrap();
        }
        let (_, out) = provider.flush(&mut r);
        let mut sorted_in = sealed.iter().map(|s| s.0).collect::<Vec<_>>();
        let mut sorted_out = out.iter().map(|s| s.0).collect::<Vec<_>>();
        reordered += (sorted_in != sorted_out) as usize;
        sorted_in.sort();
        sorted_out.sort();
        assert_eq!(sorted_in, sorted_out);
    }
    assert!(reordered > 0);
}

#[test]
fn no_diagnoses_no_alerts() {
    let out = simulate(&SimConfig { diagnoses: 0, keep_frames: false, ..small() }, 2).unwrap();
    assert_eq!((out.report.alerted_clients, out.report.exposed_clients, out.report.mismatches), (0, 0, 0));
    assert!(out.report.lines.iter().filter(|l| l.starts_with("query")).all(|l| l.contains("cardinality=0")));
}

#[test]
fn colocated_provider_gives_same_results() {
    let cfg = SimConfig { keep_frames: false, ..small() };
    let apart = simulate(&cfg, 13).unwrap();
    let together = simulate(&SimConfig { colocated_provider: true, ..cfg }, 13).unwrap();
    let db = |o: &SimOutput| o.report.lines.iter().filter(|l| l.starts_with("db ")).cloned().collect::<Vec<_>>();
    assert_eq!(db(&apart), db(&together));
    assert_eq!(apart.report.alerted_clients, together.report.alerted_clients);
    assert!(!together.server1_traffic.entries().iter().any(|e| e.name == "M5"));
}

#[test]
fn session_message_order() {
    let mut r = ChaCha20Rng::seed_from_u64(12);
    let (s1, s2, _) = deployment(&mut r);
    s1.end_of_day(1, Some(&*s2)).unwrap();
    let mut c = ClientApp::new(client_config(), s1.public_key(), &mut r);
    c.record(crate::tokens::Token::random(&mut r), 1);
    let t = crate::net::Transcript::new();
    let link1 = RemoteServer::new(LocalTransport::new(s1.clone()).with_transcript(t.clone(), "server1"));
    let link2 = RemoteServer::new(LocalTransport::new(s2.clone()).with_transcript(t.clone(), "server2"));
    link1.authenticate(c.id).unwrap();
    c.daily_query(1, &link1, &link2, &[1], &mut r).unwrap();
    let order: Vec<(&str, String)> =
        t.entries().iter().filter(|e| e.name.starts_with('M')).map(|e| (e.name, e.peer.clone())).collect();
    let want = [
        ("M1", "server1"),
        ("M2", "server1"),
        ("M3", "server1"),
        ("M3", "server2"),
        ("M4", "server1"),
        ("M4", "server2"),
    ];
    assert_eq!(order, want.map(|(a, b)| (a, b.to_string())).to_vec());
}
