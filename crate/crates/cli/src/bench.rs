use std::time::Instant;

use anyhow::Result;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use epione::group::{hash_to_group, truncate, GroupElement};
use epione::par::Parallelism;
use epione::pir;
use epione::psica::{server_transform, ServerKeyState, ServerPolicy};
use epione::serverdb::{build_day, BuildConfig};
use epione::tokens::Token;

#[derive(Args)]
pub struct BenchArgs {
    /// Database size in tokens.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    /// Client tokens per query batch.
    #[arg(long, default_value_t = 256)]
    queries: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn time<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

pub fn run(a: BenchArgs) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let tokens: Vec<Token> = (0..a.n).map(|_| Token::random(&mut rng)).collect();
    let key = ServerKeyState::generate(1, &mut rng);
    let policy = ServerPolicy { min_batch: 1, ..ServerPolicy::default() };

    println!("{:<22} {:>12} {:>12} {:>8}", "stage", "sequential_s", "parallel_s", "speedup");
    let row = |name: &str, seq: f64, par: f64| println!("{name:<22} {seq:>12.3} {par:>12.3} {:>8.2}", seq / par);

    let build = |p: Parallelism| {
        let cfg = BuildConfig { parallelism: p, ..BuildConfig::default() };
        time(|| build_day(&tokens, &key, &cfg, 1))
    };
    let (s, seq) = build(Parallelism::Sequential);
    let (_, par) = build(Parallelism::Rayon);
    let store = s?;
    row(&format!("build n={}", a.n), seq, par);
    let layout = store.layout;

    let client: Vec<GroupElement> = (0..a.queries as u32).map(|i| hash_to_group(&i.to_le_bytes())).collect();
    let transform = |p: Parallelism, rng: &mut ChaCha20Rng| time(|| server_transform(&client, &key, &policy, rng, p));
    let (_, seq) = transform(Parallelism::Sequential, &mut rng);
    let (_, par) = transform(Parallelism::Rayon, &mut rng);
    row(&format!("transform m={}", a.queries), seq, par);

    let trunc = BuildConfig::default().truncation()?;
    let tts: Vec<_> = client.iter().map(|e| truncate(&e.pow(key.exponent()), &trunc)).collect();
    let prepared = pir::prepare_queries(&tts, &layout, &mut rng)?;
    let (_, seq) = time(|| pir::answer_batch(&prepared.server1, &store.shards, Parallelism::Sequential));
    let (_, par) = time(|| pir::answer_batch(&prepared.server1, &store.shards, Parallelism::Rayon));
    row(&format!("pir answer m={}", a.queries), seq, par);

    println!(
        "layout: token_bits={} shards=2^{} buckets=2^{} slots={} size={} bytes",
        layout.token_bits,
        layout.shard_bits,
        layout.bucket_bits,
        layout.slots,
        store.size_bytes()
    );
    Ok(())
}
