use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use alt_core::eval::{dist_n, DistDenominator};
use alt_core::feedback::map_rewards_to_quantiles;
use alt_core::model::{forward, init_params, sample_many, ModelConfig, Parameters, SamplerConfig};
use alt_core::rng::Rng;
use alt_core::trainer::{loss_and_grads, LossConfig, TrainBatch, TrainRow};
use alt_core::vocab::TokenId;

/// Default desk model over a 60-token vocabulary.
fn desk_model() -> Parameters {
    init_params(
        &ModelConfig {
            vocab_size: 60,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 40,
            dropout: 0.0,
        },
        1,
    )
    .unwrap()
}

fn tokens(rng: &mut Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.below(56) as TokenId).collect()
}

fn bench_forward(c: &mut Criterion) {
    let p = desk_model();
    let seq = tokens(&mut Rng::new(1), 32);
    c.bench_function("forward/32 tokens", |b| b.iter(|| forward(&p, black_box(&seq)).unwrap()));
}

fn bench_loss_and_grads(c: &mut Criterion) {
    let p = desk_model();
    let reference = p.clone();
    let mut rng = Rng::new(2);
    let rows: Vec<TrainRow> = (0..16)
        .map(|_| {
            let mut t = tokens(&mut rng, 3);
            t.push(57);
            t.extend(tokens(&mut rng, 28));
            TrainRow {
                tokens: t,
                context_len: 4,
                prompt_len: 8,
                gen_len: 20,
            }
        })
        .collect();
    let batch = TrainBatch::new(&rows, 58, 40).unwrap();
    let cfg = LossConfig::default();
    c.bench_function("loss_and_grads/16 rows", |b| {
        b.iter(|| loss_and_grads(&p, Some(&reference), black_box(&batch), &cfg, None).unwrap())
    });
}

fn bench_sampling(c: &mut Criterion) {
    let p = desk_model();
    let prefix = tokens(&mut Rng::new(3), 12);
    let cfg = SamplerConfig {
        top_p: 0.9,
        max_new_tokens: 20,
        min_new_tokens: 20,
        ..SamplerConfig::default()
    };
    let seeds: Vec<u64> = (0..16).collect();
    c.bench_function("sample_many/16 x 20 tokens", |b| {
        b.iter(|| sample_many(&p, black_box(&prefix), &cfg, &seeds, 59).unwrap())
    });
}

fn bench_quantiles(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    c.bench_function("map_rewards_to_quantiles/16", |b| {
        b.iter_batched(
            || (0..16).map(|_| rng.unit()).collect::<Vec<f64>>(),
            |r| map_rewards_to_quantiles(&r, 5).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let gens: Vec<Vec<TokenId>> = (0..25).map(|_| tokens(&mut rng, 20)).collect();
    c.bench_function("dist_n/25 x 20 tokens", |b| {
        b.iter(|| dist_n(black_box(&gens), 3, DistDenominator::Ngrams))
    });
}

criterion_group!(benches, bench_forward, bench_loss_and_grads, bench_sampling, bench_quantiles);
criterion_main!(benches);
