use alt_core::model::{init_params, ModelConfig, Parameters};
use alt_core::rng::Rng;
use alt_core::trainer::{evaluate_loss, loss_and_grads, KlDirection, LossConfig, TrainBatch, TrainRow};

fn random_params(c: &ModelConfig, seed: u64) -> Parameters {
    let mut p = init_params(c, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xabcdef);
    for t in p.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += 0.4 * rng.normal();
        }
    }
    p
}

fn random_batch(v: u32, seed: u64) -> TrainBatch {
    let mut rng = Rng::new(seed);
    let pad = v - 1;
    let sep = v - 2;
    let mut word = || rng.below(v as usize - 2) as u32;
    let mut rows = Vec::new();
    for (fb, prompt, gen) in [(2usize, 2usize, 3usize), (1, 0, 2), (0, 1, 3)] {
        let mut tokens: Vec<u32> = (0..fb).map(|_| word()).collect();
        if fb > 0 {
            tokens.push(sep);
        }
        tokens.extend((0..prompt + gen).map(|_| word()));
        rows.push(TrainRow {
            tokens,
            context_len: if fb > 0 { fb + 1 } else { 0 },
            prompt_len: prompt,
            gen_len: gen,
        });
    }
    TrainBatch::new(&rows, pad, 12).unwrap()
}

/// Below this magnitude on both sides a gradient entry is exactly zero up to
/// rounding (e.g. attention key biases), where relative error is undefined.
const ZERO_GRADIENT: f64 = 1e-8;

/// Largest elementwise |analytic - numeric| / max(|analytic|, |numeric|),
/// with central differences at step `h`.
fn max_relative_error(params: &Parameters, reference: &Parameters, batch: &TrainBatch, cfg: &LossConfig, h: f64) -> f64 {
    let (_, analytic) = loss_and_grads(params, Some(reference), batch, cfg, None).unwrap();
    let analytic = analytic.flatten();
    let n = analytic.len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let perturbed = |delta: f64| {
            let mut p = params.clone();
            let mut k = i;
            for t in p.tensors_mut() {
                if k < t.data.len() {
                    t.data[k] += delta;
                    break;
                }
                k -= t.data.len();
            }
            evaluate_loss(&p, Some(reference), batch, cfg).unwrap().loss
        };
        let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        if scale < ZERO_GRADIENT {
            continue;
        }
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

fn check(c: ModelConfig, seeds: &[u64], direction: KlDirection) {
    for &seed in seeds {
        let p = random_params(&c, seed);
        let r = random_params(&c, seed + 100);
        let batch = random_batch(c.vocab_size as u32, seed);
        let cfg = LossConfig {
            beta: 0.7,
            alpha: 0.3,
            kl_direction: direction,
        };
        let err = max_relative_error(&p, &r, &batch, &cfg, 1e-4);
        assert!(err < 1e-3, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn tiny_model_v5_d4() {
    let c = ModelConfig {
        vocab_size: 5,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 12,
        dropout: 0.0,
    };
    check(c, &[1, 2, 3], KlDirection::RefToPolicy);
}

#[test]
fn reverse_kl_and_two_layers() {
    let c = ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 12,
        dropout: 0.0,
    };
    check(c, &[4, 5], KlDirection::PolicyToRef);
}
