use std::io::Write;

use serde::{Deserialize, Serialize};

use super::batch::{TrainBatch, TrainRow};
use super::loss::{loss_and_grads, LossConfig};
use super::optim::{adam_step, OptimizerState, ScheduleConfig};
use crate::error::{AltError, Result};
use crate::model::Parameters;
use crate::rng::{derive_seed, Rng};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pad: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
}

impl TrainReport {
    pub fn mean_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.loss).sum::<f64>() / self.steps.len().max(1) as f64
    }
}

/// `epochs` passes over `rows` in seeded shuffled order, one Adam step per
/// batch. The KL term is active only when `ref_params` is given. Each step's
/// metrics are also written as a JSON line to `log` when present.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration(
    params: &mut Parameters,
    ref_params: Option<&Parameters>,
    rows: &[TrainRow],
    loss_cfg: &LossConfig,
    opt: &mut OptimizerState,
    schedule: &ScheduleConfig,
    options: &TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if rows.is_empty() {
        return Err(AltError::validation("no training entries"));
    }
    if options.batch_size == 0 {
        return Err(AltError::validation("batch_size must be at least 1"));
    }
    loss_cfg.validate()?;
    let dropout = params.config.dropout > 0.0;
    let mut report = TrainReport::default();
    for epoch in 0..options.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        Rng::new(derive_seed(options.seed, &[epoch as u64])).shuffle(&mut order);
        for chunk in order.chunks(options.batch_size) {
            let picked: Vec<TrainRow> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let batch = TrainBatch::new(&picked, options.pad, params.config.max_seq_len)?;
            let step = opt.t;
            let with_step = |e: AltError| match e {
                AltError::Numeric { context, detail } => AltError::Numeric {
                    context: format!("{context} at step {step}"),
                    detail,
                },
                other => other,
            };
            let dropout_seed = dropout.then(|| derive_seed(options.seed, &[u64::MAX, step]));
            let (b, grads) = loss_and_grads(params, ref_params, &batch, loss_cfg, dropout_seed).map_err(with_step)?;
            let grad_norm = grads.l2_norm();
            let lr = adam_step(opt, params, &grads, schedule).map_err(with_step)?;
            let m = StepMetrics {
                step,
                lr,
                loss: b.loss,
                nll: b.nll,
                kl: b.kl,
                entropy: -b.neg_entropy,
                grad_norm,
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(w, "{line}").map_err(|e| AltError::io("training log", e))?;
            }
            report.steps.push(m);
        }
    }
    Ok(report)
}
