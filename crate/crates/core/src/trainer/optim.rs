use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::model::{read_tensor_file, write_tensor_file, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

fn default_eps() -> f64 {
    1e-8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            eps: default_eps(),
            beta1: default_beta1(),
            beta2: default_beta2(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(AltError::validation(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Linear warmup from 0 to 1 over `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn constant() -> Self {
        Self {
            warmup_steps: 0,
            total_steps: u64::MAX,
        }
    }

    /// Warmup covering `ratio` of `total_steps`, rounded up.
    pub fn with_warmup_ratio(total_steps: u64, ratio: f64) -> Self {
        Self {
            warmup_steps: ((total_steps as f64) * ratio).ceil() as u64,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(AltError::validation("warmup_steps exceeds total_steps"));
        }
        Ok(())
    }

    pub fn factor(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            step as f64 / self.warmup_steps as f64
        } else if self.total_steps == u64::MAX {
            1.0
        } else {
            let span = (self.total_steps - self.warmup_steps).max(1);
            (self.total_steps.saturating_sub(step)) as f64 / span as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Parameters,
    pub v: Parameters,
    /// Completed steps.
    pub t: u64,
    pub config: AdamConfig,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: String,
    t: u64,
    config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &Parameters, config: AdamConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_value(OptimizerHeader {
            kind: "adam".into(),
            t: self.t,
            config: self.config,
        })
        .expect("header serializes");
        let mut tensors = Vec::new();
        for (prefix, p) in [("m", &self.m), ("v", &self.v)] {
            for t in p.tensors() {
                tensors.push((format!("{prefix}.{}", t.name), t.shape, t.data));
            }
        }
        write_tensor_file(path, &header, &tensors)
    }

    /// Load state saved by [`save`](Self::save); `params` supplies the shapes.
    pub fn load(path: &Path, params: &Parameters) -> Result<Self> {
        let (header, tensors) = read_tensor_file(path)?;
        let h: OptimizerHeader =
            serde_json::from_value(header).map_err(|e| AltError::Format(format!("optimizer header: {e}")))?;
        let mut state = Self::new(params, h.config);
        state.t = h.t;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, shape, data) in tensors {
            if let Some(n) = name.strip_prefix("m.") {
                m.push((n.to_string(), shape, data));
            } else if let Some(n) = name.strip_prefix("v.") {
                v.push((n.to_string(), shape, data));
            } else {
                return Err(AltError::Format(format!("unexpected optimizer tensor {name:?}")));
            }
        }
        crate::model::fill_tensors(&mut state.m, m)?;
        crate::model::fill_tensors(&mut state.v, v)?;
        Ok(state)
    }
}

/// One Adam update with bias correction at learning rate
/// `schedule.factor(t) * base_lr`. Returns the learning rate used.
pub fn adam_step(
    opt: &mut OptimizerState,
    params: &mut Parameters,
    grads: &Parameters,
    schedule: &ScheduleConfig,
) -> Result<f64> {
    if !grads.all_finite() {
        return Err(AltError::numeric("adam", format!("non-finite gradient at step {}", opt.t)));
    }
    if grads.config != params.config || opt.m.config != params.config {
        return Err(AltError::validation("optimizer, gradient and parameter shapes differ"));
    }
    let c = opt.config;
    let lr = schedule.factor(opt.t) * c.lr;
    opt.t += 1;
    let bc1 = 1.0 - c.beta1.powi(opt.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - c.beta2.powi(opt.t.min(i32::MAX as u64) as i32);
    let gs = grads.tensors();
    let ms = opt.m.tensors_mut();
    let vs = opt.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
            v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(lr)
}
