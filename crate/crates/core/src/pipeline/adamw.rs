//! AdamW with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::ndkernel::Tensor;

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.999;
pub const ADAMW_EPS: f64 = 1e-8;
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;

/// Linear warmup to `lr` over `ceil(warmup_ratio * total)` steps, then
/// linear decay to zero at `total`. `step` is 1-based.
pub fn scheduled_lr(lr: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = ((total as f64) * warmup_ratio).ceil().max(1.0) as usize;
    if step <= warmup {
        lr * step as f64 / warmup as f64
    } else if total <= warmup {
        lr
    } else {
        lr * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamW {
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    /// Advances the step counter; call once per optimizer step before
    /// updating parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one AdamW update to a single named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
        let bc1 = 1.0 - ADAMW_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAMW_BETA2.powi(self.t as i32);
        let (pd, md, vd, gd) = (param.data_mut(), m.data_mut(), v.data_mut(), grad.data());
        for i in 0..pd.len() {
            let g = gd[i];
            md[i] = ADAMW_BETA1 * md[i] + (1.0 - ADAMW_BETA1) * g;
            vd[i] = ADAMW_BETA2 * vd[i] + (1.0 - ADAMW_BETA2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + ADAMW_EPS) + ADAMW_WEIGHT_DECAY * pd[i]);
        }
    }
}
