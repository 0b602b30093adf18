use std::f64::consts::PI;

use crate::error::{config_err, Result};

/// Peak learning rate under the linear batch-size scaling rule `base * batch / 256`.
pub fn peak_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to `peak`, then cosine decay to `min_lr`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, peak: f64, min_lr: f64) -> Result<f64> {
    if total_steps > 0 && warmup_steps >= total_steps {
        return config_err(format!(
            "warmup of {warmup_steps} steps must be shorter than the {total_steps}-step schedule"
        ));
    }
    if step > total_steps {
        return config_err(format!("step {step} beyond the {total_steps}-step schedule"));
    }
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    Ok(peak - (peak - min_lr) * 0.5 * (1.0 - (PI * progress).cos()))
}
