use std::f64::consts::PI;

use super::TrainError;

/// Linear warm-up to `peak` over `warmup` steps, then cosine decay to
/// `floor` at `total`. Steps past `total` stay at `floor`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, peak: f64, floor: f64) -> Result<f64, TrainError> {
    if total <= warmup {
        return Err(TrainError::Config(format!(
            "schedule needs total_steps ({total}) > warmup ({warmup})"
        )));
    }
    if step >= total {
        return Ok(floor);
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(floor + 0.5 * (peak - floor) * (1.0 + (PI * t).cos()))
}
