//! One-cycle learning-rate schedule.

use super::TrainConfig;

/// Warmup step count for a run.
pub fn warmup_steps(cfg: &TrainConfig, steps_per_epoch: usize) -> usize {
    (cfg.warmup_epochs * steps_per_epoch as f64).round() as usize
}

/// Piecewise-linear schedule: `start_lr → max_lr` over the warmup steps,
/// then `max_lr → 0` over the remaining steps of the run.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warm = warmup_steps(cfg, steps_per_epoch);
    let total = cfg.epochs * steps_per_epoch;
    if step < warm {
        return cfg.start_lr + (cfg.max_lr - cfg.start_lr) * step as f64 / warm as f64;
    }
    if total <= warm {
        return cfg.max_lr;
    }
    let left = total.saturating_sub(step) as f64 / (total - warm) as f64;
    cfg.max_lr * left.max(0.0)
}
