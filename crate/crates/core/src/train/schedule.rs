use crate::train::TrainConfig;
use crate::{Error, Result};

/// Linear warmup from 0 to the base rate over `warmup_fraction · total`
/// steps, then cosine decay to `min_lr_factor` of the base rate at `total`.
pub fn cosine_warmup_lr(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidInput(format!("step {step} beyond total {total_steps}")));
    }
    let lr = cfg.learning_rate;
    let (s, total) = (step as f64, total_steps as f64);
    let warmup_end = cfg.warmup_fraction * total;
    if s < warmup_end {
        return Ok(lr * s / warmup_end);
    }
    let span = total - warmup_end;
    let progress = if span > 0.0 { (s - warmup_end) / span } else { 1.0 };
    let min_f = cfg.min_lr_factor;
    Ok(lr * (min_f + (1.0 - min_f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_warmup_lr(0, 1000, &cfg).unwrap(), 0.0);
        assert_eq!(cosine_warmup_lr(10, 1000, &cfg).unwrap(), 5e-4);
        assert!((cosine_warmup_lr(1000, 1000, &cfg).unwrap() - 5e-6).abs() < 1e-12);
        assert!(cosine_warmup_lr(1001, 1000, &cfg).is_err());
    }

    #[test]
    fn continuous_at_the_junction() {
        let cfg = TrainConfig::default();
        let total = 12_345;
        let w = cfg.warmup_fraction * total as f64;
        let before = cfg.learning_rate * (w.floor() / w);
        let after = cosine_warmup_lr(w.ceil() as u64, total, &cfg).unwrap();
        assert!((after - cfg.learning_rate).abs() < 1e-9);
        assert!(before <= cfg.learning_rate);
    }
}
