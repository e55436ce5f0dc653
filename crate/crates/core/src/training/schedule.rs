use std::f64::consts::PI;

/// Linear learning-rate scaling: `base_lr · batch_size / 256`.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to `peak`, then half-cosine decay to `floor` at the
/// last step. Steps past the end stay at `floor`.
pub fn cosine_warmup_lr(
    step: u64,
    steps_per_epoch: usize,
    warmup_epochs: f64,
    total_epochs: f64,
    peak: f64,
    floor: f64,
) -> f64 {
    let s = step as f64;
    let warmup = warmup_epochs * steps_per_epoch as f64;
    let total = total_epochs * steps_per_epoch as f64;
    if s < warmup {
        return peak * s / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 || s >= total {
        return floor;
    }
    let progress = (s - warmup) / span;
    if progress == 0.0 {
        return peak;
    }
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scaling() {
        assert_eq!(scaled_lr(1.5e-4, 256), 1.5e-4);
        assert_eq!(scaled_lr(1.5e-4, 1024), 6e-4);
        assert!((scaled_lr(1.5e-4, 64) - 3.75e-5).abs() < 1e-20);
    }

    #[test]
    fn schedule_landmarks() {
        let (peak, floor) = (6e-4, 1e-6);
        // 10 steps per epoch, 2 warmup epochs, 10 total
        assert_eq!(cosine_warmup_lr(0, 10, 2.0, 10.0, peak, floor), 0.0);
        assert_eq!(cosine_warmup_lr(20, 10, 2.0, 10.0, peak, floor), peak);
        assert_eq!(cosine_warmup_lr(100, 10, 2.0, 10.0, peak, floor), floor);
        let mid = cosine_warmup_lr(60, 10, 2.0, 10.0, peak, floor);
        assert!((mid - (peak + floor) / 2.0).abs() < 1e-15);
        assert!((cosine_warmup_lr(10, 10, 2.0, 10.0, peak, floor) - peak / 2.0).abs() < 1e-18);
    }

    #[test]
    fn shape_is_unimodal() {
        let lrs: Vec<f64> = (0..=100)
            .map(|s| cosine_warmup_lr(s, 10, 2.0, 10.0, 1.0, 0.01))
            .collect();
        let top = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(lrs.iter().filter(|&&v| v == top).count(), 1);
        let peak_at = lrs.iter().position(|&v| v == top).unwrap();
        assert_eq!(peak_at, 20);
        assert!(lrs[..=peak_at].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak_at..].windows(2).all(|w| w[0] >= w[1]));
        // no jumps larger than one warmup increment
        assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= 0.05 + 1e-12));
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(cosine_warmup_lr(0, 5, 0.0, 2.0, 0.1, 0.0), 0.1);
    }
}
