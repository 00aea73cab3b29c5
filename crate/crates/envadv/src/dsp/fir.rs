//! FIR filtering, shared by the synthetic-corpus channels and the
//! channel-perturbation evaluation.

/// Causal FIR convolution `y[n] = Σ_k taps[k]·x[n−k]`, truncated to the input
/// length. A single unit tap reproduces the input exactly.
pub fn convolve(x: &[f32], taps: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for (n, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (k, &h) in taps.iter().enumerate().take(n + 1) {
            acc += f64::from(h) * f64::from(x[n - k]);
        }
        *out = acc as f32;
    }
    y
}

/// Hamming-windowed sinc lowpass with unit DC gain.
///
/// `n_taps` should be odd so the filter has a symmetric center; an even count
/// is bumped up by one.
pub fn windowed_sinc_lowpass(cutoff_hz: f64, sample_rate_hz: u32, n_taps: usize) -> Vec<f32> {
    let n_taps = if n_taps.is_multiple_of(2) { n_taps + 1 } else { n_taps };
    let fc = cutoff_hz / f64::from(sample_rate_hz);
    let mid = (n_taps / 2) as f64;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t)
            };
            let window = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n_taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps.into_iter().map(|t| t as f32).collect()
}
