/// Frequencies `2^(E·k/(L−1))`, `k = 0..L`, log-uniform from 1 to `2^E`.
pub fn frequencies(num_freqs: usize, max_freq_exp: f64) -> Vec<f64> {
    if num_freqs == 1 {
        return vec![1.0];
    }
    (0..num_freqs)
        .map(|k| (max_freq_exp * k as f64 / (num_freqs - 1) as f64).exp2())
        .collect()
}

/// `[sin(ω_1 x) … sin(ω_L x), cos(ω_1 x) … cos(ω_L x)]`.
pub fn encode_scalar(x: f64, num_freqs: usize, max_freq_exp: f64) -> Vec<f64> {
    let w = frequencies(num_freqs, max_freq_exp);
    let mut out: Vec<f64> = w.iter().map(|w| (w * x).sin()).collect();
    out.extend(w.iter().map(|w| (w * x).cos()));
    out
}
