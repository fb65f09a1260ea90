use std::f64::consts::PI;

use ndarray::Array3;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::preprocess::WindowTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

/// Delta, theta, alpha, beta and gamma, half-open in Hz.
pub const BANDS: [Band; 5] = [
    Band { name: "delta", lo: 0.5, hi: 4.0 },
    Band { name: "theta", lo: 4.0, hi: 8.0 },
    Band { name: "alpha", lo: 8.0, hi: 13.0 },
    Band { name: "beta", lo: 13.0, hi: 30.0 },
    Band { name: "gamma", lo: 30.0, hi: 75.0 },
];

/// Welch PSD with one-second periodic Hann segments at 50% overlap. Each
/// segment has its mean removed. Returns the one-sided density per bin.
fn welch(x: &[f64], fs: f64) -> Vec<f64> {
    let seg = (fs.round() as usize).min(x.len());
    let hop = (seg / 2).max(1);
    let window: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos())
        .collect();
    let scale = 1.0 / (fs * window.iter().map(|w| w * w).sum::<f64>());
    let fft = FftPlanner::new().plan_fft_forward(seg);
    let bins = seg / 2 + 1;
    let mut psd = vec![0.0; bins];
    let mut count = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); seg];
    let mut start = 0;
    while start + seg <= x.len() {
        let chunk = &x[start..start + seg];
        let mean = chunk.iter().sum::<f64>() / seg as f64;
        for ((b, &v), w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new((v - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let two_sided = if k == 0 || (seg % 2 == 0 && k == seg / 2) { 1.0 } else { 2.0 };
            *p += two_sided * buf[k].norm_sqr() * scale;
        }
        count += 1;
        start += hop;
    }
    psd.iter_mut().for_each(|p| *p /= count.max(1) as f64);
    psd
}

/// Linear band powers. Bin `k` stands for `[k − ½, k + ½)·Δf` and contributes
/// its overlap with each band.
pub fn band_powers(x: &[f64], fs: f64) -> [f64; 5] {
    let psd = welch(x, fs);
    let seg = (fs.round() as usize).min(x.len());
    let df = fs / seg as f64;
    let mut out = [0.0; 5];
    for (b, band) in BANDS.iter().enumerate() {
        for (k, p) in psd.iter().enumerate() {
            let lo = (k as f64 - 0.5) * df;
            let hi = (k as f64 + 0.5) * df;
            let overlap = (hi.min(band.hi) - lo.max(band.lo)).max(0.0);
            out[b] += p * overlap;
        }
    }
    out
}

/// `log10(1 + band power)` for every window and channel: `[N_T × N_E × 5]`.
pub fn psd_features(w: &WindowTensor) -> Array3<f64> {
    let (n_t, n_e, _) = w.data.dim();
    let mut out = Array3::zeros((n_t, n_e, BANDS.len()));
    for t in 0..n_t {
        for e in 0..n_e {
            let x: Vec<f64> = w.data.slice(ndarray::s![t, e, ..]).to_vec();
            for (b, p) in band_powers(&x, WindowTensor::FS).iter().enumerate() {
                out[[t, e, b]] = p.ln_1p() / std::f64::consts::LN_10;
            }
        }
    }
    out
}
