use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rustfft::num_complex::Complex;

use super::PreprocessError;
use crate::data::Trial;

pub const BANDPASS_LOW_HZ: f64 = 0.1;
pub const BANDPASS_HIGH_HZ: f64 = 75.0;
pub const NOTCH_HZ: f64 = 60.0;
pub const NOTCH_Q: f64 = 30.0;
pub const BUTTERWORTH_ORDER: usize = 4;

/// Second-order section `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Bilinear transform of the analog section `(n2 s² + n1 s + n0) / (s² + d1 s + d0)`.
    fn from_analog(n: [f64; 3], d: [f64; 2], fs: f64) -> Self {
        let k = 2.0 * fs;
        let k2 = k * k;
        let [n2, n1, n0] = n;
        let [d1, d0] = d;
        let a0 = k2 + d1 * k + d0;
        Biquad {
            b: [
                (n2 * k2 + n1 * k + n0) / a0,
                2.0 * (n0 - n2 * k2) / a0,
                (n2 * k2 - n1 * k + n0) / a0,
            ],
            a: [2.0 * (d0 - k2) / a0, (k2 - d1 * k + d0) / a0],
        }
    }

    /// Largest pole magnitude.
    pub fn pole_radius(&self) -> f64 {
        let [a1, a2] = self.a;
        let disc = a1 * a1 - 4.0 * a2;
        if disc >= 0.0 {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        } else {
            a2.sqrt()
        }
    }

    pub fn response(&self, f: f64, fs: f64) -> Complex<f64> {
        let w = 2.0 * PI * f / fs;
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + z1 * self.b[1] + z2 * self.b[2]) / (1.0 + z1 * self.a[0] + z2 * self.a[1])
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    // Transposed direct-form II state for a constant input of 1.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }

    #[inline]
    fn tick(&self, x: f64, z: &mut [f64; 2]) -> f64 {
        let y = self.b[0] * x + z[0];
        z[0] = self.b[1] * x - self.a[0] * y + z[1];
        z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

/// Butterworth sections of the given order; `highpass` selects the s → ωc/s mapping.
fn butterworth(order: usize, cutoff: f64, fs: f64, highpass: bool) -> Vec<Biquad> {
    assert!(order % 2 == 0, "only even orders are built from biquads");
    let wc = 2.0 * fs * (PI * cutoff / fs).tan();
    (1..=order / 2)
        .map(|k| {
            let theta = (2 * k - 1) as f64 * PI / (2 * order) as f64;
            let q = 1.0 / (2.0 * theta.sin());
            let num = if highpass { [1.0, 0.0, 0.0] } else { [0.0, 0.0, wc * wc] };
            Biquad::from_analog(num, [wc / q, wc * wc], fs)
        })
        .collect()
}

fn notch(f0: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * fs * (PI * f0 / fs).tan();
    Biquad::from_analog([1.0, 0.0, w0 * w0], [w0 / q, w0 * w0], fs)
}

/// Band-pass cascade plus mains notch, designed for one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub bandpass: Vec<Biquad>,
    pub notch: Biquad,
    pub design_fs: f64,
}

impl FilterBank {
    /// Band-pass sections followed by the notch, in application order.
    pub fn sections(&self) -> impl Iterator<Item = &Biquad> {
        self.bandpass.iter().chain(std::iter::once(&self.notch))
    }

    pub fn response(&self, f: f64) -> Complex<f64> {
        self.sections()
            .map(|s| s.response(f, self.design_fs))
            .fold(Complex::new(1.0, 0.0), |acc, h| acc * h)
    }

    /// Single-pass magnitude response in dB.
    pub fn magnitude_db(&self, f: f64) -> f64 {
        20.0 * self.response(f).norm().log10()
    }

    pub fn notch_magnitude_db(&self, f: f64) -> f64 {
        20.0 * self.notch.response(f, self.design_fs).norm().log10()
    }

    fn n_sections(&self) -> usize {
        self.bandpass.len() + 1
    }

    /// Reflection pad length used by [`filter_trial`]: three times the longest
    /// section length, where a section's length is the number of samples its
    /// slowest pole needs to decay by 60 dB.
    pub fn pad_len(&self) -> usize {
        let longest = self
            .sections()
            .map(|s| (1e-3f64.ln() / s.pole_radius().ln()).ceil() as usize)
            .max()
            .unwrap_or(0);
        3 * longest
    }

    /// Zero-phase filtering of one channel.
    ///
    /// The forward-backward and backward-forward passes are averaged, which
    /// makes the operator commute with time reversal even near the edges.
    pub fn filtfilt(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len().min(n - 1);
        // Even reflection keeps the local mean, so the slow high-pass sees no step.
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| x[i]));
        ext.extend(x.iter().copied());
        ext.extend((1..=pad).map(|i| x[n - 1 - i]));

        let mut fwd = ext.clone();
        self.run_steady(&mut fwd);
        fwd.reverse();
        self.run_steady(&mut fwd);
        fwd.reverse();

        let mut bwd = ext;
        bwd.reverse();
        self.run_steady(&mut bwd);
        bwd.reverse();
        self.run_steady(&mut bwd);

        (pad..pad + n).map(|i| 0.5 * (fwd[i] + bwd[i])).collect()
    }

    // Runs the cascade in place, starting every section in its steady state for
    // a constant input equal to the mean of the leading stretch of `buf`. The
    // 0.1 Hz high-pass settles slowly, so a mean start avoids a DC transient.
    fn run_steady(&self, buf: &mut [f64]) {
        let m = buf.len().min(self.pad_len().max(1));
        let mut level = buf[..m].iter().sum::<f64>() / m as f64;
        for s in self.sections() {
            let zi = s.step_state();
            let mut z = [zi[0] * level, zi[1] * level];
            for v in buf.iter_mut() {
                *v = s.tick(*v, &mut z);
            }
            level *= s.dc_gain();
        }
    }
}

/// Designs the 0.1–75 Hz band-pass (4th-order Butterworth high-pass and low-pass
/// cascaded) and the 60 Hz notch via the prewarped bilinear transform.
pub fn design_filters(fs: f64) -> Result<FilterBank, PreprocessError> {
    if !(fs.is_finite() && fs > 2.0 * BANDPASS_HIGH_HZ) {
        return Err(PreprocessError::InvalidRate(fs));
    }
    let mut bandpass = butterworth(BUTTERWORTH_ORDER, BANDPASS_LOW_HZ, fs, true);
    bandpass.extend(butterworth(BUTTERWORTH_ORDER, BANDPASS_HIGH_HZ, fs, false));
    let bank = FilterBank {
        bandpass,
        notch: notch(NOTCH_HZ, NOTCH_Q, fs),
        design_fs: fs,
    };
    for s in bank.sections() {
        assert!(
            s.b.iter().chain(&s.a).all(|c| c.is_finite()) && s.pole_radius() < 1.0,
            "unstable section designed at fs={fs}: {s:?}"
        );
    }
    Ok(bank)
}

/// Applies the bank forward and backward to every channel; output length equals input length.
pub fn filter_trial(trial: &Trial, bank: &FilterBank) -> Result<Trial, PreprocessError> {
    if (trial.fs - bank.design_fs).abs() > 1e-9 * bank.design_fs {
        return Err(PreprocessError::RateMismatch {
            trial: trial.fs,
            bank: bank.design_fs,
        });
    }
    let mut out = Array2::zeros(trial.samples.raw_dim());
    for (src, mut dst) in trial.samples.rows().into_iter().zip(out.rows_mut()) {
        let y = bank.filtfilt(src);
        dst.iter_mut().zip(y).for_each(|(d, v)| *d = v);
    }
    Ok(Trial {
        samples: out,
        ..trial.clone()
    })
}

/// Single-pass causal filtering with persistent per-channel state, for streaming.
#[derive(Debug, Clone)]
pub struct CausalFilter {
    bank: FilterBank,
    state: Vec<Vec<[f64; 2]>>,
    primed: Vec<bool>,
}

impl CausalFilter {
    pub fn new(bank: FilterBank, channels: usize) -> Self {
        let n = bank.n_sections();
        Self {
            bank,
            state: vec![vec![[0.0; 2]; n]; channels],
            primed: vec![false; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.state.len()
    }

    /// Filters a block of samples of one channel in place.
    pub fn process(&mut self, channel: usize, mut block: ArrayViewMut1<f64>) {
        if block.is_empty() {
            return;
        }
        let states = &mut self.state[channel];
        if !self.primed[channel] {
            let mut level = block[0];
            for (s, z) in self.bank.sections().zip(states.iter_mut()) {
                let zi = s.step_state();
                *z = [zi[0] * level, zi[1] * level];
                level *= s.dc_gain();
            }
            self.primed[channel] = true;
        }
        for v in block.iter_mut() {
            let mut x = *v;
            for (s, z) in self.bank.sections().zip(states.iter_mut()) {
                x = s.tick(x, z);
            }
            *v = x;
        }
    }
}
