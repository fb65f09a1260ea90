use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};

use super::PreprocessError;
use crate::data::Trial;

pub const TARGET_FS: f64 = 200.0;
pub const KAISER_BETA: f64 = 8.6;
pub const TAPS_PER_PHASE: usize = 64;

const SUPPORTED_RATES: [u32; 3] = [200, 250, 500];

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Polyphase rational resampler `up / down` (lowest terms).
#[derive(Debug, Clone)]
pub struct Resampler {
    pub up: usize,
    pub down: usize,
    // phases[p][j] multiplies x[base - j] for output positions of phase p.
    phases: Vec<Vec<f64>>,
    delay: usize,
}

impl Resampler {
    pub fn new(up: usize, down: usize) -> Self {
        let g = gcd(up as u64, down as u64) as usize;
        let (up, down) = (up / g, down / g);
        if up == 1 && down == 1 {
            return Self { up, down, phases: vec![vec![1.0]], delay: 0 };
        }
        // Odd length keeps the group delay an integer number of upsampled samples.
        let len = TAPS_PER_PHASE * up - 1;
        let centre = (len - 1) as f64 / 2.0;
        let cutoff = 0.5 / up.max(down) as f64;
        let norm = bessel_i0(KAISER_BETA);
        let proto: Vec<f64> = (0..len)
            .map(|k| {
                let t = k as f64 - centre;
                let sinc = if t == 0.0 {
                    2.0 * cutoff
                } else {
                    (2.0 * PI * cutoff * t).sin() / (PI * t)
                };
                let r = t / centre;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                sinc * w
            })
            .collect();
        let mut phases: Vec<Vec<f64>> = (0..up)
            .map(|p| proto.iter().skip(p).step_by(up).copied().collect())
            .collect();
        // Unit DC gain on every phase.
        for ph in &mut phases {
            let s: f64 = ph.iter().sum();
            ph.iter_mut().for_each(|v| *v /= s);
        }
        Self { up, down, phases, delay: (len - 1) / 2 }
    }

    pub fn for_rates(from: f64, to: f64) -> Result<Self, PreprocessError> {
        let int = |f: f64| (f.fract() == 0.0 && f > 0.0 && f < u32::MAX as f64).then_some(f as u64);
        match (int(from), int(to)) {
            (Some(a), Some(b)) if SUPPORTED_RATES.contains(&(a as u32)) => {
                let g = gcd(a, b);
                Ok(Self::new((b / g) as usize, (a / g) as usize))
            }
            _ => Err(PreprocessError::UnsupportedRate(from)),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.up == 1 && self.down == 1
    }

    pub fn output_len(&self, n: usize) -> usize {
        (n * self.up).div_ceil(self.down)
    }

    /// Resamples one channel; the ends are extended by odd reflection.
    pub fn process(&self, x: ArrayView1<f64>) -> Vec<f64> {
        if self.is_identity() {
            return x.to_vec();
        }
        let n = x.len() as i64;
        let mirror = |i: i64| x[i.clamp(0, n - 1) as usize];
        let at = |i: i64| -> f64 {
            if i < 0 {
                2.0 * x[0] - mirror(-i)
            } else if i >= n {
                2.0 * x[(n - 1) as usize] - mirror(2 * (n - 1) - i)
            } else {
                x[i as usize]
            }
        };
        (0..self.output_len(x.len()))
            .map(|m| {
                let pos = m * self.down + self.delay;
                let phase = pos % self.up;
                let base = (pos / self.up) as i64;
                self.phases[phase]
                    .iter()
                    .enumerate()
                    .map(|(j, h)| h * at(base - j as i64))
                    .sum()
            })
            .collect()
    }
}

/// Resamples a trial to 200 Hz. A trial already at 200 Hz is returned unchanged.
pub fn resample_trial(trial: &Trial, target_fs: f64) -> Result<Trial, PreprocessError> {
    let r = Resampler::for_rates(trial.fs, target_fs)?;
    if r.is_identity() {
        return Ok(trial.clone());
    }
    let n_out = r.output_len(trial.n_samples());
    let mut out = Array2::zeros((trial.n_channels(), n_out));
    for (src, mut dst) in trial.samples.rows().into_iter().zip(out.rows_mut()) {
        dst.iter_mut().zip(r.process(src)).for_each(|(d, v)| *d = v);
    }
    Ok(Trial {
        samples: out,
        fs: target_fs,
        ..trial.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cohort, TrialKey};
    use ndarray::Array1;

    fn trial(fs: f64, n: usize, f: impl Fn(f64) -> f64) -> Trial {
        let s = Array2::from_shape_fn((1, n), |(_, i)| f(i as f64 / fs));
        Trial::new(TrialKey::new("P", 1, 0), Cohort::A, fs, s).unwrap()
    }

    #[test]
    fn ratios_in_lowest_terms() {
        let r = Resampler::for_rates(500.0, 200.0).unwrap();
        assert_eq!((r.up, r.down), (2, 5));
        let r = Resampler::for_rates(250.0, 200.0).unwrap();
        assert_eq!((r.up, r.down), (4, 5));
        assert!(Resampler::for_rates(200.0, 200.0).unwrap().is_identity());
        assert!(matches!(Resampler::for_rates(256.0, 200.0), Err(PreprocessError::UnsupportedRate(_))));
        assert!(matches!(Resampler::for_rates(500.5, 200.0), Err(PreprocessError::UnsupportedRate(_))));
    }

    #[test]
    fn sine_matches_analytic() {
        let f = |t: f64| (2.0 * PI * 10.0 * t).sin();
        for fs in [500.0, 250.0] {
            let t = trial(fs, fs as usize, f);
            let out = resample_trial(&t, TARGET_FS).unwrap();
            assert_eq!(out.n_samples(), 200);
            assert_eq!(out.fs, 200.0);
            let worst = (16..184)
                .map(|i| (out.samples[[0, i]] - f(i as f64 / 200.0)).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 0.01, "fs {fs}: {worst}");
        }
    }

    #[test]
    fn identity_is_bit_exact() {
        let t = trial(200.0, 333, |t| (t * 17.3).sin() * 1e3);
        assert_eq!(resample_trial(&t, TARGET_FS).unwrap(), t);
    }

    #[test]
    fn dc_is_preserved_everywhere() {
        for fs in [500.0, 250.0] {
            let out = resample_trial(&trial(fs, 1234, |_| 1.0), TARGET_FS).unwrap();
            assert!(out.samples.iter().all(|v| (v - 1.0).abs() <= 1e-3));
        }
    }

    #[test]
    fn output_length_rounds_up() {
        let r = Resampler::new(2, 5);
        assert_eq!(r.output_len(501), 201);
        assert_eq!(r.process(Array1::zeros(501).view()).len(), 201);
    }

    #[test]
    fn linear_in_input() {
        let r = Resampler::new(2, 5);
        let x = Array1::from_shape_fn(700, |i| ((i as f64) * 0.37).sin());
        let y = Array1::from_shape_fn(700, |i| ((i as f64) * 0.011).cos() * 3.0);
        let (a, b) = (1.7, -0.4);
        let mix = &x * a + &y * b;
        let lhs = r.process(mix.view());
        let rx = r.process(x.view());
        let ry = r.process(y.view());
        let err: f64 = lhs
            .iter()
            .zip(rx.iter().zip(&ry))
            .map(|(l, (p, q))| (l - (a * p + b * q)).powi(2))
            .sum::<f64>()
            / lhs.len() as f64;
        assert!(err.sqrt() <= 1e-6);
    }
}
