//! Synthetic recordings with a planted, recoverable load signal.
//!
//! Every channel carries 1/f-shaped broadband noise. Channels of the planted
//! region additionally carry a sinusoid inside the planted band whose amplitude
//! `a ∈ [0, 1]` is drawn per trial, and the label is
//! `score = 1 − a·(1 + 0.05·(day − 1)) + N(0, noise_sigma²)`:
//! more planted-band power means lower load, and load falls across days.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::montage::CAP32_LABELS;
use super::trial::{Behavioral, Cohort, LabelRecord, Trial, TrialKey, TrialSet};
use super::{write_trialset, DataError, Montage, RegionId};

/// Peak amplitude of the planted sinusoid at `a = 1`, in microvolts.
pub const PLANTED_AMPLITUDE_UV: f64 = 6.0;
/// Standard deviation of the broadband background per channel, in microvolts.
const NOISE_UV: f64 = 10.0;
/// Day-over-day growth of the amplitude-to-load slope.
const DAY_SLOPE: f64 = 0.05;
/// Number of participants reserved for the evaluation cohort.
const EVAL_PARTICIPANTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_participants: usize,
    pub n_days: usize,
    pub trials_per_day: usize,
    pub n_channels: usize,
    pub fs: f64,
    pub duration_s: f64,
    pub planted_region: RegionId,
    pub planted_band: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_participants: 10,
            n_days: 5,
            trials_per_day: 2,
            n_channels: 32,
            fs: 200.0,
            duration_s: 92.0,
            planted_region: RegionId::Prefrontal,
            planted_band: (9.0, 11.0),
            noise_sigma: 0.02,
            seed: 11,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        for (name, v) in [
            ("n_participants", self.n_participants),
            ("n_days", self.n_days),
            ("trials_per_day", self.trials_per_day),
            ("n_channels", self.n_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_days > 5 {
            return bad(format!("n_days must be at most 5, got {}", self.n_days));
        }
        if !(RegionId::COUNT..=CAP32_LABELS.len()).contains(&self.n_channels) {
            return bad(format!(
                "n_channels must be between {} and {} to cover every region",
                RegionId::COUNT,
                CAP32_LABELS.len()
            ));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return bad(format!("fs must be positive, got {}", self.fs));
        }
        if !(self.duration_s.is_finite() && self.duration_s * self.fs >= 1.0) {
            return bad(format!("duration_s too short: {}", self.duration_s));
        }
        let (lo, hi) = self.planted_band;
        if !(lo > 0.0 && lo < hi && hi < self.fs / 2.0) {
            return bad(format!(
                "planted_band must satisfy 0 < lo < hi < fs/2, got ({lo}, {hi}) at fs {}",
                self.fs
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }

    fn n_samples(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }
}

/// A generated dataset together with the planted amplitude of every trial.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub set: TrialSet,
    /// Planted amplitude `a`, aligned with `set.trials`.
    pub amplitudes: Vec<f64>,
}

fn montage_for(n: usize) -> Result<Montage, DataError> {
    if let Some(m) = Montage::for_channel_count(n) {
        return Ok(m);
    }
    // Round-robin over regions so every region is represented once n ≥ 9.
    let full = Montage::shipped("cap32").expect("shipped");
    let mut picked = Vec::with_capacity(n);
    let mut depth = 0;
    while picked.len() < n {
        for r in RegionId::ALL {
            if let Some(&i) = full.region_members(r).get(depth) {
                if picked.len() < n {
                    picked.push(i);
                }
            }
        }
        depth += 1;
    }
    picked.sort_unstable();
    let electrodes = picked.into_iter().map(|i| full.electrodes[i].clone()).collect();
    Montage::new(&format!("cap{n}"), electrodes)
}

fn cohort_for(participant: usize, n_participants: usize) -> Cohort {
    let n_eval = EVAL_PARTICIPANTS.min(n_participants);
    let n_train = n_participants - n_eval;
    if participant >= n_train {
        return Cohort::E;
    }
    // Contiguous blocks over A..D; remainders go to the later cohorts.
    let base = n_train / 4;
    let extra = n_train % 4;
    let mut start = 0;
    for (c, cohort) in [Cohort::A, Cohort::B, Cohort::C, Cohort::D].into_iter().enumerate() {
        let size = base + usize::from(c >= 4 - extra);
        if participant < start + size {
            return cohort;
        }
        start += size;
    }
    Cohort::D
}

fn pink_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = (bin as f64 * fs / n as f64).max(1.0);
        *v /= f;
    }
    buf[0] = Complex::new(0.0, 0.0);
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { NOISE_UV / var.sqrt() } else { 0.0 };
    for v in &mut out {
        *v = (*v - mean) * scale;
    }
    out
}

struct Plan {
    key: TrialKey,
    cohort: Cohort,
    ordinal: u64,
    amplitude: f64,
}

/// Generates the dataset in memory.
pub fn synthesize(cfg: &SynthConfig) -> Result<Synthetic, DataError> {
    cfg.validate()?;
    let montage = montage_for(cfg.n_channels)?;
    let planted: Vec<bool> = montage
        .electrodes
        .iter()
        .map(|e| e.region == cfg.planted_region)
        .collect();

    // Amplitudes are stratified within each day: the trials of one day take one
    // draw from each of N equal-width bins of [0, 1], in shuffled order.
    let ids: Vec<String> = (1..=cfg.n_participants).map(|p| format!("P{p:02}")).collect();
    let mut plans = Vec::new();
    for day in 1..=cfg.n_days as u32 {
        let n = cfg.n_participants * cfg.trials_per_day;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::from(day));
        let mut bins: Vec<usize> = (0..n).collect();
        bins.shuffle(&mut rng);
        let mut j = 0;
        for (p, id) in ids.iter().enumerate() {
            for t in 0..cfg.trials_per_day {
                let u: f64 = rng.gen();
                plans.push(Plan {
                    key: TrialKey::new(id.clone(), day, t as u32),
                    cohort: cohort_for(p, cfg.n_participants),
                    ordinal: 0,
                    amplitude: (bins[j] as f64 + u) / n as f64,
                });
                j += 1;
            }
        }
    }
    plans.sort_by(|a, b| a.key.cmp(&b.key));
    for (i, p) in plans.iter_mut().enumerate() {
        p.ordinal = 1000 + i as u64;
    }

    let n_samples = cfg.n_samples();
    let generated: Vec<(Trial, LabelRecord)> = plans
        .par_iter()
        .map(|plan| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(plan.ordinal);
            let mut planner = FftPlanner::new();
            let (lo, hi) = cfg.planted_band;
            let freq = rng.gen_range(lo..hi);
            let mut samples = Array2::zeros((montage.n_channels(), n_samples));
            for (c, mut row) in samples.rows_mut().into_iter().enumerate() {
                let noise = pink_noise(&mut rng, n_samples, cfg.fs, &mut planner);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = if planted[c] { PLANTED_AMPLITUDE_UV * plan.amplitude } else { 0.0 };
                for (i, v) in row.iter_mut().enumerate() {
                    let t = i as f64 / cfg.fs;
                    let s = noise[i] + amp * (2.0 * PI * freq * t + phase).sin();
                    *v = s as f32 as f64;
                }
            }
            let day = f64::from(plan.key.day);
            let jitter = if cfg.noise_sigma > 0.0 {
                Normal::new(0.0, cfg.noise_sigma).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            let score = 1.0 - plan.amplitude * (1.0 + DAY_SLOPE * (day - 1.0)) + jitter;
            let trial = Trial::new(plan.key.clone(), plan.cohort, cfg.fs as f32 as f64, samples)
                .expect("generated trial is valid");
            let label = LabelRecord {
                participant: plan.key.participant.clone(),
                cohort: plan.cohort,
                day: plan.key.day,
                trial_index: plan.key.trial_index,
                score,
            };
            (trial, label)
        })
        .collect();

    let mut behavioral: Behavioral = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    for id in &ids {
        for day in 1..=cfg.n_days as u32 {
            let d = f64::from(day - 1);
            let m = behavioral.entry((id.clone(), day)).or_default();
            m.insert("blink_duration".into(), 0.19 + 0.01 * d + 0.002 * rng.gen::<f64>());
            m.insert("focus_stability".into(), 0.80 - 0.02 * d + 0.002 * rng.gen::<f64>());
        }
    }

    let amplitudes = plans.iter().map(|p| p.amplitude).collect();
    let (trials, labels) = generated.into_iter().unzip();
    let set = TrialSet::new(montage, trials, labels, Some(behavioral))?;
    Ok(Synthetic { set, amplitudes })
}

/// Generates the dataset, writes it under `out_dir`, and returns it with the manifest path.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<(Synthetic, PathBuf), DataError> {
    let synth = synthesize(cfg)?;
    let manifest = write_trialset(&synth.set, out_dir)?;
    Ok((synth, manifest))
}
