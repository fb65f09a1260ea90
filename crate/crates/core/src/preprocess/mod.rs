//! Signal chain from a raw trial to the `[windows × channels × samples]` tensor:
//! band-pass and notch filtering at the native rate, resampling to 200 Hz,
//! a 90-second centre crop or pad, and 16-second windows with 8-second hop.

mod filter;
mod resample;

use ndarray::{s, Array2, Array3};

pub use filter::{
    design_filters, filter_trial, Biquad, CausalFilter, FilterBank, BANDPASS_HIGH_HZ,
    BANDPASS_LOW_HZ, BUTTERWORTH_ORDER, NOTCH_HZ, NOTCH_Q,
};
pub use resample::{resample_trial, Resampler, KAISER_BETA, TAPS_PER_PHASE, TARGET_FS};

use crate::data::{Cohort, Trial, TrialKey};

/// Samples per segment: 90 s at 200 Hz.
pub const SEGMENT_SAMPLES: usize = 18_000;
/// Samples per window: 16 s at 200 Hz.
pub const WINDOW_SAMPLES: usize = 3_200;
/// Hop between window starts: 8 s at 200 Hz.
pub const HOP_SAMPLES: usize = 1_600;
/// `(90 − 16) / 8 + 1`.
pub const N_WINDOWS: usize = (SEGMENT_SAMPLES - WINDOW_SAMPLES) / HOP_SAMPLES + 1;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("sampling rate {0} Hz is too low for a 75 Hz band edge")]
    InvalidRate(f64),
    #[error("trial sampled at {trial} Hz but filters designed for {bank} Hz")]
    RateMismatch { trial: f64, bank: f64 },
    #[error("cannot resample from {0} Hz; supported rates are 200, 250 and 500 Hz")]
    UnsupportedRate(f64),
    #[error("expected {expected} at 200 Hz, got {got}")]
    Shape { expected: String, got: String },
}

/// Where a segment came from and what the centre fix did to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub key: TrialKey,
    pub cohort: Cohort,
    pub cropped: bool,
    pub padded: bool,
}

/// Exactly 90 s of 200 Hz samples per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Array2<f64>,
    pub provenance: Provenance,
}

impl Segment {
    pub const FS: f64 = TARGET_FS;
}

/// The `[N_T × N_E × N_S]` input tensor of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTensor {
    pub data: Array3<f64>,
    pub provenance: Provenance,
}

impl WindowTensor {
    pub const FS: f64 = TARGET_FS;

    pub fn new(data: Array3<f64>, provenance: Provenance) -> Result<Self, PreprocessError> {
        let (t, _, s) = data.dim();
        if t != N_WINDOWS || s != WINDOW_SAMPLES {
            return Err(PreprocessError::Shape {
                expected: format!("({N_WINDOWS}, channels, {WINDOW_SAMPLES})"),
                got: format!("{:?}", data.dim()),
            });
        }
        Ok(Self { data, provenance })
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().1
    }
}

/// Crops the centred 90 s or zero-pads symmetrically (extra sample on the right).
pub fn center_fix(trial: &Trial) -> Result<Segment, PreprocessError> {
    if trial.fs != TARGET_FS {
        return Err(PreprocessError::RateMismatch {
            trial: trial.fs,
            bank: TARGET_FS,
        });
    }
    let n = trial.n_samples();
    let mut provenance = Provenance {
        key: trial.key.clone(),
        cohort: trial.cohort,
        cropped: false,
        padded: false,
    };
    let samples = if n > SEGMENT_SAMPLES {
        provenance.cropped = true;
        let start = (n - SEGMENT_SAMPLES) / 2;
        trial.samples.slice(s![.., start..start + SEGMENT_SAMPLES]).to_owned()
    } else if n < SEGMENT_SAMPLES {
        provenance.padded = true;
        let left = (SEGMENT_SAMPLES - n) / 2;
        let mut out = Array2::zeros((trial.n_channels(), SEGMENT_SAMPLES));
        out.slice_mut(s![.., left..left + n]).assign(&trial.samples);
        out
    } else {
        trial.samples.clone()
    };
    Ok(Segment { samples, provenance })
}

/// Splits a segment into ten 16-second windows; window `t` covers samples
/// `[t·1600, t·1600 + 3200)`. No taper is applied.
pub fn make_windows(seg: &Segment) -> WindowTensor {
    let channels = seg.samples.nrows();
    let mut data = Array3::zeros((N_WINDOWS, channels, WINDOW_SAMPLES));
    for t in 0..N_WINDOWS {
        let start = t * HOP_SAMPLES;
        data.slice_mut(s![t, .., ..])
            .assign(&seg.samples.slice(s![.., start..start + WINDOW_SAMPLES]));
    }
    WindowTensor {
        data,
        provenance: seg.provenance.clone(),
    }
}

/// Full batch chain for one trial: zero-phase filtering at the native rate,
/// resampling, centre fix and windowing.
pub fn preprocess_trial(trial: &Trial) -> Result<WindowTensor, PreprocessError> {
    Ok(make_windows(&preprocess_segment(trial)?))
}

/// Filtering, resampling and centre fix, stopping short of windowing.
pub fn preprocess_segment(trial: &Trial) -> Result<Segment, PreprocessError> {
    let bank = design_filters(trial.fs)?;
    let filtered = filter_trial(trial, &bank)?;
    let resampled = resample_trial(&filtered, TARGET_FS)?;
    center_fix(&resampled)
}
