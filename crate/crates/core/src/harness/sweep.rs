use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::cv::mean_std;
use super::{run_nested_cv_on, FeatureExtractor, HarnessError, PipelineConfig};
use crate::data::{Cohort, TrialSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Training trials in this prefix as a percentage of all training trials.
    pub fraction: f64,
    pub participants: Vec<String>,
    pub n_trials: usize,
    pub fold_pearson: Vec<f64>,
    pub n_failed: usize,
    pub mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// The point at which the last participant of a cohort has been added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortBoundary {
    pub after_point: usize,
    pub cohort: Cohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: PipelineConfig,
    pub points: Vec<SweepPoint>,
    pub cohort_boundaries: Vec<CohortBoundary>,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// One participant per increment, cohorts in A→D order, ids ascending within a cohort.
pub fn default_increments(set: &TrialSet, cfg: &PipelineConfig) -> Vec<Vec<String>> {
    let mut cohorts = cfg.train_cohorts.clone();
    cohorts.sort();
    cohorts
        .iter()
        .flat_map(|&c| set.participants_in(&[c]))
        .map(|p| vec![p])
        .collect()
}

/// `(mean − h, mean + h)` with `h = t₀.₉₇₅,ₙ₋₁ · s/√n`.
pub(crate) fn t_interval(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    match mean_std(xs) {
        (Some(m), Some(s)) => {
            let n = xs.len() as f64;
            let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("n ≥ 2").inverse_cdf(0.975);
            let h = t * s / n.sqrt();
            (Some(m - h), Some(m + h))
        }
        _ => (None, None),
    }
}

/// Nested CV on each cumulative prefix of `increments`.
pub fn run_sweep(
    set: &TrialSet,
    cfg: &PipelineConfig,
    ex: &FeatureExtractor,
    increments: &[Vec<String>],
) -> Result<SweepReport, HarnessError> {
    if increments.is_empty() || increments.iter().any(Vec::is_empty) {
        return Err(HarnessError::Config("sweep increments must be non-empty".into()));
    }
    let count = |p: &str| set.trials.iter().filter(|t| t.key.participant == p).count();
    let total: usize = increments.iter().flatten().map(|p| count(p)).sum();
    if total == 0 {
        return Err(HarnessError::Config("sweep increments contain no trials".into()));
    }
    let mut points = Vec::new();
    let mut boundaries = Vec::new();
    let mut prefix: Vec<String> = Vec::new();
    for (i, inc) in increments.iter().enumerate() {
        prefix.extend(inc.iter().cloned());
        let run = run_nested_cv_on(set, cfg, ex, &prefix)?;
        let r = run.report;
        let pearsons = r.test_pearsons();
        let (ci_low, ci_high) = t_interval(&pearsons);
        let n_trials: usize = prefix.iter().map(|p| count(p)).sum();
        points.push(SweepPoint {
            fraction: n_trials as f64 / total as f64 * 100.0,
            participants: prefix.clone(),
            n_trials,
            fold_pearson: pearsons,
            n_failed: r.n_failed,
            mean: r.mean_test_pearson,
            ci_low,
            ci_high,
        });
        let cohort_of = |inc: &Vec<String>| inc.last().and_then(|p| set.cohort_of(p));
        let here = cohort_of(inc);
        let next = increments.get(i + 1).and_then(cohort_of);
        if let Some(c) = here {
            if next != Some(c) {
                boundaries.push(CohortBoundary { after_point: i, cohort: c });
            }
        }
    }
    Ok(SweepReport {
        config: cfg.clone(),
        points,
        cohort_boundaries: boundaries,
    })
}
