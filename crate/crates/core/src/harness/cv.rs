use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, HarnessError, PipelineConfig};
use crate::data::TrialSet;
use crate::estimators::{fit, mse, pearson, EstimatorError, Hyper, Model};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub index: usize,
    pub test: String,
    pub validation: String,
    pub train: Vec<String>,
}

/// All ordered (test, validation) pairs of distinct evaluation participants,
/// in lexicographic order.
pub fn make_folds(eval: &[String], train: &[String]) -> Result<Vec<FoldSpec>, HarnessError> {
    let eval: BTreeSet<&String> = eval.iter().collect();
    if eval.len() < 2 {
        return Err(HarnessError::TooFewParticipants(eval.len()));
    }
    let train: Vec<String> = train.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(p) = train.iter().find(|p| eval.contains(p)) {
        return Err(HarnessError::Isolation(format!("participant {p} is both training and evaluation")));
    }
    let mut folds = Vec::new();
    for &test in &eval {
        for &val in &eval {
            if test != val {
                folds.push(FoldSpec {
                    index: folds.len(),
                    test: test.clone(),
                    validation: val.clone(),
                    train: train.clone(),
                });
            }
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test: String,
    pub validation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<Hyper>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

/// Wall-clock seconds per stage. Kept out of the report JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub features_s: f64,
    pub fit_s: f64,
    pub evaluate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: PipelineConfig,
    pub train_participants: Vec<String>,
    pub n_train_trials: usize,
    pub n_folds: usize,
    pub n_failed: usize,
    pub folds: Vec<FoldResult>,
    pub mean_test_pearson: Option<f64>,
    pub std_test_pearson: Option<f64>,
    #[serde(skip)]
    pub timing: StageTiming,
}

impl CvReport {
    /// Test Pearson of every successful fold, in fold order.
    pub fn test_pearsons(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.test_pearson).collect()
    }

    /// The grid point chosen most often; ties go to the earlier grid entry.
    pub fn consensus(&self, grid: &[Hyper]) -> Option<Hyper> {
        let mut counts = vec![0usize; grid.len()];
        for h in self.folds.iter().filter_map(|f| f.chosen) {
            if let Some(i) = grid.iter().position(|g| *g == h) {
                counts[i] += 1;
            }
        }
        let best = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        (*best.1 > 0).then(|| grid[best.0])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// A report plus the model refit at the consensus grid point.
pub struct CvRun {
    pub report: CvReport,
    pub final_model: Option<Model>,
}

pub(crate) fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let s = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(m), s)
}

/// Nested CV with the configured training cohorts.
pub fn run_nested_cv(set: &TrialSet, cfg: &PipelineConfig, ex: &FeatureExtractor) -> Result<CvRun, HarnessError> {
    let train = set.participants_in(&cfg.train_cohorts);
    run_nested_cv_on(set, cfg, ex, &train)
}

/// Nested CV training on exactly the participants in `train`.
///
/// The training set is the same in every fold, so each grid point is fit once
/// and folds differ only in which evaluation participants select and test.
pub fn run_nested_cv_on(
    set: &TrialSet,
    cfg: &PipelineConfig,
    ex: &FeatureExtractor,
    train: &[String],
) -> Result<CvRun, HarnessError> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let eval = set.participants_in(&[cfg.eval_cohort]);
    let folds = make_folds(&eval, train)?;
    let mut timing = StageTiming::default();

    let by_participant = |p: &str| -> Vec<usize> {
        set.trials
            .iter()
            .enumerate()
            .filter(|(_, t)| t.key.participant == p)
            .map(|(i, _)| i)
            .collect()
    };
    let train_idx: Vec<usize> = folds[0].train.iter().flat_map(|p| by_participant(p)).collect();
    if train_idx.len() < 2 {
        return Err(HarnessError::Config(format!(
            "{} training trials from cohorts {:?}",
            train_idx.len(),
            cfg.train_cohorts
        )));
    }
    let eval_idx: BTreeMap<&str, Vec<usize>> = eval.iter().map(|p| (p.as_str(), by_participant(p))).collect();

    let t0 = Instant::now();
    let x_train = ex.matrix(set, &train_idx, cfg.spatial, cfg.temporal)?;
    let y_train: Vec<f64> = train_idx.iter().map(|&i| set.score(&set.trials[i].key)).collect();
    let eval_flat: Vec<usize> = eval_idx.values().flatten().copied().collect();
    let x_eval = ex.matrix(set, &eval_flat, cfg.spatial, cfg.temporal)?;
    timing.features_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let dnn = cfg.dnn_config();
    let models: Vec<Result<Model, EstimatorError>> = grid
        .par_iter()
        .map(|&h| fit(cfg.estimator, h, x_train.view(), &y_train, &dnn))
        .collect();
    timing.fit_s = t1.elapsed().as_secs_f64();
    if models.iter().all(|m| m.is_err()) {
        return Err(models.into_iter().find_map(Result::err).expect("non-empty grid").into());
    }

    let t2 = Instant::now();
    // Predictions per grid point for every evaluation trial, then sliced per participant.
    let preds: Vec<Option<Vec<f64>>> = models
        .iter()
        .map(|m| m.as_ref().ok().map(|m| m.predict(x_eval.view())).transpose())
        .collect::<Result<_, _>>()?;
    let mut offset = 0;
    let mut slices: BTreeMap<&str, std::ops::Range<usize>> = BTreeMap::new();
    for (p, idx) in &eval_idx {
        slices.insert(p, offset..offset + idx.len());
        offset += idx.len();
    }
    let truth = |p: &str| -> Vec<f64> { eval_idx[p].iter().map(|&i| set.score(&set.trials[i].key)).collect() };

    let results: Vec<FoldResult> = folds
        .iter()
        .map(|f| {
            let mut r = FoldResult {
                fold: f.index,
                test: f.test.clone(),
                validation: f.validation.clone(),
                chosen: None,
                validation_pearson: None,
                test_pearson: None,
                test_mse: None,
                failed: None,
            };
            let (vs, ts) = (slices[f.validation.as_str()].clone(), slices[f.test.as_str()].clone());
            let (yv, yt) = (truth(&f.validation), truth(&f.test));
            let mut best: Option<(usize, f64)> = None;
            for (g, p) in preds.iter().enumerate() {
                let Some(p) = p else { continue };
                if let Ok(r) = pearson(&p[vs.clone()], &yv) {
                    if best.map_or(true, |(_, b)| r > b) {
                        best = Some((g, r));
                    }
                }
            }
            let Some((g, vr)) = best else {
                r.failed = Some("validation Pearson undefined for every grid point".into());
                return r;
            };
            r.chosen = Some(grid[g]);
            r.validation_pearson = Some(vr);
            let pt = &preds[g].as_ref().expect("chosen model predicted")[ts];
            match pearson(pt, &yt) {
                Ok(tr) => {
                    r.test_pearson = Some(tr);
                    r.test_mse = Some(mse(pt, &yt));
                }
                Err(e) => r.failed = Some(format!("test Pearson undefined: {e}")),
            }
            r
        })
        .collect();
    timing.evaluate_s = t2.elapsed().as_secs_f64();

    let ok: Vec<f64> = results.iter().filter_map(|r| r.test_pearson).collect();
    let (mean, std) = mean_std(&ok);
    let report = CvReport {
        config: cfg.clone(),
        train_participants: folds[0].train.clone(),
        n_train_trials: train_idx.len(),
        n_folds: results.len(),
        n_failed: results.iter().filter(|r| r.failed.is_some()).count(),
        folds: results,
        mean_test_pearson: mean,
        std_test_pearson: std,
        timing,
    };
    let final_model = report
        .consensus(&grid)
        .and_then(|h| grid.iter().position(|g| *g == h))
        .and_then(|i| models.into_iter().nth(i).and_then(Result::ok));
    Ok(CvRun { report, final_model })
}
