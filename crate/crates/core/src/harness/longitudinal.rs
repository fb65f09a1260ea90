use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, FeatureExtractor, HarnessError, PipelineConfig};
use crate::data::{TrialKey, TrialSet};
use crate::estimators::Model;
use crate::explain::{
    aggregate_relevance, owen_exact, owen_sampled, render_topomap, AttributionResult, Baseline, ChannelGame, GroupBy,
    PartitionTree,
};
use crate::features::FeatureError;
use crate::preprocess::preprocess_trial;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExplainMode {
    Exact,
    Sampled { n_permutations: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub baseline: Baseline,
    pub mode: ExplainMode,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            baseline: Baseline::Zero,
            mode: ExplainMode::Exact,
        }
    }
}

/// Attribution and unperturbed prediction for each trial at `idx`.
pub fn attribute_trials(
    set: &TrialSet,
    idx: &[usize],
    model: &Model,
    cfg: &PipelineConfig,
    ex: &FeatureExtractor,
    explain: &ExplainConfig,
) -> Result<Vec<(TrialKey, AttributionResult)>, HarnessError> {
    let provider = ex
        .provider()
        .ok_or_else(|| FeatureError::Unsupported(format!("{} features are not attributable to raw EEG", ex.source())))?;
    let tree = PartitionTree::from_montage(&set.montage);
    idx.iter()
        .map(|&i| {
            let trial = &set.trials[i];
            let w = preprocess_trial(trial)?;
            let game = ChannelGame::new(provider, model, &set.montage, cfg.spatial, cfg.temporal, &w, explain.baseline)?;
            let v = game.value_function();
            let r = match explain.mode {
                ExplainMode::Exact => owen_exact(&v, &tree)?,
                ExplainMode::Sampled { n_permutations, seed } => owen_sampled(&v, &tree, n_permutations, seed)?,
            };
            log::debug!("attributed {} with {} evaluations", trial.key, r.evaluations);
            Ok((trial.key.clone(), r))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayEntry {
    pub day: u32,
    pub n_trials: usize,
    pub mean_predicted: f64,
    pub mean_truth: f64,
    pub relevance_file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub behavioral: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyReport {
    pub days: Vec<DayEntry>,
}

/// Per-day predicted and true load, relevance topomaps and behavioral means
/// over the trials at `idx`. Writes `daily_report.json` and one
/// `relevance_day_<d>` JSON/SVG pair per day present.
pub fn longitudinal_report(
    set: &TrialSet,
    idx: &[usize],
    model: &Model,
    cfg: &PipelineConfig,
    ex: &FeatureExtractor,
    attributions: &[(TrialKey, AttributionResult)],
    out_dir: &Path,
) -> Result<DailyReport, HarnessError> {
    let x = ex.matrix(set, idx, cfg.spatial, cfg.temporal)?;
    let preds = model.predict(x.view())?;
    let mut by_day: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, &i) in idx.iter().enumerate() {
        by_day.entry(set.trials[i].key.day).or_default().push(j);
    }
    let maps = aggregate_relevance(attributions, &set.montage, GroupBy::Day)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut days = Vec::new();
    for (day, js) in by_day {
        let n = js.len() as f64;
        let mean_predicted = js.iter().map(|&j| preds[j]).sum::<f64>() / n;
        let mean_truth = js.iter().map(|&j| set.score(&set.trials[idx[j]].key)).sum::<f64>() / n;
        let group = format!("day_{day}");
        let stem = format!("relevance_{group}");
        if let Some(map) = maps.iter().find(|m| m.group == group) {
            render_topomap(map, Some(&set.montage), &out_dir.join(&stem))?;
        }
        let behavioral = set.behavioral.as_ref().map(|b| {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            let mut seen = std::collections::BTreeSet::new();
            for &j in &js {
                let p = &set.trials[idx[j]].key.participant;
                if !seen.insert(p.clone()) {
                    continue;
                }
                for (k, v) in b.get(&(p.clone(), day)).into_iter().flatten() {
                    let e = sums.entry(k.clone()).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
        });
        days.push(DayEntry {
            day,
            n_trials: js.len(),
            mean_predicted,
            mean_truth,
            relevance_file: format!("{stem}.json"),
            behavioral,
        });
    }
    let report = DailyReport { days };
    let path = out_dir.join("daily_report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::{run_nested_cv, FeatureSource};
    use super::*;
    use crate::data::{synthesize, Cohort, SynthConfig};
    use crate::features::TemporalMode;

    fn setup(days: usize, behavioral: bool) -> (TrialSet, PipelineConfig, FeatureExtractor, Model) {
        let mut set = synthesize(&SynthConfig {
            n_participants: 7,
            n_days: days,
            trials_per_day: 2,
            n_channels: 26,
            seed: 21,
            ..SynthConfig::default()
        })
        .unwrap()
        .set;
        if !behavioral {
            set.behavioral = None;
        }
        let cfg = PipelineConfig {
            features: FeatureSource::Toy { seed: 1 },
            temporal: TemporalMode::Mean,
            ..Default::default()
        };
        let ex = FeatureExtractor::open(&cfg.features).unwrap();
        let model = run_nested_cv(&set, &cfg, &ex).unwrap().final_model.unwrap();
        (set, cfg, ex, model)
    }

    fn eval_idx(set: &TrialSet) -> Vec<usize> {
        (0..set.trials.len()).filter(|&i| set.trials[i].cohort == Cohort::E).collect()
    }

    #[test]
    fn five_days_give_five_topomaps_and_falling_truth() {
        let (set, cfg, ex, model) = setup(5, true);
        let idx: Vec<usize> = (0..set.trials.len()).collect();
        let explain = ExplainConfig {
            mode: ExplainMode::Sampled {
                n_permutations: 2,
                seed: 0,
            },
            ..Default::default()
        };
        let attr = attribute_trials(&set, &idx, &model, &cfg, &ex, &explain).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = longitudinal_report(&set, &idx, &model, &cfg, &ex, &attr, dir.path()).unwrap();
        assert_eq!(r.days.len(), 5);
        for d in 1..=5 {
            assert!(dir.path().join(format!("relevance_day_{d}.svg")).exists());
        }
        for w in r.days.windows(2) {
            assert!(w[1].mean_truth < w[0].mean_truth, "{} → {}", w[0].mean_truth, w[1].mean_truth);
        }
        assert!(r.days.iter().all(|d| d.behavioral.is_some()));
        assert!(dir.path().join("daily_report.json").exists());
    }

    #[test]
    fn missing_behavioral_and_days_are_tolerated() {
        let (set, cfg, ex, model) = setup(2, false);
        let idx: Vec<usize> = eval_idx(&set).into_iter().filter(|&i| set.trials[i].key.day == 2).collect();
        let explain = ExplainConfig {
            mode: ExplainMode::Sampled {
                n_permutations: 1,
                seed: 0,
            },
            ..Default::default()
        };
        let attr = attribute_trials(&set, &idx, &model, &cfg, &ex, &explain).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = longitudinal_report(&set, &idx, &model, &cfg, &ex, &attr, dir.path()).unwrap();
        assert_eq!(r.days.len(), 1);
        assert_eq!(r.days[0].day, 2);
        let text = fs::read_to_string(dir.path().join("daily_report.json")).unwrap();
        assert!(!text.contains("behavioral"));
    }

    #[test]
    fn psd_features_cannot_be_attributed() {
        let (set, cfg, _, model) = setup(1, false);
        let ex = FeatureExtractor::open(&FeatureSource::Psd).unwrap();
        assert!(matches!(
            attribute_trials(&set, &[0], &model, &cfg, &ex, &ExplainConfig::default()),
            Err(HarnessError::Feature(FeatureError::Unsupported(_)))
        ));
    }
}
