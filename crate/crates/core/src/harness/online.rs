use ndarray::{ArrayView2, Axis};

use super::{FeatureExtractor, FeatureSource, HarnessError, PipelineConfig};
use crate::data::{Cohort, Montage, Trial, TrialKey};
use crate::estimators::Model;
use crate::features::{embed_window, pool, FeatureTensor, SpatialMode, TemporalMode};
use crate::preprocess::{preprocess_trial, Provenance};

/// Scores single 16 s windows with a model trained on window-averaged features.
pub struct WindowScorer {
    ex: FeatureExtractor,
    model: Model,
    montage: Montage,
    spatial: SpatialMode,
}

impl WindowScorer {
    pub fn new(ex: FeatureExtractor, model: Model, montage: Montage, cfg: &PipelineConfig) -> Result<Self, HarnessError> {
        if cfg.temporal != TemporalMode::Mean {
            return Err(HarnessError::Config(format!(
                "window scoring needs a model trained with temporal pooling 'mean', got '{}'",
                cfg.temporal
            )));
        }
        let dim = match ex.provider() {
            Some(_) if matches!(ex.source(), FeatureSource::Precomputed { .. }) => {
                return Err(HarnessError::Config(format!("{} cannot embed new data", ex.source())))
            }
            Some(p) => p.dim(),
            None => return Err(HarnessError::Config("window scoring needs an embedding provider".into())),
        };
        let expected = crate::data::RegionId::ALL.len() * dim;
        if model.dim() != expected {
            return Err(HarnessError::Config(format!(
                "model expects {} features but the pipeline produces {expected}",
                model.dim()
            )));
        }
        Ok(Self {
            ex,
            model,
            montage,
            spatial: cfg.spatial,
        })
    }

    pub fn montage(&self) -> &Montage {
        &self.montage
    }

    /// Prediction for one `[N_E × 3200]` filtered window.
    pub fn score(&self, window: ArrayView2<f64>) -> Result<f64, HarnessError> {
        let provider = self.ex.provider().expect("checked at construction");
        let h = embed_window(provider, window)?;
        let t = FeatureTensor {
            data: h.mapv(|v| v as f32).insert_axis(Axis(0)),
            provider: provider.id().to_string(),
            provenance: Provenance {
                key: TrialKey::new("stream", 0, 0),
                cohort: Cohort::E,
                cropped: false,
                padded: false,
            },
        };
        let v = pool(&t, &self.montage, self.spatial, TemporalMode::Mean)?;
        Ok(self.model.predict_one(&v.data)?)
    }

    /// Offline scores of every window of a trial after zero-phase preprocessing.
    pub fn score_trial(&self, trial: &Trial) -> Result<Vec<f64>, HarnessError> {
        let w = preprocess_trial(trial)?;
        w.data.outer_iter().map(|win| self.score(win)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_synth;
    use super::super::run_nested_cv;
    use super::*;

    #[test]
    fn rejects_global_pooling_and_scores_mean_models() {
        let set = small_synth(3);
        let mut cfg = PipelineConfig {
            temporal: TemporalMode::Mean,
            ..Default::default()
        };
        let ex = FeatureExtractor::open(&cfg.features).unwrap();
        let model = run_nested_cv(&set, &cfg, &ex).unwrap().final_model.unwrap();
        let offline = {
            let x = ex.matrix(&set, &[0], cfg.spatial, cfg.temporal).unwrap();
            model.predict(x.view()).unwrap()[0]
        };
        let scorer = WindowScorer::new(FeatureExtractor::open(&cfg.features).unwrap(), model.clone(), set.montage.clone(), &cfg).unwrap();
        let per_window = scorer.score_trial(&set.trials[0]).unwrap();
        assert_eq!(per_window.len(), crate::preprocess::N_WINDOWS);
        assert!(per_window.iter().all(|s| s.is_finite()));
        // A linear head commutes with the window mean.
        if let Model::Linear(_) = model {
            let mean = per_window.iter().sum::<f64>() / per_window.len() as f64;
            assert!((mean - offline).abs() < 1e-4 * (1.0 + offline.abs()), "{mean} vs {offline}");
        }
        cfg.temporal = TemporalMode::Global;
        assert!(matches!(
            WindowScorer::new(FeatureExtractor::open(&cfg.features).unwrap(), model, set.montage.clone(), &cfg),
            Err(HarnessError::Config(_))
        ));
    }
}
