//! Experiment orchestration: feature extraction with caching, nested
//! cross-subject validation, training-size sweeps and daily reports.

mod cv;
mod longitudinal;
mod online;
mod sweep;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use dashmap::DashMap;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cv::{make_folds, run_nested_cv, run_nested_cv_on, CvReport, CvRun, FoldResult, FoldSpec, StageTiming};
pub use longitudinal::{attribute_trials, longitudinal_report, DailyReport, DayEntry, ExplainConfig, ExplainMode};
pub use online::WindowScorer;
pub use sweep::{default_increments, run_sweep, CohortBoundary, SweepPoint, SweepReport};

use crate::data::{Cohort, DataError, Trial, TrialKey, TrialSet};
use crate::estimators::{EstimatorError, EstimatorKind, Hyper};
use crate::explain::ExplainError;
use crate::features::{
    embed_trial, pool, psd_features, Endpoint, EmbeddingProvider, ExternalProvider, FeatureError, FeatureTensor,
    PrecomputedProvider, SpatialMode, TemporalMode, ToySpectralProvider,
};
use crate::preprocess::{preprocess_trial, PreprocessError, WindowTensor};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("need at least 2 distinct evaluation participants, got {0}")]
    TooFewParticipants(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("participant isolation violated: {0}")]
    Isolation(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

pub(crate) fn io_err(path: &std::path::Path, e: impl ToString) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Where per-channel features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    Toy {
        seed: u64,
    },
    Precomputed {
        path: PathBuf,
    },
    External {
        endpoint: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_s: Option<f64>,
    },
    Psd,
}

impl Default for FeatureSource {
    fn default() -> Self {
        FeatureSource::Toy { seed: 0 }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Toy { seed } => write!(f, "toy:{seed}"),
            FeatureSource::Precomputed { path } => write!(f, "emb1:{}", path.display()),
            FeatureSource::External { endpoint, .. } => f.write_str(endpoint),
            FeatureSource::Psd => f.write_str("psd"),
        }
    }
}

impl FromStr for FeatureSource {
    type Err = String;

    /// `toy`, `toy:<seed>`, `psd`, `emb1:<path>`, `tcp://host:port` or `stdio:<command …>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => return Ok(FeatureSource::Toy { seed: 0 }),
            "psd" => return Ok(FeatureSource::Psd),
            _ => {}
        }
        if let Some(seed) = s.strip_prefix("toy:") {
            let seed = seed.parse().map_err(|_| format!("bad toy provider seed '{seed}'"))?;
            return Ok(FeatureSource::Toy { seed });
        }
        if let Some(path) = s.strip_prefix("emb1:") {
            return Ok(FeatureSource::Precomputed { path: path.into() });
        }
        if s.starts_with("tcp://") || s.starts_with("stdio:") {
            s.parse::<Endpoint>().map_err(|e| e.to_string())?;
            return Ok(FeatureSource::External {
                endpoint: s.to_string(),
                timeout_s: None,
            });
        }
        Err(format!(
            "unknown feature provider '{s}' (expected toy[:seed], psd, emb1:<path>, tcp://… or stdio:…)"
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnnSettings {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DnnSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub features: FeatureSource,
    pub spatial: SpatialMode,
    pub temporal: TemporalMode,
    pub estimator: EstimatorKind,
    /// Hyperparameter grid; the estimator's default grid when absent.
    pub grid: Option<Vec<Hyper>>,
    /// Allows grid points outside the default sets.
    pub allow_custom_grid: bool,
    pub dnn: DnnSettings,
    pub eval_cohort: Cohort,
    pub train_cohorts: Vec<Cohort>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: FeatureSource::default(),
            spatial: SpatialMode::GroupAvg,
            temporal: TemporalMode::Global,
            estimator: EstimatorKind::Linear,
            grid: None,
            allow_custom_grid: false,
            dnn: DnnSettings::default(),
            eval_cohort: Cohort::E,
            train_cohorts: vec![Cohort::A, Cohort::B, Cohort::C, Cohort::D],
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// The effective grid, checked against the estimator's default set.
    pub fn grid(&self) -> Result<Vec<Hyper>, HarnessError> {
        let grid = self.grid.clone().unwrap_or_else(|| self.estimator.default_grid());
        if grid.is_empty() {
            return Err(HarnessError::Config("hyperparameter grid is empty".into()));
        }
        for h in &grid {
            let kind_ok = matches!(
                (self.estimator, h),
                (EstimatorKind::Linear, Hyper::Lambda(_)) | (EstimatorKind::Dnn, Hyper::Lr(_)) | (EstimatorKind::Svr, Hyper::Fixed)
            );
            if !kind_ok {
                return Err(HarnessError::Config(format!("{h} is not a hyperparameter of {}", self.estimator)));
            }
            if !self.allow_custom_grid && !self.estimator.in_default_grid(*h) {
                return Err(HarnessError::Config(format!(
                    "{h} is outside the default {} grid (set allow_custom_grid to override)",
                    self.estimator
                )));
            }
        }
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.grid()?;
        if self.train_cohorts.contains(&self.eval_cohort) {
            return Err(HarnessError::Config(format!(
                "evaluation cohort {} is also a training cohort",
                self.eval_cohort
            )));
        }
        if self.train_cohorts.is_empty() {
            return Err(HarnessError::Config("no training cohorts".into()));
        }
        if self.dnn.epochs == 0 || self.dnn.batch_size == 0 {
            return Err(HarnessError::Config("DNN epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn dnn_config(&self) -> crate::estimators::DnnConfig {
        crate::estimators::DnnConfig {
            epochs: self.dnn.epochs,
            batch_size: self.dnn.batch_size,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Computes per-trial feature tensors once and hands out pooled vectors.
pub struct FeatureExtractor {
    source: FeatureSource,
    provider: Option<Box<dyn EmbeddingProvider>>,
    cache: Option<DashMap<TrialKey, Arc<FeatureTensor>>>,
}

impl FeatureExtractor {
    pub fn open(source: &FeatureSource) -> Result<Self, HarnessError> {
        let provider: Option<Box<dyn EmbeddingProvider>> = match source {
            FeatureSource::Toy { seed } => Some(Box::new(ToySpectralProvider::new(*seed))),
            FeatureSource::Precomputed { path } => Some(Box::new(PrecomputedProvider::open(path)?)),
            FeatureSource::External { endpoint, timeout_s } => {
                let ep: Endpoint = endpoint.parse().map_err(HarnessError::Config)?;
                let timeout = timeout_s.map(Duration::from_secs_f64).unwrap_or(crate::features::DEFAULT_TIMEOUT);
                Some(Box::new(ExternalProvider::connect_with_timeout(&ep, timeout)?))
            }
            FeatureSource::Psd => None,
        };
        Ok(Self {
            source: source.clone(),
            provider,
            cache: Some(DashMap::new()),
        })
    }

    /// The same extractor without memoization.
    pub fn uncached(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn source(&self) -> &FeatureSource {
        &self.source
    }

    pub fn provider(&self) -> Option<&dyn EmbeddingProvider> {
        self.provider.as_deref()
    }

    /// Features of already windowed data.
    pub fn from_windows(&self, w: &WindowTensor) -> Result<FeatureTensor, HarnessError> {
        Ok(match &self.provider {
            Some(p) => embed_trial(p.as_ref(), w)?,
            None => FeatureTensor {
                data: psd_features(w).mapv(|v| v as f32),
                provider: "psd".into(),
                provenance: w.provenance.clone(),
            },
        })
    }

    pub fn tensor(&self, trial: &Trial) -> Result<Arc<FeatureTensor>, HarnessError> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&trial.key)) {
            return Ok(hit.clone());
        }
        let stored = self.provider.as_ref().and_then(|p| p.stored(&trial.key));
        let h = match stored {
            Some(data) => {
                // Stored embeddings skip preprocessing; embed_trial still checks the shape.
                data?;
                let provenance = crate::preprocess::Provenance {
                    key: trial.key.clone(),
                    cohort: trial.cohort,
                    cropped: false,
                    padded: false,
                };
                let w = WindowTensor {
                    data: ndarray::Array3::zeros((crate::preprocess::N_WINDOWS, trial.n_channels(), 0)),
                    provenance,
                };
                embed_trial(self.provider.as_deref().expect("stored implies provider"), &w)?
            }
            None => self.from_windows(&preprocess_trial(trial)?)?,
        };
        let h = Arc::new(h);
        if let Some(c) = &self.cache {
            c.insert(trial.key.clone(), h.clone());
        }
        Ok(h)
    }

    /// Pooled feature rows for the trials at `idx`, in that order.
    pub fn matrix(
        &self,
        set: &TrialSet,
        idx: &[usize],
        spatial: SpatialMode,
        temporal: TemporalMode,
    ) -> Result<Array2<f64>, HarnessError> {
        let rows = idx
            .par_iter()
            .map(|&i| {
                let h = self.tensor(&set.trials[i])?;
                Ok(pool(&h, &set.montage, spatial, temporal)?.data)
            })
            .collect::<Result<Vec<Vec<f64>>, HarnessError>>()?;
        let d = rows.first().map_or(0, Vec::len);
        Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("equal row lengths"))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};

    pub(crate) fn small_synth(seed: u64) -> TrialSet {
        synthesize(&SynthConfig {
            n_participants: 7,
            n_days: 2,
            trials_per_day: 2,
            n_channels: 26,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
        .set
    }

    #[test]
    fn feature_source_parsing() {
        assert_eq!("toy".parse::<FeatureSource>().unwrap(), FeatureSource::Toy { seed: 0 });
        assert_eq!("toy:9".parse::<FeatureSource>().unwrap(), FeatureSource::Toy { seed: 9 });
        assert_eq!("psd".parse::<FeatureSource>().unwrap(), FeatureSource::Psd);
        assert_eq!(
            "emb1:x/y.emb".parse::<FeatureSource>().unwrap(),
            FeatureSource::Precomputed { path: "x/y.emb".into() }
        );
        assert!(matches!("tcp://127.0.0.1:9".parse::<FeatureSource>().unwrap(), FeatureSource::External { .. }));
        assert!("labram".parse::<FeatureSource>().is_err());
        for s in ["toy:3", "psd", "emb1:a.emb", "tcp://h:1"] {
            assert_eq!(s.parse::<FeatureSource>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = PipelineConfig {
            estimator: EstimatorKind::Dnn,
            grid: Some(vec![Hyper::Lr(1e-4)]),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"estimator":"svm"}"#).unwrap();
        assert_eq!(partial.estimator, EstimatorKind::Svr);
        assert_eq!(partial.spatial, SpatialMode::GroupAvg);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn grid_validation() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.grid().unwrap().len(), 3);
        cfg.grid = Some(vec![Hyper::Lambda(0.25)]);
        assert!(matches!(cfg.grid(), Err(HarnessError::Config(_))));
        cfg.allow_custom_grid = true;
        assert!(cfg.grid().is_ok());
        cfg.grid = Some(vec![Hyper::Lr(1e-4)]);
        assert!(cfg.grid().is_err());
        cfg = PipelineConfig {
            train_cohorts: vec![Cohort::E],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cache_is_transparent() {
        let set = small_synth(2);
        let idx: Vec<usize> = (0..4).collect();
        let cached = FeatureExtractor::open(&FeatureSource::Toy { seed: 1 }).unwrap();
        let plain = FeatureExtractor::open(&FeatureSource::Toy { seed: 1 }).unwrap().uncached();
        let a = cached.matrix(&set, &idx, SpatialMode::GroupAvg, TemporalMode::Mean).unwrap();
        let b = cached.matrix(&set, &idx, SpatialMode::GroupAvg, TemporalMode::Mean).unwrap();
        let c = plain.matrix(&set, &idx, SpatialMode::GroupAvg, TemporalMode::Mean).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.dim(), (4, 1800));
    }

    #[test]
    fn psd_source_pools_five_bands() {
        let set = small_synth(3);
        let ex = FeatureExtractor::open(&FeatureSource::Psd).unwrap();
        let x = ex.matrix(&set, &[0, 1], SpatialMode::Intersection, TemporalMode::MeanStd).unwrap();
        assert_eq!(x.dim(), (2, 9 * 5 * 2));
    }

    #[test]
    fn stored_embeddings_round_trip_through_emb1() {
        let set = small_synth(4);
        let toy = FeatureExtractor::open(&FeatureSource::Toy { seed: 2 }).unwrap();
        let records: Vec<_> = set.trials.iter().map(|t| (t.key.clone(), toy.tensor(t).unwrap().data.clone())).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        crate::features::write_emb1(&path, &records).unwrap();
        let pre = FeatureExtractor::open(&FeatureSource::Precomputed { path }).unwrap();
        let idx: Vec<usize> = (0..set.trials.len()).collect();
        assert_eq!(
            toy.matrix(&set, &idx, SpatialMode::GroupAvg, TemporalMode::Global).unwrap(),
            pre.matrix(&set, &idx, SpatialMode::GroupAvg, TemporalMode::Global).unwrap()
        );
    }
}
