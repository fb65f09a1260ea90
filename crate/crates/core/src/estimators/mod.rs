//! Downstream regressors on pooled feature vectors: L1-penalized linear
//! regression, a two-layer batch-normalized network and an RBF ε-SVR, plus
//! the Pearson and MSE metrics and the binary model container.

mod dnn;
mod lasso;
mod mdl1;
mod svr;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use dnn::{fit_dnn, DnnConfig, DnnGrads, DnnModel, BN_EPS};
pub use lasso::{fit_lasso, fit_linear, lasso_gradient, lambda_max, LinearModel, MAX_SWEEPS, TOLERANCE};
pub use mdl1::{load_model, read_model, save_model, write_model};
pub use svr::{dual_objective, fit_svr, rbf_kernel, scale_gamma, solve_dual, DualSolution, SvrConfig, SvrModel};

/// Smallest standard deviation a feature is divided by.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("feature dimension {got} does not match the model's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("correlation is undefined for a constant vector")]
    ConstantInput,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error("{file}: malformed model at offset {offset}: {reason}")]
    Format {
        file: String,
        offset: u64,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-feature train-set mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
        let std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, EstimatorError> {
        self.check(x.ncols())?;
        let mut z = x.to_owned();
        for mut row in z.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(z)
    }

    pub fn transform_row(&self, x: ArrayView1<f64>) -> Result<Vec<f64>, EstimatorError> {
        self.check(x.len())?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    fn check(&self, got: usize) -> Result<(), EstimatorError> {
        if got != self.dim() {
            return Err(EstimatorError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "linear", alias = "lasso")]
    Linear,
    #[serde(rename = "dnn", alias = "mlp")]
    Dnn,
    #[serde(rename = "svm", alias = "svr")]
    Svr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Linear, EstimatorKind::Dnn, EstimatorKind::Svr];

    /// The hyperparameter grid searched during model selection.
    pub fn default_grid(self) -> Vec<Hyper> {
        match self {
            EstimatorKind::Linear => [0.0, 0.5, 1.0].into_iter().map(Hyper::Lambda).collect(),
            EstimatorKind::Dnn => [5e-4, 1e-4, 5e-5, 1e-5].into_iter().map(Hyper::Lr).collect(),
            EstimatorKind::Svr => vec![Hyper::Fixed],
        }
    }

    /// Whether `h` belongs to the grid this estimator is normally restricted to.
    pub fn in_default_grid(self, h: Hyper) -> bool {
        self.default_grid().contains(&h)
    }

    fn tag(self) -> u8 {
        match self {
            EstimatorKind::Linear => 1,
            EstimatorKind::Dnn => 2,
            EstimatorKind::Svr => 3,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Linear => "linear",
            EstimatorKind::Dnn => "dnn",
            EstimatorKind::Svr => "svm",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "lasso" => Ok(EstimatorKind::Linear),
            "dnn" | "mlp" => Ok(EstimatorKind::Dnn),
            "svm" | "svr" => Ok(EstimatorKind::Svr),
            _ => Err(format!("unknown estimator '{s}' (linear, dnn, svm)")),
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Hyper {
    Lambda(f64),
    Lr(f64),
    Fixed,
}

impl fmt::Display for Hyper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hyper::Lambda(l) => write!(f, "lambda={l}"),
            Hyper::Lr(l) => write!(f, "lr={l}"),
            Hyper::Fixed => f.write_str("fixed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Dnn(DnnModel),
    Svr(SvrModel),
}

impl Model {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Model::Linear(_) => EstimatorKind::Linear,
            Model::Dnn(_) => EstimatorKind::Dnn,
            Model::Svr(_) => EstimatorKind::Svr,
        }
    }

    pub fn standardizer(&self) -> &Standardizer {
        match self {
            Model::Linear(m) => &m.standardizer,
            Model::Dnn(m) => &m.standardizer,
            Model::Svr(m) => &m.standardizer,
        }
    }

    pub fn dim(&self) -> usize {
        self.standardizer().dim()
    }

    pub fn hyper(&self) -> Hyper {
        match self {
            Model::Linear(m) => Hyper::Lambda(m.lambda),
            Model::Dnn(m) => Hyper::Lr(m.config.lr),
            Model::Svr(_) => Hyper::Fixed,
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, EstimatorError> {
        match self {
            Model::Linear(m) => m.predict(x),
            Model::Dnn(m) => m.predict(x),
            Model::Svr(m) => m.predict(x),
        }
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<f64, EstimatorError> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.predict(row)?[0])
    }
}

/// Fits one estimator at one grid point.
pub fn fit(kind: EstimatorKind, hyper: Hyper, x: ArrayView2<f64>, y: &[f64], dnn: &DnnConfig) -> Result<Model, EstimatorError> {
    match (kind, hyper) {
        (EstimatorKind::Linear, Hyper::Lambda(l)) => Ok(Model::Linear(fit_linear(x, y, l)?)),
        (EstimatorKind::Dnn, Hyper::Lr(lr)) => Ok(Model::Dnn(fit_dnn(x, y, &DnnConfig { lr, ..dnn.clone() })?)),
        (EstimatorKind::Svr, Hyper::Fixed) => Ok(Model::Svr(fit_svr(x, y, &SvrConfig::default())?)),
        (k, h) => Err(EstimatorError::InvalidConfig(format!("{h} is not a hyperparameter of {k}"))),
    }
}

pub(crate) fn check_finite(x: ArrayView2<f64>, y: &[f64]) -> Result<(), EstimatorError> {
    if x.nrows() != y.len() {
        return Err(EstimatorError::InvalidConfig(format!(
            "{} feature rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::NonFinite("features".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::NonFinite("targets".into()));
    }
    Ok(())
}

/// Mean and population standard deviation, the latter floored.
pub(crate) fn target_scale(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let s = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    (m, s.max(STD_FLOOR))
}

/// Centered Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EstimatorError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EstimatorError::InvalidConfig(format!(
            "pearson needs two equal-length vectors of length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EstimatorError::ConstantInput);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse needs equal lengths");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(EstimatorError::ConstantInput)));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.5, -2.0], &[1.5, -2.0]), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
        assert_eq!(mse(&[0.0, 2.0], &[1.0, 1.0]), 1.0);
    }

    #[test]
    fn standardizer_floors_constant_columns() {
        let x = array![[1.0, 5.0], [3.0, 5.0]];
        let s = Standardizer::fit(x.view());
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, STD_FLOOR]);
        let z = s.transform(x.view()).unwrap();
        assert_eq!(z, array![[-1.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            s.transform(array![[1.0]].view()),
            Err(EstimatorError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn grids_are_the_declared_sets() {
        assert_eq!(EstimatorKind::Linear.default_grid().len(), 3);
        assert_eq!(
            EstimatorKind::Dnn.default_grid(),
            vec![Hyper::Lr(5e-4), Hyper::Lr(1e-4), Hyper::Lr(5e-5), Hyper::Lr(1e-5)]
        );
        assert_eq!(EstimatorKind::Svr.default_grid(), vec![Hyper::Fixed]);
        assert!("svm".parse::<EstimatorKind>().unwrap() == EstimatorKind::Svr);
        assert!("lstm".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn mismatched_hyper_is_rejected() {
        let x = array![[1.0], [2.0]];
        let err = fit(EstimatorKind::Linear, Hyper::Lr(1e-4), x.view(), &[1.0, 2.0], &DnnConfig::default());
        assert!(matches!(err, Err(EstimatorError::InvalidConfig(_))));
    }

    #[test]
    fn scaling_a_feature_leaves_predictions_unchanged() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let x = Array2::from_shape_fn((n, 6), |_| rng.gen_range(-1.0f64..1.0));
        let y: Vec<f64> = (0..n).map(|i| x[[i, 0]] * 2.0 - x[[i, 3]] + 0.1 * x[[i, 5]].sin()).collect();
        let mut x10 = x.clone();
        x10.column_mut(2).mapv_inplace(|v| v * 10.0);
        let small = DnnConfig {
            epochs: 5,
            hidden: Some(4),
            ..DnnConfig::default()
        };
        for (kind, hyper) in [
            (EstimatorKind::Linear, Hyper::Lambda(0.0)),
            (EstimatorKind::Linear, Hyper::Lambda(0.5)),
            (EstimatorKind::Svr, Hyper::Fixed),
            (EstimatorKind::Dnn, Hyper::Lr(5e-4)),
        ] {
            let a = fit(kind, hyper, x.view(), &y, &small).unwrap().predict(x.view()).unwrap();
            let b = fit(kind, hyper, x10.view(), &y, &small).unwrap().predict(x10.view()).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-6, "{kind}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn identical_rows_predict_identically() {
        let x = Array2::from_shape_fn((12, 3), |(i, j)| ((i / 2) * 3 + j) as f64);
        let y: Vec<f64> = (0..12).map(|i| (i / 2) as f64).collect();
        let cfg = DnnConfig {
            epochs: 3,
            hidden: Some(2),
            ..DnnConfig::default()
        };
        for kind in EstimatorKind::ALL {
            let m = fit(kind, kind.default_grid()[0], x.view(), &y, &cfg).unwrap();
            let p = m.predict(x.view()).unwrap();
            for i in (0..12).step_by(2) {
                assert_eq!(p[i], p[i + 1]);
            }
        }
    }
}
