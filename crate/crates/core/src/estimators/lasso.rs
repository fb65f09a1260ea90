use ndarray::{Array2, ArrayView2};

use super::{check_finite, target_scale, EstimatorError, Standardizer};

/// Largest coordinate change at which descent stops.
pub const TOLERANCE: f64 = 1e-7;
pub const MAX_SWEEPS: usize = 10_000;

/// `w` lives in standardized feature space. Predictions are
/// `target_mean + target_std · (b + w·z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda: f64,
    pub standardizer: Standardizer,
    pub target_mean: f64,
    pub target_std: f64,
    pub sweeps: usize,
}

impl LinearModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, EstimatorError> {
        let z = self.standardizer.transform(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|row| {
                let lin: f64 = row.iter().zip(&self.w).map(|(a, b)| a * b).sum();
                self.target_mean + self.target_std * (self.b + lin)
            })
            .collect())
    }

    /// Coefficients mapped back to raw feature units.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.standardizer.std)
            .map(|(w, s)| self.target_std * w / s)
            .collect()
    }
}

// Standardized columns, stored contiguously per feature.
struct Columns {
    n: usize,
    data: Vec<f64>,
}

impl Columns {
    fn new(z: &Array2<f64>) -> Self {
        let (n, d) = z.dim();
        let mut data = vec![0.0; n * d];
        for (i, row) in z.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                data[j * n + i] = *v;
            }
        }
        Self { n, data }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Smallest λ at which every coefficient is zero for targets `y`.
pub fn lambda_max(x: ArrayView2<f64>, y: &[f64]) -> f64 {
    let z = Standardizer::fit(x).transform(x).expect("own standardizer");
    let n = y.len() as f64;
    let ym = y.iter().sum::<f64>() / n;
    z.columns()
        .into_iter()
        .map(|c| (c.iter().zip(y).map(|(a, b)| a * (b - ym)).sum::<f64>() / n).abs())
        .fold(0.0, f64::max)
}

fn descend(z: &Array2<f64>, y: &[f64], lambda: f64) -> (Vec<f64>, f64, usize) {
    let (n, d) = z.dim();
    let cols = Columns::new(z);
    let nf = n as f64;
    let b = y.iter().sum::<f64>() / nf;
    let mut r: Vec<f64> = y.iter().map(|v| v - b).collect();
    let curv: Vec<f64> = (0..d)
        .map(|j| cols.col(j).iter().map(|v| v * v).sum::<f64>() / nf)
        .collect();
    let mut w = vec![0.0; d];
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        for j in 0..d {
            if curv[j] == 0.0 {
                continue;
            }
            let c = cols.col(j);
            let rho = c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + w[j] * curv[j];
            let new = soft_threshold(rho, lambda) / curv[j];
            let step = new - w[j];
            if step != 0.0 {
                for (ri, ci) in r.iter_mut().zip(c) {
                    *ri -= ci * step;
                }
                w[j] = new;
                max_step = max_step.max(step.abs());
            }
        }
        if max_step < TOLERANCE {
            break;
        }
    }
    (w, b, sweeps)
}

/// Cyclic coordinate descent on `(1/2n)·‖y − Zw − b‖² + λ‖w‖₁`, with `Z` the
/// standardized features and `y` in its own units.
pub fn fit_lasso(x: ArrayView2<f64>, y: &[f64], lambda: f64) -> Result<LinearModel, EstimatorError> {
    fit_scaled(x, y, lambda, false)
}

/// As [`fit_lasso`], but the target is standardized too, so λ is measured in
/// correlation units.
pub fn fit_linear(x: ArrayView2<f64>, y: &[f64], lambda: f64) -> Result<LinearModel, EstimatorError> {
    fit_scaled(x, y, lambda, true)
}

fn fit_scaled(x: ArrayView2<f64>, y: &[f64], lambda: f64, scale_target: bool) -> Result<LinearModel, EstimatorError> {
    check_finite(x, y)?;
    if y.len() < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: y.len() });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EstimatorError::InvalidConfig(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let standardizer = Standardizer::fit(x);
    let z = standardizer.transform(x)?;
    let (target_mean, target_std) = if scale_target { target_scale(y) } else { (0.0, 1.0) };
    let yt: Vec<f64> = y.iter().map(|v| (v - target_mean) / target_std).collect();
    let (w, b, sweeps) = descend(&z, &yt, lambda);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::NonFinite("lasso coefficients".into()));
    }
    Ok(LinearModel {
        w,
        b,
        lambda,
        standardizer,
        target_mean,
        target_std,
        sweeps,
    })
}

/// Gradient of the smooth part of the objective with respect to `w`, in the
/// model's own (possibly standardized-target) units.
pub fn lasso_gradient(model: &LinearModel, x: ArrayView2<f64>, y: &[f64]) -> Vec<f64> {
    let z = model.standardizer.transform(x).expect("matching dimension");
    let n = y.len() as f64;
    let r: Vec<f64> = z
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, yi)| {
            let fit: f64 = model.b + row.iter().zip(&model.w).map(|(a, b)| a * b).sum::<f64>();
            (yi - model.target_mean) / model.target_std - fit
        })
        .collect();
    z.columns()
        .into_iter()
        .map(|c| -c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / n)
        .collect()
}
