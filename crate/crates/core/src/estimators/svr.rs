use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use super::{check_finite, EstimatorError, Standardizer};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SvrConfig {
    pub c: f64,
    pub epsilon: f64,
    /// RBF width; `None` means `1 / (d · var(Z))` on the standardized training matrix.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: 0.1,
            gamma: None,
            tol: 1e-3,
            max_iter: 100_000,
        }
    }
}

/// `f(x) = Σ coef_i · exp(−γ‖z_i − z‖²) + bias` on standardized `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub standardizer: Standardizer,
    pub support: Array2<f64>,
    /// `α_i − α_i*`, one per support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
}

/// Solution of the 2n-variable dual.
#[derive(Debug, Clone)]
pub struct DualSolution {
    /// `[α; α*]`
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub objective: f64,
    pub iterations: usize,
}

fn rbf(a: ArrayView1<f64>, b: ArrayView1<f64>, gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

pub fn rbf_kernel(z: ArrayView2<f64>, gamma: f64) -> Array2<f64> {
    let n = z.nrows();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = rbf(z.row(i), z.row(j), gamma);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// `½αᵀQα + pᵀα` for the ε-SVR dual in `[α; α*]` form.
pub fn dual_objective(k: &Array2<f64>, z: &[f64], epsilon: f64, alpha: &[f64]) -> f64 {
    let n = z.len();
    let beta: Vec<f64> = (0..n).map(|i| alpha[i] - alpha[i + n]).collect();
    let quad: f64 = (0..n)
        .map(|i| beta[i] * (0..n).map(|j| k[[i, j]] * beta[j]).sum::<f64>())
        .sum();
    let lin: f64 = (0..n)
        .map(|i| (epsilon - z[i]) * alpha[i] + (epsilon + z[i]) * alpha[i + n])
        .sum();
    0.5 * quad + lin
}

/// Pairwise (SMO) decomposition with second-order working-set selection.
pub fn solve_dual(k: &Array2<f64>, z: &[f64], cfg: &SvrConfig) -> DualSolution {
    let n = z.len();
    let l = 2 * n;
    let c = cfg.c;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let q = |s: usize, t: usize| sign(s) * sign(t) * k[[s % n, t % n]];
    let qd: Vec<f64> = (0..l).map(|t| k[[t % n, t % n]]).collect();
    let mut alpha = vec![0.0; l];
    let mut g: Vec<f64> = (0..l)
        .map(|t| if t < n { cfg.epsilon - z[t] } else { cfg.epsilon + z[t - n] })
        .collect();
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..l {
            let v = -sign(t) * g[t];
            let in_up = if sign(t) > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if in_up && v >= gmax {
                gmax = v;
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..l {
            let in_low = if sign(t) > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
            if !in_low {
                continue;
            }
            let v = sign(t) * g[t];
            gmax2 = gmax2.max(v);
            let grad_diff = gmax + v;
            if grad_diff > 0.0 {
                let quad = qd[i] + qd[t] - 2.0 * sign(i) * sign(t) * q(i, t);
                let obj = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < cfg.tol || j == usize::MAX {
            break;
        }
        iterations += 1;
        let (oi, oj) = (alpha[i], alpha[j]);
        let qij = q(i, j);
        if sign(i) != sign(j) {
            let quad = (qd[i] + qd[j] + 2.0 * qij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * qij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - oi, alpha[j] - oj);
        for t in 0..l {
            g[t] += q(t, i) * di + q(t, j) * dj;
        }
    }
    // Bias from free variables, else the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..l {
        let yg = sign(t) * g[t];
        if upper(alpha[t]) {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    let objective = 0.5
        * (0..l)
            .map(|t| alpha[t] * (g[t] + if t < n { cfg.epsilon - z[t] } else { cfg.epsilon + z[t - n] }))
            .sum::<f64>();
    DualSolution {
        alpha,
        rho,
        objective,
        iterations,
    }
}

/// `1 / (d · var)` over all entries of the standardized matrix.
pub fn scale_gamma(z: ArrayView2<f64>) -> f64 {
    let n = z.len() as f64;
    let m = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (z.ncols() as f64 * var)
    } else {
        1.0
    }
}

pub fn fit_svr(x: ArrayView2<f64>, y: &[f64], cfg: &SvrConfig) -> Result<SvrModel, EstimatorError> {
    check_finite(x, y)?;
    if y.len() < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: y.len() });
    }
    if !(cfg.c > 0.0 && cfg.epsilon >= 0.0) {
        return Err(EstimatorError::InvalidConfig(format!(
            "SVR needs C > 0 and ε ≥ 0, got C={} ε={}",
            cfg.c, cfg.epsilon
        )));
    }
    let standardizer = Standardizer::fit(x);
    let z = standardizer.transform(x)?;
    let gamma = cfg.gamma.unwrap_or_else(|| scale_gamma(z.view()));
    let k = rbf_kernel(z.view(), gamma);
    let sol = solve_dual(&k, y, cfg);
    log::debug!("svr: {} SMO iterations, objective {:.6}", sol.iterations, sol.objective);
    let n = y.len();
    let keep: Vec<usize> = (0..n).filter(|&i| sol.alpha[i] - sol.alpha[i + n] != 0.0).collect();
    let coef: Vec<f64> = keep.iter().map(|&i| sol.alpha[i] - sol.alpha[i + n]).collect();
    if coef.iter().any(|v| !v.is_finite()) || !sol.rho.is_finite() {
        return Err(EstimatorError::NonFinite("SVR dual solution".into()));
    }
    Ok(SvrModel {
        standardizer,
        support: z.select(Axis(0), &keep),
        coef,
        bias: -sol.rho,
        gamma,
        c: cfg.c,
        epsilon: cfg.epsilon,
    })
}

impl SvrModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, EstimatorError> {
        let z = self.standardizer.transform(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|row| {
                self.bias
                    + self
                        .support
                        .rows()
                        .into_iter()
                        .zip(&self.coef)
                        .map(|(s, c)| c * rbf(s, row, self.gamma))
                        .sum::<f64>()
            })
            .collect())
    }
}
