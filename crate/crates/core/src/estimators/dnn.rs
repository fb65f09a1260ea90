use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_finite, target_scale, EstimatorError, Standardizer};

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Training aborts once the batch loss exceeds this.
const DIVERGED: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct DnnConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Hidden width; `None` means input/9.
    pub hidden: Option<usize>,
}

impl Default for DnnConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            hidden: None,
        }
    }
}

impl DnnConfig {
    pub fn hidden_for(&self, input: usize) -> usize {
        self.hidden.unwrap_or((input / 9).max(1))
    }
}

/// Affine → batch norm → ReLU → affine. Targets are standardized internally.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnModel {
    pub standardizer: Standardizer,
    pub target_mean: f64,
    pub target_std: f64,
    /// `[hidden × input]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub config: DnnConfig,
}

/// Parameter gradients, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl DnnGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.w1.iter().copied().collect();
        for a in [&self.b1, &self.gamma, &self.beta, &self.w2] {
            v.extend(a.iter());
        }
        v.push(self.b2);
        v
    }
}

struct BatchStats {
    mean: Array1<f64>,
    var: Array1<f64>,
}

impl DnnModel {
    /// Uniform `±1/√fan_in` initialization with batch-norm at identity.
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (input as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Array2::from_shape_fn((hidden, input), |_| rng.gen_range(-a1..a1));
        let b1 = Array1::from_shape_fn(hidden, |_| rng.gen_range(-a1..a1));
        let w2 = Array1::from_shape_fn(hidden, |_| rng.gen_range(-a2..a2));
        let b2 = rng.gen_range(-a2..a2);
        Self {
            standardizer: Standardizer::identity(input),
            target_mean: 0.0,
            target_std: 1.0,
            w1,
            b1,
            gamma: Array1::ones(hidden),
            beta: Array1::zeros(hidden),
            running_mean: Array1::zeros(hidden),
            running_var: Array1::ones(hidden),
            w2,
            b2,
            config: DnnConfig {
                hidden: Some(hidden),
                seed,
                ..DnnConfig::default()
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden_dim();
        h * self.input_dim() + 4 * h + 1
    }

    pub fn params(&self) -> Vec<f64> {
        DnnGrads {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            w2: self.w2.clone(),
            b2: self.b2,
        }
        .flatten()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let (h, d) = self.w1.dim();
        self.w1.iter_mut().zip(&p[..h * d]).for_each(|(a, b)| *a = *b);
        let mut at = h * d;
        for a in [&mut self.b1, &mut self.gamma, &mut self.beta, &mut self.w2] {
            a.iter_mut().zip(&p[at..at + h]).for_each(|(x, y)| *x = *y);
            at += h;
        }
        self.b2 = p[at];
    }

    fn pre_activation(&self, z: ArrayView2<f64>) -> Array2<f64> {
        z.dot(&self.w1.t()) + &self.b1
    }

    /// Output in standardized-target units for already standardized inputs, using running statistics.
    fn forward_eval(&self, z: ArrayView2<f64>) -> Array1<f64> {
        let mut a = self.pre_activation(z);
        let scale: Array1<f64> = (&self.running_var + BN_EPS).mapv(|v| 1.0 / v.sqrt()) * &self.gamma;
        for mut row in a.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = ((*v - self.running_mean[k]) * scale[k] + self.beta[k]).max(0.0);
            }
        }
        a.dot(&self.w2) + self.b2
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, EstimatorError> {
        let z = self.standardizer.transform(x)?;
        Ok(self
            .forward_eval(z.view())
            .iter()
            .map(|o| self.target_mean + self.target_std * o)
            .collect())
    }

    /// Batch MSE and its gradients in training mode (batch statistics) on
    /// standardized inputs and targets. Does not touch running statistics.
    pub fn loss_and_grads(&self, z: ArrayView2<f64>, t: &[f64]) -> (f64, DnnGrads) {
        let (loss, grads, _) = self.train_step_grads(z, t);
        (loss, grads)
    }

    /// Batch MSE in training mode.
    pub fn batch_loss(&self, z: ArrayView2<f64>, t: &[f64]) -> f64 {
        let pre = self.pre_activation(z);
        let stats = batch_stats(&pre);
        let (_, act) = self.normalize_train(&pre, &stats);
        let out = act.dot(&self.w2) + self.b2;
        out.iter().zip(t).map(|(o, y)| (o - y) * (o - y)).sum::<f64>() / t.len() as f64
    }

    fn normalize_train(&self, pre: &Array2<f64>, stats: &BatchStats) -> (Array2<f64>, Array2<f64>) {
        let inv_std = stats.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (pre - &stats.mean) * &inv_std;
        let act = (&xhat * &self.gamma + &self.beta).mapv(|v| v.max(0.0));
        (xhat, act)
    }

    fn train_step_grads(&self, z: ArrayView2<f64>, t: &[f64]) -> (f64, DnnGrads, BatchStats) {
        let m = t.len() as f64;
        let pre = self.pre_activation(z);
        let stats = batch_stats(&pre);
        let inv_std = stats.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let (xhat, act) = self.normalize_train(&pre, &stats);
        let out = act.dot(&self.w2) + self.b2;
        let diff: Array1<f64> = out.iter().zip(t).map(|(o, y)| o - y).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
        let dout = &diff * (2.0 / m);

        let dw2 = act.t().dot(&dout);
        let db2 = dout.sum();
        let mut dy = Array2::zeros(act.raw_dim());
        for (i, mut row) in dy.rows_mut().into_iter().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                if act[[i, k]] > 0.0 {
                    *v = dout[i] * self.w2[k];
                }
            }
        }
        let dgamma = (&dy * &xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &xhat).sum_axis(Axis(0));
        let dpre = ((&dxhat * m - &sum_dxhat) - &xhat * &sum_dxhat_xhat) * &(inv_std / m);
        let dw1 = dpre.t().dot(&z);
        let db1 = dpre.sum_axis(Axis(0));
        (
            loss,
            DnnGrads {
                w1: dw1,
                b1: db1,
                gamma: dgamma,
                beta: dbeta,
                w2: dw2,
                b2: db2,
            },
            stats,
        )
    }

    /// Continues training on standardized inputs `z` and targets `t`.
    pub fn train(&mut self, z: ArrayView2<f64>, t: &[f64], cfg: &DnnConfig) -> Result<(), EstimatorError> {
        let n = t.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
        let mut adam = Adam::new(self.n_params());
        let bs = cfg.batch_size.max(2);
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr * 0.5 * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos());
            order.shuffle(&mut rng);
            let mut batches: Vec<&[usize]> = order.chunks(bs).collect();
            // A single-sample batch has no batch variance; fold it into its predecessor.
            if batches.len() > 1 && batches.last().unwrap().len() == 1 {
                batches.pop();
                let k = batches.len() - 1;
                let start = k * bs;
                batches[k] = &order[start..];
            }
            for idx in batches {
                let zb = z.select(Axis(0), idx);
                let tb: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
                let (loss, grads, stats) = self.train_step_grads(zb.view(), &tb);
                if !loss.is_finite() || loss > DIVERGED {
                    return Err(EstimatorError::NonFinite(format!("DNN loss diverged to {loss} in epoch {epoch}")));
                }
                let mb = idx.len() as f64;
                self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
                let unbiased = stats.var * (mb / (mb - 1.0));
                self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
                let mut p = self.params();
                adam.step(&mut p, &grads.flatten(), lr);
                self.set_params(&p);
            }
        }
        Ok(())
    }
}

fn batch_stats(pre: &Array2<f64>) -> BatchStats {
    let m = pre.nrows() as f64;
    let mean = pre.sum_axis(Axis(0)) / m;
    let var = (pre - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / m;
    BatchStats { mean, var }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Standardizes inputs and targets, initializes from `cfg.seed` and trains with Adam under cosine annealing.
pub fn fit_dnn(x: ArrayView2<f64>, y: &[f64], cfg: &DnnConfig) -> Result<DnnModel, EstimatorError> {
    check_finite(x, y)?;
    if y.len() < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: y.len() });
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || cfg.epochs == 0 {
        return Err(EstimatorError::InvalidConfig(format!(
            "DNN needs lr > 0 and epochs ≥ 1, got lr={} epochs={}",
            cfg.lr, cfg.epochs
        )));
    }
    let d = x.ncols();
    let mut model = DnnModel::init(d, cfg.hidden_for(d), cfg.seed);
    model.config = cfg.clone();
    model.standardizer = Standardizer::fit(x);
    let (tm, ts) = target_scale(y);
    model.target_mean = tm;
    model.target_std = ts;
    let z = model.standardizer.transform(x)?;
    let t: Vec<f64> = y.iter().map(|v| (v - tm) / ts).collect();
    model.train(z.view(), &t, cfg)?;
    Ok(model)
}
