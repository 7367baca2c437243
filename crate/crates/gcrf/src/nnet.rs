//! Minimal feed-forward networks: a single-hidden-layer autoencoder
//! (optionally denoising) and a two-hidden-layer regressor.
//!
//! Both are trained full-batch with Adam, early-stopped on a seeded 10%
//! row holdout, and restore the best-seen weights. A run that produces
//! a non-finite loss backs off the learning rate and restarts from the
//! best weights a few times before reporting divergence. Everything is
//! deterministic given the seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("training diverged even after learning-rate backoff")]
    Diverged,
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn sigmoid_mat(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(sigmoid)
}

/// Row-wise affine map `x W' + b'` for `n x in` inputs.
pub(crate) fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut z = x * w.transpose();
    for mut row in z.row_iter_mut() {
        row += b.transpose();
    }
    z
}

pub(crate) fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

pub(crate) fn uniform_init(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs without holdout improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { epochs: 500, learning_rate: 0.05, patience: 50, seed: 0 }
    }
}

struct Adam {
    lr: f64,
    t: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(dim: usize, lr: f64) -> Self {
        Self { lr, t: 0.0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1.0;
        let bc1 = 1.0 - B1.powf(self.t);
        let bc2 = 1.0 - B2.powf(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

/// Deterministic holdout split: roughly 10% of rows, at least one when
/// there are at least ten.
fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if n < 10 {
        return ((0..n).collect(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held = (n as f64 * 0.1).round().max(1.0) as usize;
    let picks = rand::seq::index::sample(&mut rng, n, held);
    let mut is_held = vec![false; n];
    for i in picks.iter() {
        is_held[i] = true;
    }
    let train = (0..n).filter(|&i| !is_held[i]).collect();
    let held = (0..n).filter(|&i| is_held[i]).collect();
    (train, held)
}

/// Generic early-stopped Adam loop over a flat parameter vector.
///
/// `train_eval(params, grads, rng)` fills `grads` and returns the train
/// loss (it may corrupt inputs using `rng`); `hold_eval(params)`
/// returns the holdout loss, or `None` when there is no holdout, in
/// which case the train loss drives early stopping.
fn train_loop<FT, FH>(
    mut params: Vec<f64>,
    settings: &TrainSettings,
    mut train_eval: FT,
    hold_eval: FH,
) -> Result<Vec<f64>, NnetError>
where
    FT: FnMut(&[f64], &mut [f64], &mut ChaCha8Rng) -> f64,
    FH: Fn(&[f64]) -> Option<f64>,
{
    let dim = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, 71));
    let mut lr = settings.learning_rate;
    let mut best = params.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut backoffs = 0usize;
    let mut adam = Adam::new(dim, lr);
    let mut grads = vec![0.0; dim];
    let mut epoch = 0usize;
    while epoch < settings.epochs {
        let train_loss = train_eval(&params, &mut grads, &mut rng);
        if !train_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            backoffs += 1;
            if backoffs > 3 {
                return Err(NnetError::Diverged);
            }
            lr *= 0.2;
            params = best.clone();
            adam = Adam::new(dim, lr);
            continue;
        }
        adam.step(&mut params, &grads);
        let score = hold_eval(&params).unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best = params.clone();
            best_epoch = epoch;
        }
        if epoch - best_epoch > settings.patience {
            break;
        }
        epoch += 1;
    }
    Ok(best)
}

/// Single-hidden-layer autoencoder: sigmoid encoder, linear decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub w_enc: DMatrix<f64>,
    pub b_enc: DVector<f64>,
    pub w_dec: DMatrix<f64>,
    pub b_dec: DVector<f64>,
}

impl Autoencoder {
    fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 17));
        Self {
            w_enc: uniform_init(hidden, input, input, &mut rng),
            b_enc: DVector::zeros(hidden),
            w_dec: uniform_init(input, hidden, hidden, &mut rng),
            b_dec: DVector::zeros(input),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    /// Sigmoid code for each row; entries in (0, 1).
    pub fn encode(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        sigmoid_mat(&affine(x, &self.w_enc, &self.b_enc))
    }

    pub fn reconstruct(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        affine(&self.encode(x), &self.w_dec, &self.b_dec)
    }

    /// Mean squared reconstruction error per cell.
    pub fn reconstruction_error(&self, x: &DMatrix<f64>) -> f64 {
        let diff = self.reconstruct(x) - x;
        diff.norm_squared() / (x.nrows() * x.ncols()) as f64
    }

    fn flatten(&self) -> Vec<f64> {
        self.w_enc
            .iter()
            .chain(self.b_enc.iter())
            .chain(self.w_dec.iter())
            .chain(self.b_dec.iter())
            .copied()
            .collect()
    }

    fn unflatten(&self, x: &[f64]) -> Self {
        let (h, m) = (self.hidden_dim(), self.input_dim());
        let mut at = 0usize;
        let mut take = |len: usize| {
            let s = &x[at..at + len];
            at += len;
            s
        };
        Self {
            w_enc: DMatrix::from_column_slice(h, m, take(h * m)),
            b_enc: DVector::from_column_slice(take(h)),
            w_dec: DMatrix::from_column_slice(m, h, take(m * h)),
            b_dec: DVector::from_column_slice(take(m)),
        }
    }

    /// Reconstruction loss of `target` from (possibly corrupted) input
    /// rows, with gradients in `flatten` layout.
    fn loss_and_grad(&self, input: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let n_cells = (target.nrows() * target.ncols()) as f64;
        let code = self.encode(input);
        let recon = affine(&code, &self.w_dec, &self.b_dec);
        let diff = recon - target;
        let loss = diff.norm_squared() / n_cells;
        let d_recon = diff * (2.0 / n_cells);
        let d_wdec = d_recon.transpose() * &code;
        let d_bdec = column_sums(&d_recon);
        let d_code = &d_recon * &self.w_dec;
        let d_z = d_code.zip_map(&code, |g, a| g * a * (1.0 - a));
        let d_wenc = d_z.transpose() * input;
        let d_benc = column_sums(&d_z);
        let grads = Self {
            w_enc: d_wenc,
            b_enc: d_benc,
            w_dec: d_wdec,
            b_dec: d_bdec,
        }
        .flatten();
        (loss, grads)
    }
}

/// Trains an autoencoder on the rows of `x`. `noise_prob > 0` zeroes
/// that fraction of input cells afresh every epoch (masking noise)
/// while reconstruction still targets the clean rows; the holdout is
/// scored on clean inputs.
pub fn train_autoencoder(
    x: &DMatrix<f64>,
    hidden: usize,
    noise_prob: f64,
    settings: &TrainSettings,
) -> Result<Autoencoder, NnetError> {
    if hidden == 0 {
        return Err(NnetError::Shape { what: "hidden units", expected: 1, got: 0 });
    }
    if x.nrows() < 2 {
        return Err(NnetError::Shape { what: "training rows", expected: 2, got: x.nrows() });
    }
    let proto = Autoencoder::init(x.ncols(), hidden, settings.seed);
    let (train_rows, hold_rows) = holdout_split(x.nrows(), derive_seed(settings.seed, 31));
    let x_train = x.select_rows(&train_rows);
    let x_hold = x.select_rows(&hold_rows);

    let best = train_loop(
        proto.flatten(),
        settings,
        |params, grads, rng| {
            let net = proto.unflatten(params);
            let input = if noise_prob > 0.0 {
                x_train.map(|v| if rng.random_bool(noise_prob) { 0.0 } else { v })
            } else {
                x_train.clone()
            };
            let (loss, g) = net.loss_and_grad(&input, &x_train);
            grads.copy_from_slice(&g);
            loss
        },
        |params| {
            if hold_rows.is_empty() {
                None
            } else {
                Some(proto.unflatten(params).reconstruction_error(&x_hold))
            }
        },
    )?;
    Ok(proto.unflatten(&best))
}

/// Regressor `input -> hidden1 (sigmoid) -> hidden2 (sigmoid) -> linear`.
/// The second hidden layer doubles as a learned low-dimensional mapping
/// of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnRegressor {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_out: DVector<f64>,
    pub b_out: f64,
}

impl NnRegressor {
    fn init(input: usize, h1: usize, h2: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 23));
        Self {
            w1: uniform_init(h1, input, input, &mut rng),
            b1: DVector::zeros(h1),
            w2: uniform_init(h2, h1, h1, &mut rng),
            b2: DVector::zeros(h2),
            w_out: DVector::from_fn(h2, |_, _| {
                let bound = 1.0 / (h2 as f64).sqrt();
                rng.random_range(-bound..bound)
            }),
            b_out: 0.0,
        }
    }

    /// Activations of the last hidden layer, `n x h2`, entries in (0, 1).
    pub fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let a1 = sigmoid_mat(&affine(x, &self.w1, &self.b1));
        sigmoid_mat(&affine(&a1, &self.w2, &self.b2))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let a2 = self.hidden(x);
        DVector::from_fn(x.nrows(), |i, _| a2.row(i).transpose().dot(&self.w_out) + self.b_out)
    }

    fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.w_out.iter())
            .chain(std::iter::once(&self.b_out))
            .copied()
            .collect()
    }

    fn unflatten(&self, x: &[f64]) -> Self {
        let (h1, m) = (self.w1.nrows(), self.w1.ncols());
        let h2 = self.w2.nrows();
        let mut at = 0usize;
        let mut take = |len: usize| {
            let s = &x[at..at + len];
            at += len;
            s
        };
        Self {
            w1: DMatrix::from_column_slice(h1, m, take(h1 * m)),
            b1: DVector::from_column_slice(take(h1)),
            w2: DMatrix::from_column_slice(h2, h1, take(h2 * h1)),
            b2: DVector::from_column_slice(take(h2)),
            w_out: DVector::from_column_slice(take(h2)),
            b_out: take(1)[0],
        }
    }

    fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> (f64, Vec<f64>) {
        let n = x.nrows() as f64;
        let a1 = sigmoid_mat(&affine(x, &self.w1, &self.b1));
        let a2 = sigmoid_mat(&affine(&a1, &self.w2, &self.b2));
        let pred = DVector::from_fn(x.nrows(), |i, _| {
            a2.row(i).transpose().dot(&self.w_out) + self.b_out
        });
        let resid = pred - y;
        let loss = resid.norm_squared() / n;
        let d_pred = resid * (2.0 / n);
        let d_wout = a2.transpose() * &d_pred;
        let d_bout = d_pred.sum();
        let d_a2 = &d_pred * self.w_out.transpose();
        let d_z2 = d_a2.zip_map(&a2, |g, a| g * a * (1.0 - a));
        let d_w2 = d_z2.transpose() * &a1;
        let d_b2 = column_sums(&d_z2);
        let d_a1 = &d_z2 * &self.w2;
        let d_z1 = d_a1.zip_map(&a1, |g, a| g * a * (1.0 - a));
        let d_w1 = d_z1.transpose() * x;
        let d_b1 = column_sums(&d_z1);
        let grads = Self {
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
            w_out: d_wout,
            b_out: d_bout,
        }
        .flatten();
        (loss, grads)
    }

    pub fn mse(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let resid = self.predict(x) - y;
        resid.norm_squared() / x.nrows() as f64
    }
}

/// Trains the regressor on rows of `x` against `y`.
pub fn train_nn(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h1: usize,
    h2: usize,
    settings: &TrainSettings,
) -> Result<NnRegressor, NnetError> {
    if h1 == 0 || h2 == 0 {
        return Err(NnetError::Shape { what: "hidden units", expected: 1, got: 0 });
    }
    if y.len() != x.nrows() {
        return Err(NnetError::Shape { what: "targets", expected: x.nrows(), got: y.len() });
    }
    if x.nrows() < 2 {
        return Err(NnetError::Shape { what: "training rows", expected: 2, got: x.nrows() });
    }
    let proto = NnRegressor::init(x.ncols(), h1, h2, settings.seed);
    let (train_rows, hold_rows) = holdout_split(x.nrows(), derive_seed(settings.seed, 37));
    let x_train = x.select_rows(&train_rows);
    let y_train = y.select_rows(&train_rows);
    let x_hold = x.select_rows(&hold_rows);
    let y_hold = y.select_rows(&hold_rows);

    let best = train_loop(
        proto.flatten(),
        settings,
        |params, grads, _| {
            let net = proto.unflatten(params);
            let (loss, g) = net.loss_and_grad(&x_train, &y_train);
            grads.copy_from_slice(&g);
            loss
        },
        |params| {
            if hold_rows.is_empty() {
                None
            } else {
                Some(proto.unflatten(params).mse(&x_hold, &y_hold))
            }
        },
    )?;
    Ok(proto.unflatten(&best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn random_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.5..1.5))
    }

    fn mixed_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
    }

    #[test]
    fn autoencoder_gradient_matches_finite_differences() {
        let x = random_matrix(6, 4, 1);
        let net = Autoencoder::init(4, 3, 5);
        let flat = net.flatten();
        let (_, grads) = net.loss_and_grad(&x, &x);
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let (lp, _) = net.unflatten(&plus).loss_and_grad(&x, &x);
            let (lm, _) = net.unflatten(&minus).loss_and_grad(&x, &x);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                mixed_err(grads[i], fd) < 1e-6,
                "param {i}: analytic {} vs fd {fd}",
                grads[i]
            );
        }
    }

    #[test]
    fn regressor_gradient_matches_finite_differences() {
        let x = random_matrix(7, 3, 2);
        let y = DVector::from_fn(7, |i, _| x[(i, 0)] - 0.5 * x[(i, 2)]);
        let net = NnRegressor::init(3, 4, 2, 9);
        let flat = net.flatten();
        let (_, grads) = net.loss_and_grad(&x, &y);
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let (lp, _) = net.unflatten(&plus).loss_and_grad(&x, &y);
            let (lm, _) = net.unflatten(&minus).loss_and_grad(&x, &y);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                mixed_err(grads[i], fd) < 1e-6,
                "param {i}: analytic {} vs fd {fd}",
                grads[i]
            );
        }
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let x = random_matrix(40, 5, 3);
        let start = Autoencoder::init(5, 3, 4).reconstruction_error(&x);
        let net = train_autoencoder(&x, 3, 0.0, &TrainSettings { seed: 4, ..Default::default() })
            .unwrap();
        let trained = net.reconstruction_error(&x);
        assert!(trained < start * 0.5, "start {start}, trained {trained}");
    }

    #[test]
    fn denoising_autoencoder_trains_and_encodes_into_unit_interval() {
        let x = random_matrix(30, 4, 8);
        let net = train_autoencoder(&x, 2, 0.3, &TrainSettings { seed: 5, ..Default::default() })
            .unwrap();
        let code = net.encode(&x);
        assert!(code.iter().all(|&c| c > 0.0 && c < 1.0));
        assert!(net.reconstruction_error(&x).is_finite());
    }

    #[test]
    fn regressor_fits_a_linear_function() {
        let x = random_matrix(120, 2, 6);
        let y = DVector::from_fn(120, |i, _| 1.5 * x[(i, 0)] - 2.0 * x[(i, 1)] + 0.5);
        let settings = TrainSettings { epochs: 2000, patience: 200, seed: 7, ..Default::default() };
        let net = train_nn(&x, &y, 6, 3, &settings).unwrap();
        let pred = net.predict(&x);
        let mean = y.mean();
        let total: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let r2 = 1.0 - (pred - &y).norm_squared() / total;
        assert!(r2 > 0.99, "train R^2 {r2}");
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let x = random_matrix(25, 3, 10);
        let y = DVector::from_fn(25, |i, _| x[(i, 0)]);
        let settings = TrainSettings { epochs: 50, seed: 11, ..Default::default() };
        let a = train_nn(&x, &y, 4, 2, &settings).unwrap();
        let b = train_nn(&x, &y, 4, 2, &settings).unwrap();
        assert_eq!(a, b);
        let c = train_nn(&x, &y, 4, 2, &TrainSettings { seed: 12, ..settings }).unwrap();
        assert_ne!(a, c);

        let ae_settings = TrainSettings { epochs: 50, seed: 13, ..Default::default() };
        let d = train_autoencoder(&x, 2, 0.2, &ae_settings).unwrap();
        let e = train_autoencoder(&x, 2, 0.2, &ae_settings).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let x = random_matrix(20, 2, 14);
        let y = DVector::from_fn(20, |i, _| 3.0 * x[(i, 0)]);
        // Adam steps are bounded by the learning rate, so the rate has to
        // be astronomical before the loss overflows rather than merely
        // failing to improve.
        let settings = TrainSettings { learning_rate: 1e200, epochs: 200, ..Default::default() };
        assert!(matches!(train_nn(&x, &y, 4, 2, &settings), Err(NnetError::Diverged)));
    }
}
