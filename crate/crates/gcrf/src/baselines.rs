//! Comparison models sharing the field and data infrastructure: ridge
//! regression, Gaussian-process regression, principal components,
//! denoising autoencoders, a plain neural regressor, and pipelines
//! that run the field on top of any of those mappings.
//!
//! Two missing-data policies are supported end to end. Deletion
//! baselines (the `i` prefix) drop incomplete nodes before fitting and
//! hand incomplete test nodes the training mean; imputation baselines
//! (the `0` suffix) consume the stored zero-filled values directly.
//! With nothing missing the two policies coincide exactly.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FeatureMatrix, Snapshot, TemporalDataset};
use crate::dfl::{self, Architecture, DflError};
use crate::gcrf::{self, FitOptions, GcrfError, GcrfParams, Potentials};
use crate::nnet::{self, NnetError, TrainSettings};
use crate::optim::{self, AscentOptions};
use crate::sparse::{SparseError, SymmetricSparse};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gcrf(#[from] GcrfError),
    #[error(transparent)]
    Net(#[from] NnetError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Dfl(#[from] DflError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("hyperparameter {key}: {reason}")]
    BadHyper { key: String, reason: String },
    #[error("normal equations are singular; use a ridge greater than zero")]
    SingularSystem,
    #[error("{what} stayed indefinite even after jitter escalation")]
    CholeskyFailed { what: &'static str },
}

pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Initial kernel noise for the marginal-likelihood search, as a
/// fraction of the response standard deviation.
pub const DEFAULT_NOISE_FRAC: f64 = 0.3;
/// Hyperparameter search runs on at most this many rows; coefficients
/// are still computed on everything.
const GP_SEARCH_CAP: usize = 300;

/// Ridge regression with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub weights: DVector<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(x.nrows(), |i, _| {
            self.intercept + x.row(i).transpose().dot(&self.weights)
        })
    }
}

/// Closed-form solve of the penalized normal equations. Only the
/// slopes are penalized, so an enormous ridge collapses predictions
/// onto the training mean instead of zero.
pub fn fit_lr(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<LinearModel, BaselineError> {
    if y.len() != x.nrows() {
        return Err(BaselineError::Shape { what: "targets", expected: x.nrows(), got: y.len() });
    }
    if x.nrows() == 0 {
        return Err(BaselineError::Shape { what: "training rows", expected: 1, got: 0 });
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(BaselineError::BadHyper {
            key: "ridge".into(),
            reason: "must be finite and nonnegative".into(),
        });
    }
    let (n, m) = (x.nrows(), x.ncols());
    let z = DMatrix::from_fn(n, m + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let mut gram = z.transpose() * &z;
    for j in 1..=m {
        gram[(j, j)] += ridge;
    }
    let rhs = z.transpose() * y;
    let sol = Cholesky::new(gram)
        .ok_or(BaselineError::SingularSystem)?
        .solve(&rhs);
    Ok(LinearModel { intercept: sol[0], weights: sol.rows(1, m).into_owned() })
}

fn row_sqdist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..a.ncols() {
        let d = a[(i, c)] - b[(j, c)];
        s += d * d;
    }
    s
}

/// Squared pairwise distances between the rows of `x`.
fn sqdist_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = row_sqdist(x, i, x, j);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn median_of(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Evenly strided row subset used for the hyperparameter search, so
/// repeated fits stay byte-deterministic without an RNG.
fn search_rows(n: usize) -> Vec<usize> {
    if n <= GP_SEARCH_CAP {
        return (0..n).collect();
    }
    let stride = n.div_ceil(GP_SEARCH_CAP);
    (0..n).step_by(stride).collect()
}

/// Gaussian-process regressor with an RBF kernel
/// `k(a, b) = s^2 exp(-|a-b|^2 / (2 l^2)) + noise^2 [a = b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub x_train: DMatrix<f64>,
    /// `K^-1 (y - mean)`.
    pub coef: DVector<f64>,
    pub y_mean: f64,
    pub signal_var: f64,
    pub log_length: f64,
    pub log_noise: f64,
    /// Diagonal shim that was needed to factorize the train kernel.
    pub jitter: f64,
}

fn kernel_from_sqdist(
    d2: &DMatrix<f64>,
    signal_var: f64,
    log_length: f64,
    log_noise: f64,
    jitter: f64,
) -> DMatrix<f64> {
    let inv_two_l2 = 0.5 / (2.0 * log_length).exp();
    let noise_var = (2.0 * log_noise).exp();
    let mut k = d2.map(|v| signal_var * (-v * inv_two_l2).exp());
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var + jitter;
    }
    k
}

/// Log marginal likelihood and its gradient in `(log_length,
/// log_noise)`; `None` when the kernel cannot be factorized.
fn gp_objective(
    d2: &DMatrix<f64>,
    yc: &DVector<f64>,
    signal_var: f64,
    phi: &[f64],
    jitter: f64,
    want_grad: bool,
) -> Option<(f64, Vec<f64>)> {
    let n = yc.len();
    let k = kernel_from_sqdist(d2, signal_var, phi[0], phi[1], jitter);
    let chol = Cholesky::new(k)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().map(f64::ln).sum();
    let q = chol.solve(yc);
    let value =
        -0.5 * yc.dot(&q) - 0.5 * log_det - 0.5 * n as f64 * std::f64::consts::TAU.ln();
    if !want_grad {
        return Some((value, Vec::new()));
    }
    let a = chol.inverse();
    let inv_l2 = (-2.0 * phi[0]).exp();
    let noise_var = (2.0 * phi[1]).exp();
    // dK/d log_length has entries K_signal .* (d^2 / l^2).
    let mut quad = 0.0;
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            let ks = signal_var * (-0.5 * d2[(i, j)] * inv_l2).exp();
            let dk = ks * d2[(i, j)] * inv_l2;
            quad += q[i] * dk * q[j];
            trace += a[(i, j)] * dk;
        }
    }
    let d_length = 0.5 * quad - 0.5 * trace;
    let d_noise = noise_var * (q.dot(&q) - a.trace());
    Some((value, vec![d_length, d_noise]))
}

/// Maximizes the marginal likelihood over bandwidth and noise: a
/// log-space grid seeded from the median pairwise distance, refined by
/// gradient ascent from the best cell.
fn optimize_kernel(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_init: f64,
) -> Result<(f64, f64), BaselineError> {
    let rows = search_rows(x.nrows());
    let xs = x.select_rows(&rows);
    let ys = y.select_rows(&rows);
    let y_mean = ys.mean();
    let yc = ys.map(|v| v - y_mean);
    let n = rows.len();
    let signal_var = (yc.norm_squared() / n as f64).max(1e-12);
    let sd = signal_var.sqrt();
    let d2 = sqdist_matrix(&xs);

    let mut gaps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            gaps.push(d2[(i, j)].sqrt());
        }
    }
    let med = median_of(gaps);
    let base_length = if med > 0.0 { med } else { 1.0 };
    let jitter = 1e-10 * signal_var;

    let mut lengths: Vec<f64> = [0.1, 0.3, 1.0, 3.0, 10.0]
        .iter()
        .map(|f| (f * base_length).ln())
        .collect();
    lengths.dedup();
    let mut noises: Vec<f64> = [0.05, 0.2, 0.5, 1.0]
        .iter()
        .map(|f| (f * sd).max(1e-8).ln())
        .collect();
    noises.push(noise_init.max(1e-8).ln());

    let mut best = (f64::NEG_INFINITY, vec![base_length.ln(), noise_init.max(1e-8).ln()]);
    for &ll in &lengths {
        for &ln_ in &noises {
            if let Some((value, _)) = gp_objective(&d2, &yc, signal_var, &[ll, ln_], jitter, false)
            {
                if value > best.0 {
                    best = (value, vec![ll, ln_]);
                }
            }
        }
    }
    if !best.0.is_finite() {
        return Err(BaselineError::CholeskyFailed { what: "kernel grid search" });
    }

    let mut eval = |phi: &[f64]| {
        gp_objective(&d2, &yc, signal_var, phi, jitter, true)
            .unwrap_or((f64::NEG_INFINITY, vec![0.0, 0.0]))
    };
    // Each evaluation factorizes an n x n kernel, and hyperparameters a
    // hair off the optimum change predictions negligibly, so the refine
    // stops on the objective plateau rather than a tight gradient.
    let opts = AscentOptions {
        max_iters: 40,
        grad_tol: 1e-4,
        obj_tol: 1e-6,
        memory: 5,
        min_step: 1e-16,
    };
    let out = optim::maximize(&mut eval, best.1, &opts)?;
    Ok((out.x[0], out.x[1]))
}

/// Fits the GP: hyperparameters by marginal likelihood starting the
/// noise search at `noise_init`, then exact coefficients on all rows
/// with jitter escalation if the kernel is borderline.
pub fn fit_gp(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_init: f64,
) -> Result<GpModel, BaselineError> {
    if y.len() != x.nrows() {
        return Err(BaselineError::Shape { what: "targets", expected: x.nrows(), got: y.len() });
    }
    if x.nrows() == 0 {
        return Err(BaselineError::Shape { what: "training rows", expected: 1, got: 0 });
    }
    if !(noise_init > 0.0 && noise_init.is_finite()) {
        return Err(BaselineError::BadHyper {
            key: "noise".into(),
            reason: "must be positive and finite".into(),
        });
    }
    let y_mean = y.mean();
    let sd = (y.map(|v| v - y_mean).norm_squared() / y.len() as f64).sqrt();
    if sd < 1e-12 {
        // Constant targets: any kernel predicts the mean.
        return gp_with_params(x.clone(), y, 1.0f64.ln() * 0.0, noise_init.ln());
    }
    let (log_length, log_noise) = optimize_kernel(x, y, noise_init)?;
    gp_with_params(x.clone(), y, log_length, log_noise)
}

/// Builds the exact posterior at fixed hyperparameters. The signal
/// variance is pinned to the response variance.
pub fn gp_with_params(
    x_train: DMatrix<f64>,
    y: &DVector<f64>,
    log_length: f64,
    log_noise: f64,
) -> Result<GpModel, BaselineError> {
    let y_mean = y.mean();
    let yc = y.map(|v| v - y_mean);
    let n = y.len();
    let signal_var = (yc.norm_squared() / n as f64).max(1e-12);
    let d2 = sqdist_matrix(&x_train);
    let mut jitter = 0.0;
    for _ in 0..9 {
        let k = kernel_from_sqdist(&d2, signal_var, log_length, log_noise, jitter);
        if let Some(chol) = Cholesky::new(k) {
            return Ok(GpModel {
                x_train,
                coef: chol.solve(&yc),
                y_mean,
                signal_var,
                log_length,
                log_noise,
                jitter,
            });
        }
        jitter = if jitter == 0.0 { 1e-8 * signal_var } else { jitter * 10.0 };
    }
    Err(BaselineError::CholeskyFailed { what: "train kernel" })
}

/// Posterior mean at new rows.
pub fn predict_gp(model: &GpModel, x_star: &DMatrix<f64>) -> DVector<f64> {
    let inv_two_l2 = 0.5 / (2.0 * model.log_length).exp();
    DVector::from_fn(x_star.nrows(), |i, _| {
        let mut acc = model.y_mean;
        for j in 0..model.x_train.nrows() {
            let d2 = row_sqdist(x_star, i, &model.x_train, j);
            acc += model.signal_var * (-d2 * inv_two_l2).exp() * model.coef[j];
        }
        acc
    })
}

/// Neighbors each row keeps in the similarity structure.
pub const SIMILARITY_KNN: usize = 10;

/// Unit-amplitude RBF similarity between rows, restricted to the union
/// of each row's [`SIMILARITY_KNN`] nearest neighbors (ties toward the
/// smaller index); this is the optimized train kernel reused as a
/// network structure. Sparsifying keeps the graph local, so only pairs
/// the kernel actually considers close pull on each other.
pub fn similarity_from_bandwidth(
    z: &DMatrix<f64>,
    log_length: f64,
) -> Result<SymmetricSparse, SparseError> {
    let inv_two_l2 = 0.5 / (2.0 * log_length).exp();
    let n = z.nrows();
    let k = SIMILARITY_KNN.min(n.saturating_sub(1));
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            row_sqdist(z, i, z, a)
                .total_cmp(&row_sqdist(z, i, z, b))
                .then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let entries: Vec<(usize, usize, f64)> = edges
        .into_iter()
        .map(|(i, j)| (i, j, (-row_sqdist(z, i, z, j) * inv_two_l2).exp()))
        .collect();
    SymmetricSparse::from_entries(n, &entries)
}

/// Principal components of column-centered data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `m x dims`, orthonormal columns, descending variance. Each
    /// column's largest-magnitude loading is positive.
    pub components: DMatrix<f64>,
    pub explained_variance: DVector<f64>,
    /// True when more dimensions were requested than the data has rank.
    pub rank_deficient: bool,
}

pub fn fit_pca(x: &DMatrix<f64>, dims: usize) -> Result<PcaModel, BaselineError> {
    let (n, m) = (x.nrows(), x.ncols());
    if dims == 0 || dims > m {
        return Err(BaselineError::Shape { what: "projection dims", expected: m, got: dims });
    }
    if n == 0 {
        return Err(BaselineError::Shape { what: "training rows", expected: 1, got: 0 });
    }
    let mean = DVector::from_fn(m, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-10 * lambda_max.max(1e-300))
        .count();
    let mut components = DMatrix::zeros(m, dims);
    let mut explained = DVector::zeros(dims);
    for (out, &idx) in order.iter().take(dims).enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        // Deterministic orientation: largest-magnitude loading positive.
        let mut lead = 0;
        for i in 1..m {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col = -col;
        }
        components.set_column(out, &col);
        explained[out] = eig.eigenvalues[idx].max(0.0);
    }
    Ok(PcaModel { mean, components, explained_variance: explained, rank_deficient: dims > rank })
}

pub fn pca_transform(model: &PcaModel, x: &DMatrix<f64>) -> DMatrix<f64> {
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - model.mean[j]);
    centered * &model.components
}

/// Denoising autoencoder wrapper; the code layer is the reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaeModel {
    pub net: nnet::Autoencoder,
    pub noise_prob: f64,
}

pub fn fit_dae(
    x: &DMatrix<f64>,
    dims: usize,
    noise_prob: f64,
    seed: u64,
) -> Result<DaeModel, BaselineError> {
    if !(0.0..1.0).contains(&noise_prob) {
        return Err(BaselineError::BadHyper {
            key: "noise_prob".into(),
            reason: "must lie in [0, 1)".into(),
        });
    }
    let net = nnet::train_autoencoder(x, dims, noise_prob, &TrainSettings { seed, ..Default::default() })?;
    Ok(DaeModel { net, noise_prob })
}

pub fn dae_encode(model: &DaeModel, x: &DMatrix<f64>) -> DMatrix<f64> {
    model.net.encode(x)
}

/// Feed-forward regressor whose last hidden layer doubles as the
/// learned mapping for the pipeline variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnModel {
    pub net: nnet::NnRegressor,
}

/// Trains the regressor with the same capacity rule as the joint
/// model: hidden width from `n_nodes`, output width `arch.embed_dim`.
pub fn fit_nn(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    arch: &Architecture,
    n_nodes: usize,
    seed: u64,
) -> Result<NnModel, BaselineError> {
    arch.validate()?;
    let h1 = arch.hidden_size(n_nodes, x.ncols());
    let net = nnet::train_nn(x, y, h1, arch.embed_dim, &TrainSettings { seed, ..Default::default() })?;
    Ok(NnModel { net })
}

pub fn nn_map(model: &NnModel, x: &DMatrix<f64>) -> DMatrix<f64> {
    model.net.hidden(x)
}

/// Feature transform feeding a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mapping {
    Identity,
    Pca(PcaModel),
    Dae(DaeModel),
    /// Last hidden layer of a trained regressor.
    Nm(NnModel),
}

impl Mapping {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Mapping::Identity => x.clone(),
            Mapping::Pca(m) => pca_transform(m, x),
            Mapping::Dae(m) => dae_encode(m, x),
            Mapping::Nm(m) => nn_map(m, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub ridge: f64,
    /// Noise the kernel search starts from; defaults to
    /// [`DEFAULT_NOISE_FRAC`] of the response standard deviation.
    pub noise_init: Option<f64>,
    pub gcrf: FitOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { ridge: DEFAULT_RIDGE, noise_init: None, gcrf: FitOptions::default() }
    }
}

/// Field on top of a fixed mapping: a ridge head supplies the
/// unstructured predictions and an RBF kernel on the mapped rows, with
/// its bandwidth chosen by the GP marginal likelihood, supplies the
/// similarity structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedModel {
    pub mapping: Mapping,
    pub linear: LinearModel,
    pub log_length: f64,
    pub crf: GcrfParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedFit {
    pub model: ComposedModel,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub fn compose_pipeline(
    mapping: Mapping,
    ds: &TemporalDataset,
    opts: &PipelineOptions,
) -> Result<ComposedFit, BaselineError> {
    let mut warnings = Vec::new();
    let zs: Vec<DMatrix<f64>> = ds
        .snapshots()
        .iter()
        .map(|snap| mapping.apply(snap.features().values()))
        .collect();
    let z_all = dfl::stack_rows(&zs);
    let y_all = DVector::from_iterator(
        z_all.nrows(),
        ds.snapshots().iter().flat_map(|s| s.response().iter().copied()),
    );
    let linear = fit_lr(&z_all, &y_all, opts.ridge)?;

    let sd = {
        let mean = y_all.mean();
        (y_all.map(|v| v - mean).norm_squared() / y_all.len() as f64).sqrt()
    };
    let noise_init = opts.noise_init.unwrap_or(DEFAULT_NOISE_FRAC * sd).max(1e-8);
    let (log_length, _) = optimize_kernel(&z_all, &y_all, noise_init)?;

    let mut pots = Vec::with_capacity(zs.len());
    for z in &zs {
        let r = linear.predict(z);
        let s = similarity_from_bandwidth(z, log_length)?;
        pots.push(Potentials::single(r, s)?);
    }
    let cases: Vec<(&Potentials, &DVector<f64>)> = pots
        .iter()
        .zip(ds.snapshots())
        .map(|(pot, snap)| (pot, snap.response()))
        .collect();
    let fit = gcrf::fit_gcrf_pooled(&cases, &opts.gcrf)?;
    if !fit.converged {
        warnings.push("field fit stopped before tolerances; using the best iterate".to_string());
    }
    Ok(ComposedFit {
        model: ComposedModel { mapping, linear, log_length, crf: fit.params },
        objective: fit.objective,
        grad_norm: fit.grad_norm,
        converged: fit.converged,
        warnings,
    })
}

/// Posterior mean on one snapshot's (zero-filled) features.
pub fn composed_predict(
    model: &ComposedModel,
    fm: &FeatureMatrix,
) -> Result<DVector<f64>, BaselineError> {
    let z = model.mapping.apply(fm.values());
    let r = model.linear.predict(&z);
    let s = similarity_from_bandwidth(&z, model.log_length)?;
    let pot = Potentials::single(r, s)?;
    Ok(gcrf::predict(&model.crf, &pot)?)
}

/// A fitted model family, independent of the missing-data protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedBaseline {
    Linear(LinearModel),
    Gp(GpModel),
    Composed(ComposedFit),
    Nn(NnModel),
}

/// The ten comparison models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "iLR")]
    ILr,
    #[serde(rename = "iGP")]
    IGp,
    #[serde(rename = "iGCRF")]
    IGcrf,
    #[serde(rename = "LR0")]
    Lr0,
    #[serde(rename = "GP0")]
    Gp0,
    #[serde(rename = "GCRF0")]
    Gcrf0,
    #[serde(rename = "PCA_GCRF")]
    PcaGcrf,
    #[serde(rename = "DAE_GCRF")]
    DaeGcrf,
    #[serde(rename = "NM_GCRF")]
    NmGcrf,
    #[serde(rename = "NN")]
    Nn,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 10] = [
        BaselineKind::ILr,
        BaselineKind::IGp,
        BaselineKind::IGcrf,
        BaselineKind::Lr0,
        BaselineKind::Gp0,
        BaselineKind::Gcrf0,
        BaselineKind::PcaGcrf,
        BaselineKind::DaeGcrf,
        BaselineKind::NmGcrf,
        BaselineKind::Nn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::ILr => "iLR",
            BaselineKind::IGp => "iGP",
            BaselineKind::IGcrf => "iGCRF",
            BaselineKind::Lr0 => "LR0",
            BaselineKind::Gp0 => "GP0",
            BaselineKind::Gcrf0 => "GCRF0",
            BaselineKind::PcaGcrf => "PCA_GCRF",
            BaselineKind::DaeGcrf => "DAE_GCRF",
            BaselineKind::NmGcrf => "NM_GCRF",
            BaselineKind::Nn => "NN",
        }
    }

    /// Deletion-based variant: fit on complete nodes only.
    pub fn drops_incomplete(&self) -> bool {
        matches!(self, BaselineKind::ILr | BaselineKind::IGp | BaselineKind::IGcrf)
    }

    fn allowed_keys(&self) -> &'static [&'static str] {
        match self {
            BaselineKind::ILr | BaselineKind::Lr0 => &["ridge"],
            BaselineKind::IGp | BaselineKind::Gp0 => &["noise_init"],
            BaselineKind::IGcrf | BaselineKind::Gcrf0 | BaselineKind::NmGcrf => {
                &["ridge", "noise_init"]
            }
            BaselineKind::PcaGcrf => &["ridge", "noise_init", "dims"],
            BaselineKind::DaeGcrf => &["ridge", "noise_init", "dims", "noise_prob"],
            BaselineKind::Nn => &[],
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselineKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown model {s:?}"))
    }
}

/// One model choice with its hyperparameters and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    #[serde(default)]
    pub hyper: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl BaselineSpec {
    pub fn new(
        kind: BaselineKind,
        hyper: BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<Self, BaselineError> {
        let spec = Self { kind, hyper, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn plain(kind: BaselineKind, seed: u64) -> Self {
        Self { kind, hyper: BTreeMap::new(), seed }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let allowed = self.kind.allowed_keys();
        for (key, &value) in &self.hyper {
            if !allowed.contains(&key.as_str()) {
                return Err(BaselineError::BadHyper {
                    key: key.clone(),
                    reason: format!("not a hyperparameter of {}", self.kind),
                });
            }
            let ok = match key.as_str() {
                "ridge" => value >= 0.0 && value.is_finite(),
                "noise_init" => value > 0.0 && value.is_finite(),
                "dims" => value >= 1.0 && value.fract() == 0.0,
                "noise_prob" => (0.0..1.0).contains(&value),
                _ => unreachable!("key was checked against the allow list"),
            };
            if !ok {
                return Err(BaselineError::BadHyper {
                    key: key.clone(),
                    reason: format!("value {value} is out of range"),
                });
            }
        }
        Ok(())
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.hyper.get(key).copied().unwrap_or(default)
    }
}

/// Predictions for every test node plus anything worth flagging.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub predictions: DVector<f64>,
    pub warnings: Vec<String>,
}

fn pooled_rows(ds: &TemporalDataset) -> (DMatrix<f64>, DVector<f64>) {
    let xs: Vec<DMatrix<f64>> = ds
        .snapshots()
        .iter()
        .map(|s| s.features().values().clone())
        .collect();
    let x = dfl::stack_rows(&xs);
    let y = DVector::from_iterator(
        x.nrows(),
        ds.snapshots().iter().flat_map(|s| s.response().iter().copied()),
    );
    (x, y)
}

fn restrict_features(fm: &FeatureMatrix, rows: &[usize]) -> Result<FeatureMatrix, BaselineError> {
    Ok(FeatureMatrix::new(
        fm.values().select_rows(rows),
        fm.mask().select_rows(rows),
        fm.purchase_dims(),
        fm.demographic_dims(),
    )?)
}

/// Rows of the test snapshot with fully observed demographics.
fn complete_rows(fm: &FeatureMatrix) -> Vec<usize> {
    (0..fm.n()).filter(|&i| fm.is_node_complete(i)).collect()
}

/// Training table for a deletion variant: complete nodes only, or the
/// full pool plus a warning when deletion would erase the train set.
fn deletion_pool(
    train: &TemporalDataset,
    warnings: &mut Vec<String>,
) -> Option<TemporalDataset> {
    match crate::data::drop_incomplete(train) {
        Ok(ds) => Some(ds),
        Err(DataError::NoCompleteNodes) => {
            warnings.push(
                "every training node is incomplete; falling back to the training-mean predictor"
                    .to_string(),
            );
            None
        }
        // Other failures are programming errors surfaced by the caller.
        Err(e) => {
            warnings.push(format!("case deletion failed ({e}); falling back to the mean"));
            None
        }
    }
}

/// Mean predictor over all test nodes.
fn mean_run(train: &TemporalDataset, n_test: usize, warnings: Vec<String>) -> BaselineRun {
    let (_, y) = pooled_rows(train);
    BaselineRun { predictions: DVector::from_element(n_test, y.mean()), warnings }
}

/// Scatter per-row predictions for `rows` into a full-length vector,
/// filling the remaining nodes with `fill`.
fn scatter(n: usize, rows: &[usize], values: &DVector<f64>, fill: f64) -> DVector<f64> {
    let mut out = DVector::from_element(n, fill);
    for (slot, &row) in rows.iter().enumerate() {
        out[row] = values[slot];
    }
    out
}

fn noise_default(spec: &BaselineSpec, y: &DVector<f64>) -> f64 {
    let mean = y.mean();
    let sd = (y.map(|v| v - mean).norm_squared() / y.len() as f64).sqrt();
    spec.get("noise_init", (DEFAULT_NOISE_FRAC * sd).max(1e-8))
}

/// Fits the spec's model family on the training window exactly as
/// given; stored zero-filled values are consumed directly. Protocol
/// concerns (case deletion, mean fallback, scatter) stay in
/// [`run_baseline`], so the deletion variants map to the same family
/// as their zero-imputation twins here.
pub fn fit_plain(
    spec: &BaselineSpec,
    train: &TemporalDataset,
) -> Result<(FittedBaseline, Vec<String>), BaselineError> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let (x, y) = pooled_rows(train);
    let composed = |mapping: Mapping| -> Result<ComposedFit, BaselineError> {
        compose_pipeline(mapping, train, &pipeline_opts(spec, train))
    };
    let fitted = match spec.kind {
        BaselineKind::ILr | BaselineKind::Lr0 => {
            FittedBaseline::Linear(fit_lr(&x, &y, spec.get("ridge", DEFAULT_RIDGE))?)
        }
        BaselineKind::IGp | BaselineKind::Gp0 => {
            FittedBaseline::Gp(fit_gp(&x, &y, noise_default(spec, &y))?)
        }
        BaselineKind::IGcrf | BaselineKind::Gcrf0 => {
            FittedBaseline::Composed(composed(Mapping::Identity)?)
        }
        BaselineKind::PcaGcrf => {
            let dims = (spec.get("dims", 3.0) as usize).min(x.ncols());
            let pca = fit_pca(&x, dims)?;
            if pca.rank_deficient {
                warnings.push("projection dims exceed the data rank".to_string());
            }
            FittedBaseline::Composed(composed(Mapping::Pca(pca))?)
        }
        BaselineKind::DaeGcrf => {
            let dims = spec.get("dims", 3.0) as usize;
            let dae = fit_dae(&x, dims, spec.get("noise_prob", 0.2), spec.seed)?;
            FittedBaseline::Composed(composed(Mapping::Dae(dae))?)
        }
        BaselineKind::NmGcrf => {
            let nn = fit_nn(&x, &y, &Architecture::default(), train.n(), spec.seed)?;
            FittedBaseline::Composed(composed(Mapping::Nm(nn))?)
        }
        BaselineKind::Nn => {
            FittedBaseline::Nn(fit_nn(&x, &y, &Architecture::default(), train.n(), spec.seed)?)
        }
    };
    if let FittedBaseline::Composed(fit) = &fitted {
        warnings.extend(fit.warnings.iter().cloned());
    }
    Ok((fitted, warnings))
}

/// Predictions from a fitted family on one snapshot's (zero-filled)
/// feature rows.
pub fn predict_plain(
    fitted: &FittedBaseline,
    fm: &FeatureMatrix,
) -> Result<DVector<f64>, BaselineError> {
    Ok(match fitted {
        FittedBaseline::Linear(m) => m.predict(fm.values()),
        FittedBaseline::Gp(m) => predict_gp(m, fm.values()),
        FittedBaseline::Composed(fit) => composed_predict(&fit.model, fm)?,
        FittedBaseline::Nn(m) => m.net.predict(fm.values()),
    })
}

/// Fits the chosen model on the training window and predicts the test
/// snapshot's responses for every node. Deletion variants fit on
/// complete nodes only and hand incomplete test nodes the training
/// mean; everything else consumes the zero-filled values as stored.
pub fn run_baseline(
    spec: &BaselineSpec,
    train: &TemporalDataset,
    test: &Snapshot,
) -> Result<BaselineRun, BaselineError> {
    spec.validate()?;
    if test.features().m() != train.m() {
        return Err(BaselineError::Shape {
            what: "test feature columns",
            expected: train.m(),
            got: test.features().m(),
        });
    }
    let n_test = test.features().n();
    let mut warnings = Vec::new();

    if !spec.kind.drops_incomplete() {
        let (fitted, mut w) = fit_plain(spec, train)?;
        warnings.append(&mut w);
        let predictions = predict_plain(&fitted, test.features())?;
        return Ok(BaselineRun { predictions, warnings });
    }

    let Some(kept) = deletion_pool(train, &mut warnings) else {
        return Ok(mean_run(train, n_test, warnings));
    };
    let (fitted, mut w) = fit_plain(spec, &kept)?;
    warnings.append(&mut w);
    let (_, y) = pooled_rows(&kept);
    let rows = complete_rows(test.features());
    if rows.is_empty() {
        warnings.push("no complete test nodes; predicting the training mean".to_string());
        return Ok(BaselineRun {
            predictions: DVector::from_element(n_test, y.mean()),
            warnings,
        });
    }
    let sub = restrict_features(test.features(), &rows)?;
    let preds = predict_plain(&fitted, &sub)?;
    Ok(BaselineRun {
        predictions: scatter(n_test, &rows, &preds, y.mean()),
        warnings,
    })
}

fn pipeline_opts(spec: &BaselineSpec, train: &TemporalDataset) -> PipelineOptions {
    let (_, y) = pooled_rows(train);
    let mean = y.mean();
    let sd = (y.map(|v| v - mean).norm_squared() / y.len() as f64).sqrt();
    PipelineOptions {
        ridge: spec.get("ridge", DEFAULT_RIDGE),
        noise_init: Some(spec.get("noise_init", (DEFAULT_NOISE_FRAC * sd).max(1e-8))),
        gcrf: FitOptions::default(),
    }
}
