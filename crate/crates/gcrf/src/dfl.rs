//! Joint feature learning for the structured regressor.
//!
//! A small neural map embeds each node's (standardized, zero-filled)
//! feature row into a few coordinates. A linear head turns the first
//! two coordinates into the unstructured prediction, a Gaussian kernel
//! on the third coordinate builds the similarity graph, and both feed
//! the random field from [`crate::gcrf`]. All parameter groups, field
//! weights included, are learned together by penalized maximum
//! likelihood: warm start each group in isolation, then ascend the
//! pooled objective over the concatenated parameter vector.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FeatureMatrix, TemporalDataset};
use crate::derive_seed;
use crate::gcrf::{self, FitOptions, GcrfError, GcrfParams, Potentials};
use crate::nnet::{self, NnetError, TrainSettings};
use crate::optim::{Ascent, AscentOptions, OptimError, StepStatus};
use crate::sparse::{SparseError, SymmetricSparse};

#[derive(Debug, Error)]
pub enum DflError {
    #[error(transparent)]
    Gcrf(#[from] GcrfError),
    #[error(transparent)]
    Net(#[from] NnetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Two sigmoid layers mapping a feature row to `embed_dim` coordinates
/// in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralMap {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl NeuralMap {
    pub fn zeros(input: usize, hidden: usize, embed: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, input),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(embed, hidden),
            b2: DVector::zeros(embed),
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases.
    pub fn seeded(input: usize, hidden: usize, embed: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: nnet::uniform_init(hidden, input, input, &mut rng),
            b1: DVector::zeros(hidden),
            w2: nnet::uniform_init(embed, hidden, hidden, &mut rng),
            b2: DVector::zeros(embed),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_with_hidden(x).1
    }

    fn forward_with_hidden(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = nnet::sigmoid_mat(&nnet::affine(x, &self.w1, &self.b1));
        let h = nnet::sigmoid_mat(&nnet::affine(&a, &self.w2, &self.b2));
        (a, h)
    }

    fn norm_squared(&self) -> f64 {
        self.w1.norm_squared()
            + self.b1.norm_squared()
            + self.w2.norm_squared()
            + self.b2.norm_squared()
    }

    fn param_len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Embeds the rows of an already-prepared feature matrix. Masked cells
/// must have been filled beforehand; the stored values are used as-is.
pub fn map_forward(map: &NeuralMap, fm: &FeatureMatrix) -> Result<DMatrix<f64>, DflError> {
    if fm.m() != map.input_dim() {
        return Err(DflError::Shape {
            what: "map input columns",
            expected: map.input_dim(),
            got: fm.m(),
        });
    }
    Ok(map.forward(fm.values()))
}

/// Intercept plus weights on the first two embedding coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub theta: [f64; 3],
}

/// `R_i = theta_0 + theta_1 H_i1 + theta_2 H_i2`.
pub fn r_forward(h_mat: &DMatrix<f64>, head: &LinearHead) -> DVector<f64> {
    assert!(h_mat.ncols() >= 2, "embedding needs at least two coordinates");
    let [t0, t1, t2] = head.theta;
    DVector::from_fn(h_mat.nrows(), |i, _| t0 + t1 * h_mat[(i, 0)] + t2 * h_mat[(i, 1)])
}

/// Gaussian kernel on the third embedding coordinate, restricted to a
/// nearest-neighbor pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHead {
    /// Bandwidth is `exp(log_bandwidth)`, strictly positive.
    pub log_bandwidth: f64,
    /// Nearest neighbors kept per node (capped at `n - 1`).
    pub neighbor_k: usize,
}

impl KernelHead {
    pub fn bandwidth(&self) -> f64 {
        self.log_bandwidth.exp()
    }
}

/// Upper-triangle pairs `(i, j)` with `i < j`, sorted.
pub type KernelPattern = Vec<(usize, usize)>;

/// Union over nodes of each node's `k` nearest neighbors along one
/// coordinate. Distance ties break toward the smaller index, so the
/// pattern is deterministic.
pub fn kernel_pattern(coord: &[f64], k: usize) -> KernelPattern {
    let n = coord.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            let da = (coord[i] - coord[a]).abs();
            let db = (coord[i] - coord[b]).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges.into_iter().collect()
}

fn kernel_values(
    coord: &[f64],
    pattern: &KernelPattern,
    bandwidth: f64,
) -> Result<SymmetricSparse, SparseError> {
    let psi2 = bandwidth * bandwidth;
    let entries: Vec<(usize, usize, f64)> = pattern
        .iter()
        .map(|&(i, j)| {
            let d = coord[i] - coord[j];
            (i, j, (-d * d / psi2).exp())
        })
        .collect();
    SymmetricSparse::from_entries(coord.len(), &entries)
}

fn third_coordinate(h_mat: &DMatrix<f64>) -> Vec<f64> {
    h_mat.column(2).iter().copied().collect()
}

/// Similarity graph from the third embedding coordinate: kernel values
/// on the nearest-neighbor pattern of the current embedding.
pub fn s_forward(h_mat: &DMatrix<f64>, head: &KernelHead) -> Result<SymmetricSparse, DflError> {
    assert!(h_mat.ncols() >= 3, "embedding needs a third coordinate for the kernel");
    let coord = third_coordinate(h_mat);
    let k = head.neighbor_k.min(h_mat.nrows().saturating_sub(1));
    let pattern = kernel_pattern(&coord, k);
    Ok(kernel_values(&coord, &pattern, head.bandwidth())?)
}

/// Penalty coefficients per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub crf: f64,
    pub theta: f64,
    pub bandwidth: f64,
    /// Weight on the reciprocal barrier `w / bandwidth^2`.
    pub bandwidth_barrier: f64,
    pub map: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        // Every group gets a light quadratic pull, but the bandwidth
        // needs more than that: `log_bandwidth` can run far negative,
        // where a handful of near-duplicate coordinates keep strong
        // edges and the train objective climbs while the kernel stops
        // carrying any geometry. The kernel's own gradient vanishes
        // exponentially down there, so no quadratic weight can both
        // block the slide and leave sane bandwidths undistorted. The
        // reciprocal barrier grows exactly as fast as that gradient
        // decays, which keeps the exit slope alive, and is negligible
        // at sane bandwidths (the embedding coordinates live in (0, 1),
        // so their pair gaps put the useful range well above 0.02).
        Self { crf: 1e-3, theta: 1e-3, bandwidth: 1e-3, bandwidth_barrier: 4e-4, map: 1e-3 }
    }
}

/// Structural constants of the learned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Embedding width; the heads use coordinates 1, 2 (linear) and 3
    /// (kernel), so at least 3.
    pub embed_dim: usize,
    /// Capacity divisor for the hidden layer size.
    pub gamma: f64,
    /// Kernel sparsification degree.
    pub neighbor_k: usize,
    pub reg_weights: RegWeights,
    /// Fixed hidden size instead of the node-count formula.
    pub hidden_override: Option<usize>,
    /// Append one 0/1 missingness indicator per feature column to the
    /// map input.
    pub missing_indicators: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            embed_dim: 3,
            gamma: 5.0,
            neighbor_k: 10,
            reg_weights: RegWeights::default(),
            hidden_override: None,
            missing_indicators: false,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), DflError> {
        if self.embed_dim < 3 {
            return Err(DflError::BadArchitecture(
                "embed_dim must be at least 3 so both heads have coordinates".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(DflError::BadArchitecture("gamma must be positive and finite".into()));
        }
        if self.neighbor_k == 0 {
            return Err(DflError::BadArchitecture("neighbor_k must be at least 1".into()));
        }
        if self.hidden_override == Some(0) {
            return Err(DflError::BadArchitecture("hidden_override must be at least 1".into()));
        }
        let rw = self.reg_weights;
        for (name, w) in [
            ("crf", rw.crf),
            ("theta", rw.theta),
            ("bandwidth", rw.bandwidth),
            ("bandwidth_barrier", rw.bandwidth_barrier),
            ("map", rw.map),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(DflError::BadArchitecture(format!(
                    "reg weight {name} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    /// Hidden layer size: `round(n / (gamma (m + h)))`, at least 2.
    pub fn hidden_size(&self, n_nodes: usize, input_dim: usize) -> usize {
        if let Some(h) = self.hidden_override {
            return h;
        }
        let raw = n_nodes as f64 / (self.gamma * (input_dim + self.embed_dim) as f64);
        (raw.round() as usize).max(2)
    }
}

/// Per-column shift and scale fitted on observed cells only; applying
/// it standardizes observed cells and zero-fills masked ones, so a
/// missing value enters the map as the column mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: DVector<f64>,
    scale: DVector<f64>,
}

impl Standardizer {
    pub fn fit<'a, I>(fms: I) -> Result<Self, DflError>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut iter = fms.into_iter();
        let first = iter.next().ok_or(DflError::Shape {
            what: "feature matrices",
            expected: 1,
            got: 0,
        })?;
        let m = first.m();
        let mut count = vec![0usize; m];
        let mut sum = vec![0.0; m];
        let mut sumsq = vec![0.0; m];
        for fm in std::iter::once(first).chain(iter) {
            if fm.m() != m {
                return Err(DflError::Shape { what: "feature columns", expected: m, got: fm.m() });
            }
            for j in 0..m {
                for i in 0..fm.n() {
                    if fm.is_observed(i, j) {
                        let v = fm.values()[(i, j)];
                        count[j] += 1;
                        sum[j] += v;
                        sumsq[j] += v * v;
                    }
                }
            }
        }
        let mut mean = DVector::zeros(m);
        let mut scale = DVector::from_element(m, 1.0);
        for j in 0..m {
            if count[j] == 0 {
                continue;
            }
            let mu = sum[j] / count[j] as f64;
            let var = (sumsq[j] / count[j] as f64 - mu * mu).max(0.0);
            mean[j] = mu;
            let sd = var.sqrt();
            if sd > 1e-8 {
                scale[j] = sd;
            }
        }
        Ok(Self { mean, scale })
    }

    pub fn m(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, fm: &FeatureMatrix) -> Result<FeatureMatrix, DflError> {
        if fm.m() != self.m() {
            return Err(DflError::Shape {
                what: "feature columns",
                expected: self.m(),
                got: fm.m(),
            });
        }
        let values = DMatrix::from_fn(fm.n(), fm.m(), |i, j| {
            if fm.is_observed(i, j) {
                (fm.values()[(i, j)] - self.mean[j]) / self.scale[j]
            } else {
                0.0
            }
        });
        Ok(FeatureMatrix::new(
            values,
            fm.mask().clone(),
            fm.purchase_dims(),
            fm.demographic_dims(),
        )?)
    }
}

fn map_input(fm: &FeatureMatrix, indicators: bool) -> DMatrix<f64> {
    if !indicators {
        return fm.values().clone();
    }
    let m = fm.m();
    DMatrix::from_fn(fm.n(), 2 * m, |i, c| {
        if c < m {
            fm.values()[(i, c)]
        } else if fm.is_observed(i, c - m) {
            0.0
        } else {
            1.0
        }
    })
}

/// The full model: feature map, both heads, field weights, and the
/// preprocessing constants needed to reproduce its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DflModel {
    pub map: NeuralMap,
    pub r_head: LinearHead,
    pub s_head: KernelHead,
    pub crf: GcrfParams,
    pub reg_weights: RegWeights,
    pub standardizer: Standardizer,
    pub missing_indicators: bool,
}

impl DflModel {
    fn prepare(&self, fm: &FeatureMatrix) -> Result<DMatrix<f64>, DflError> {
        let standardized = self.standardizer.apply(fm)?;
        let x = map_input(&standardized, self.missing_indicators);
        if x.ncols() != self.map.input_dim() {
            return Err(DflError::Shape {
                what: "map input columns",
                expected: self.map.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(x)
    }

    /// Embedding of raw (possibly masked) features.
    pub fn embed(&self, fm: &FeatureMatrix) -> Result<DMatrix<f64>, DflError> {
        Ok(self.map.forward(&self.prepare(fm)?))
    }

    fn penalty(&self) -> f64 {
        let rw = self.reg_weights;
        let crf = self.crf.u().norm_squared() + self.crf.v().norm_squared();
        let theta: f64 = self.r_head.theta.iter().map(|t| t * t).sum();
        let lb = self.s_head.log_bandwidth;
        0.5 * (rw.crf * crf
            + rw.theta * theta
            + rw.bandwidth * lb * lb
            + rw.map * self.map.norm_squared())
            // exp(-2 lb) = 1 / bandwidth^2.
            + rw.bandwidth_barrier * (-2.0 * lb).exp()
    }

    fn param_len(&self) -> usize {
        self.crf.k() + self.crf.l() + 3 + 1 + self.map.param_len()
    }

    /// Flattens `(u, v, theta, log_bandwidth, map)` in the same order
    /// [`DflGradients::flat`] uses, for external optimizers and
    /// derivative checks.
    pub fn pack(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.param_len());
        x.extend(self.crf.u().iter());
        x.extend(self.crf.v().iter());
        x.extend(self.r_head.theta);
        x.push(self.s_head.log_bandwidth);
        x.extend(self.map.w1.iter());
        x.extend(self.map.b1.iter());
        x.extend(self.map.w2.iter());
        x.extend(self.map.b2.iter());
        x
    }

    /// Rebuilds a model with this one's shapes from a packed vector.
    pub fn unpack(&self, x: &[f64]) -> Result<DflModel, DflError> {
        if x.len() != self.param_len() {
            return Err(DflError::Shape {
                what: "packed parameters",
                expected: self.param_len(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DflError::NonFinite("packed parameters"));
        }
        let (k, l) = (self.crf.k(), self.crf.l());
        let mut at = 0usize;
        let mut take = |len: usize| {
            let s = &x[at..at + len];
            at += len;
            s
        };
        let crf = GcrfParams::new(
            DVector::from_column_slice(take(k)),
            DVector::from_column_slice(take(l)),
        )?;
        let theta_s = take(3);
        let r_head = LinearHead { theta: [theta_s[0], theta_s[1], theta_s[2]] };
        let s_head = KernelHead { log_bandwidth: take(1)[0], neighbor_k: self.s_head.neighbor_k };
        let (h_l, input) = (self.map.hidden_dim(), self.map.input_dim());
        let h = self.map.embed_dim();
        let map = NeuralMap {
            w1: DMatrix::from_column_slice(h_l, input, take(h_l * input)),
            b1: DVector::from_column_slice(take(h_l)),
            w2: DMatrix::from_column_slice(h, h_l, take(h * h_l)),
            b2: DVector::from_column_slice(take(h)),
        };
        Ok(DflModel {
            map,
            r_head,
            s_head,
            crf,
            reg_weights: self.reg_weights,
            standardizer: self.standardizer.clone(),
            missing_indicators: self.missing_indicators,
        })
    }
}

/// Penalized gradient for every parameter group, shaped like the model.
#[derive(Debug, Clone)]
pub struct DflGradients {
    pub du: DVector<f64>,
    pub dv: DVector<f64>,
    pub d_theta: [f64; 3],
    pub d_log_bandwidth: f64,
    pub d_map: NeuralMap,
}

impl DflGradients {
    /// Same layout as the model's packed parameter vector.
    pub fn flat(&self) -> Vec<f64> {
        let mut x = Vec::new();
        x.extend(self.du.iter());
        x.extend(self.dv.iter());
        x.extend(self.d_theta);
        x.push(self.d_log_bandwidth);
        x.extend(self.d_map.w1.iter());
        x.extend(self.d_map.b1.iter());
        x.extend(self.d_map.w2.iter());
        x.extend(self.d_map.b2.iter());
        x
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One training snapshot with its map input already prepared.
struct PreparedSnapshot {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

/// Pooled penalized log-likelihood over snapshots with the kernel
/// pattern of each snapshot pinned, optionally with gradients.
///
/// For an upper pair `(i, j)` with weight `S_ij` the likelihood's
/// sensitivity is
///
/// ```text
/// dL/dS_ij = beta [ (mu_i - mu_j)^2 - (y_i - y_j)^2
///                   + Sigma_ii + Sigma_jj - 2 Sigma_ij ]
/// ```
///
/// which is chained into the bandwidth and the third embedding
/// coordinate; the linear head feeds back `dL/dR = 2 alpha (y - mu)`.
fn pooled(
    model: &DflModel,
    snaps: &[PreparedSnapshot],
    patterns: &[KernelPattern],
    want_grad: bool,
) -> Result<(f64, Option<DflGradients>), DflError> {
    if model.crf.k() != 1 {
        return Err(DflError::Shape { what: "linear heads", expected: 1, got: model.crf.k() });
    }
    if model.crf.l() != 1 {
        return Err(DflError::Shape { what: "kernel heads", expected: 1, got: model.crf.l() });
    }
    assert_eq!(snaps.len(), patterns.len(), "one pattern per snapshot");
    let alpha = model.crf.alphas()[0];
    let beta = model.crf.betas()[0];
    let [_, t1, t2] = model.r_head.theta;
    let psi = model.s_head.bandwidth();
    let psi2 = psi * psi;

    let mut value = 0.0;
    let mut du = 0.0;
    let mut dv = 0.0;
    let mut d_theta = [0.0; 3];
    let mut d_w = 0.0;
    let mut d_map = NeuralMap::zeros(
        model.map.input_dim(),
        model.map.hidden_dim(),
        model.map.embed_dim(),
    );

    for (snap, pattern) in snaps.iter().zip(patterns) {
        let (a_mat, h_mat) = model.map.forward_with_hidden(&snap.x);
        let r = r_forward(&h_mat, &model.r_head);
        let coord = third_coordinate(&h_mat);
        let s = kernel_values(&coord, pattern, psi)?;
        let pot = Potentials::single(r.clone(), s.clone())?;
        let post = gcrf::posterior(&model.crf, &pot)?;
        let n = snap.y.len() as f64;
        value += -0.5 * post.mahalanobis(&snap.y) + 0.5 * post.log_det_precision()
            - 0.5 * n * std::f64::consts::TAU.ln();
        if !want_grad {
            continue;
        }

        let cov = post.covariance();
        let mu = post.mu();
        let y = &snap.y;
        let e = y - mu;
        du += alpha * (-y.dot(y) + mu.dot(mu) + cov.trace() + 2.0 * r.dot(&e));
        dv += beta
            * (-s.laplacian_quad(y) + s.laplacian_quad(mu) + s.laplacian_trace_product(&cov));

        // Linear head and its feedback into the first two coordinates.
        let dr = 2.0 * alpha * &e;
        let mut d_h = DMatrix::zeros(h_mat.nrows(), h_mat.ncols());
        for i in 0..h_mat.nrows() {
            d_theta[0] += dr[i];
            d_theta[1] += dr[i] * h_mat[(i, 0)];
            d_theta[2] += dr[i] * h_mat[(i, 1)];
            d_h[(i, 0)] = t1 * dr[i];
            d_h[(i, 1)] = t2 * dr[i];
        }

        // Kernel head and its feedback into the third coordinate. A
        // fully underflowed kernel value contributes nothing; skipping
        // it avoids 0 * inf at extreme bandwidths.
        for &(i, j) in pattern {
            let d = coord[i] - coord[j];
            let s_ij = (-d * d / psi2).exp();
            if s_ij <= 0.0 {
                continue;
            }
            let g_s = beta
                * ((mu[i] - mu[j]).powi(2) - (y[i] - y[j]).powi(2)
                    + (cov[(i, i)] + cov[(j, j)] - 2.0 * cov[(i, j)]));
            d_w += g_s * s_ij * 2.0 * d * d / psi2;
            let c = g_s * s_ij * 2.0 * d / psi2;
            d_h[(i, 2)] -= c;
            d_h[(j, 2)] += c;
        }

        // Backpropagate through both sigmoid layers.
        let d_z2 = d_h.zip_map(&h_mat, |g, a| g * a * (1.0 - a));
        d_map.w2 += d_z2.transpose() * &a_mat;
        d_map.b2 += nnet::column_sums(&d_z2);
        let d_a = &d_z2 * &model.map.w2;
        let d_z1 = d_a.zip_map(&a_mat, |g, a| g * a * (1.0 - a));
        d_map.w1 += d_z1.transpose() * &snap.x;
        d_map.b1 += nnet::column_sums(&d_z1);
    }

    value -= model.penalty();
    if !want_grad {
        return Ok((value, None));
    }

    let rw = model.reg_weights;
    du -= rw.crf * model.crf.u()[0];
    dv -= rw.crf * model.crf.v()[0];
    for (dt, t) in d_theta.iter_mut().zip(model.r_head.theta) {
        *dt -= rw.theta * t;
    }
    d_w -= rw.bandwidth * model.s_head.log_bandwidth;
    d_w += 2.0 * rw.bandwidth_barrier * (-2.0 * model.s_head.log_bandwidth).exp();
    d_map.w1 -= rw.map * &model.map.w1;
    d_map.b1 -= rw.map * &model.map.b1;
    d_map.w2 -= rw.map * &model.map.w2;
    d_map.b2 -= rw.map * &model.map.b2;

    Ok((
        value,
        Some(DflGradients {
            du: DVector::from_element(1, du),
            dv: DVector::from_element(1, dv),
            d_theta,
            d_log_bandwidth: d_w,
            d_map,
        }),
    ))
}

fn fresh_patterns(
    model: &DflModel,
    snaps: &[PreparedSnapshot],
) -> Vec<KernelPattern> {
    snaps
        .iter()
        .map(|snap| {
            let h_mat = model.map.forward(&snap.x);
            let coord = third_coordinate(&h_mat);
            let k = model.s_head.neighbor_k.min(coord.len().saturating_sub(1));
            kernel_pattern(&coord, k)
        })
        .collect()
}

fn prepare_snapshot(
    model: &DflModel,
    fm: &FeatureMatrix,
    y: &DVector<f64>,
) -> Result<PreparedSnapshot, DflError> {
    if y.len() != fm.n() {
        return Err(DflError::Shape { what: "responses", expected: fm.n(), got: y.len() });
    }
    Ok(PreparedSnapshot { x: model.prepare(fm)?, y: y.clone() })
}

/// Penalized log-likelihood of one snapshot under the composed model,
/// with the kernel pattern taken from the current embedding.
pub fn dfl_log_likelihood(
    model: &DflModel,
    fm: &FeatureMatrix,
    y: &DVector<f64>,
) -> Result<f64, DflError> {
    let snap = prepare_snapshot(model, fm, y)?;
    let patterns = fresh_patterns(model, std::slice::from_ref(&snap));
    Ok(pooled(model, std::slice::from_ref(&snap), &patterns, false)?.0)
}

/// Gradient of [`dfl_log_likelihood`] for every parameter group.
pub fn dfl_gradients(
    model: &DflModel,
    fm: &FeatureMatrix,
    y: &DVector<f64>,
) -> Result<DflGradients, DflError> {
    let snap = prepare_snapshot(model, fm, y)?;
    let patterns = fresh_patterns(model, std::slice::from_ref(&snap));
    let (_, grads) = pooled(model, std::slice::from_ref(&snap), &patterns, true)?;
    Ok(grads.expect("gradients requested"))
}

/// Posterior mean under the embedding of (possibly incomplete) test
/// features.
pub fn dfl_predict(model: &DflModel, fm: &FeatureMatrix) -> Result<DVector<f64>, DflError> {
    let h_mat = model.embed(fm)?;
    let r = r_forward(&h_mat, &model.r_head);
    let s = s_forward(&h_mat, &model.s_head)?;
    let pot = Potentials::single(r, s)?;
    Ok(gcrf::predict(&model.crf, &pot)?)
}

/// Budgets and seeds for fitting.
#[derive(Debug, Clone)]
pub struct DflOptions {
    pub ascent: AscentOptions,
    /// Budget for the two pretraining autoencoders.
    pub pretrain: TrainSettings,
    pub seed: u64,
}

impl Default for DflOptions {
    fn default() -> Self {
        Self { ascent: AscentOptions::default(), pretrain: TrainSettings::default(), seed: 0 }
    }
}

/// A fitted model plus how the fit went.
#[derive(Debug, Clone)]
pub struct DflFit {
    pub model: DflModel,
    /// Final pooled penalized objective.
    pub objective: f64,
    pub grad_norm: f64,
    /// Objective after warm start and after every accepted step;
    /// non-decreasing.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub(crate) fn stack_rows(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = mats[0].ncols();
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for m in mats {
        out.view_mut((at, 0), (m.nrows(), cols)).copy_from(m);
        at += m.nrows();
    }
    out
}

/// Median absolute gap between pairs of coordinates, subsampling rows
/// when the pair count would get out of hand.
fn median_pair_gap(coord: &[f64], seed: u64) -> f64 {
    let rows: Vec<f64> = if coord.len() > 2000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, coord.len(), 2000)
            .iter()
            .map(|i| coord[i])
            .collect()
    } else {
        coord.to_vec()
    };
    let mut gaps = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            gaps.push((rows[i] - rows[j]).abs());
        }
    }
    if gaps.is_empty() {
        return 0.0;
    }
    let mid = gaps.len() / 2;
    let (_, v, _) = gaps.select_nth_unstable_by(mid, f64::total_cmp);
    *v
}

fn column_std(h_mat: &DMatrix<f64>, col: usize) -> f64 {
    let c = h_mat.column(col);
    let mean = c.mean();
    (c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c.len() as f64).sqrt()
}

/// Initializes each parameter group in isolation: the map by two
/// stacked autoencoders on the pooled rows, the linear head by least
/// squares on the first two coordinates, the bandwidth at the median
/// pairwise gap of the third, and the field weights by a full
/// [`gcrf::fit_gcrf_pooled`] at the frozen potentials. Nearly constant
/// embedding coordinates trigger the random fallback, reported in the
/// warnings.
fn warm_start_pooled(
    snaps: &[(&FeatureMatrix, &DVector<f64>)],
    n_nodes: usize,
    arch: &Architecture,
    opts: &DflOptions,
) -> Result<(DflModel, Vec<String>), DflError> {
    arch.validate()?;
    let mut warnings = Vec::new();
    let standardizer = Standardizer::fit(snaps.iter().map(|(fm, _)| *fm))?;
    let mut xs = Vec::with_capacity(snaps.len());
    for (fm, y) in snaps {
        if y.len() != fm.n() {
            return Err(DflError::Shape { what: "responses", expected: fm.n(), got: y.len() });
        }
        xs.push(map_input(&standardizer.apply(fm)?, arch.missing_indicators));
    }
    let x_all = stack_rows(&xs);
    let input_dim = x_all.ncols();
    let h_l = arch.hidden_size(n_nodes, input_dim);

    let first = nnet::train_autoencoder(
        &x_all,
        h_l,
        0.0,
        &TrainSettings { seed: derive_seed(opts.seed, 41), ..opts.pretrain.clone() },
    )?;
    let codes = first.encode(&x_all);
    let second = nnet::train_autoencoder(
        &codes,
        arch.embed_dim,
        0.0,
        &TrainSettings { seed: derive_seed(opts.seed, 43), ..opts.pretrain.clone() },
    )?;
    let map = NeuralMap {
        w1: first.w_enc,
        b1: first.b_enc,
        w2: second.w_enc,
        b2: second.b_enc,
    };

    let h_all = map.forward(&x_all);
    let y_all = DVector::from_iterator(
        x_all.nrows(),
        snaps.iter().flat_map(|(_, y)| y.iter().copied()),
    );
    let mut fallback = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 47));

    let r_head = if column_std(&h_all, 0) < 1e-9 || column_std(&h_all, 1) < 1e-9 {
        warnings.push(
            "embedding coordinates for the linear head are nearly constant; \
             falling back to a random head"
                .to_string(),
        );
        LinearHead {
            theta: [
                fallback.random_range(-0.5..0.5),
                fallback.random_range(-0.5..0.5),
                fallback.random_range(-0.5..0.5),
            ],
        }
    } else {
        let rows = h_all.nrows();
        let z = DMatrix::from_fn(rows, 3, |i, j| match j {
            0 => 1.0,
            1 => h_all[(i, 0)],
            _ => h_all[(i, 1)],
        });
        let mut gram = z.transpose() * &z;
        for i in 0..3 {
            gram[(i, i)] += 1e-10;
        }
        let rhs = z.transpose() * &y_all;
        let sol = Cholesky::new(gram)
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(3));
        LinearHead { theta: [sol[0], sol[1], sol[2]] }
    };

    let coord_all = third_coordinate(&h_all);
    let median = median_pair_gap(&coord_all, derive_seed(opts.seed, 53));
    let s_head = if median < 1e-9 {
        warnings.push(
            "third embedding coordinate is nearly constant; \
             falling back to a random kernel bandwidth"
                .to_string(),
        );
        KernelHead {
            log_bandwidth: fallback.random_range(-1.0..1.0),
            neighbor_k: arch.neighbor_k,
        }
    } else {
        KernelHead { log_bandwidth: median.ln(), neighbor_k: arch.neighbor_k }
    };

    let mut pots = Vec::with_capacity(snaps.len());
    for x in &xs {
        let h_mat = map.forward(x);
        let r = r_forward(&h_mat, &r_head);
        let s = s_forward(&h_mat, &s_head)?;
        pots.push(Potentials::single(r, s)?);
    }
    let cases: Vec<(&Potentials, &DVector<f64>)> = pots
        .iter()
        .zip(snaps.iter())
        .map(|(pot, (_, y))| (pot, *y))
        .collect();
    let crf_fit = gcrf::fit_gcrf_pooled(
        &cases,
        &FitOptions { l2: arch.reg_weights.crf, init: None, ascent: opts.ascent.clone() },
    )?;

    let model = DflModel {
        map,
        r_head,
        s_head,
        crf: crf_fit.params,
        reg_weights: arch.reg_weights,
        standardizer,
        missing_indicators: arch.missing_indicators,
    };
    Ok((model, warnings))
}

/// Stage-by-stage initialization on a single snapshot.
pub fn warm_start(
    fm: &FeatureMatrix,
    y: &DVector<f64>,
    arch: &Architecture,
    opts: &DflOptions,
) -> Result<(DflModel, Vec<String>), DflError> {
    warm_start_pooled(&[(fm, y)], fm.n(), arch, opts)
}

fn eval_flat(
    template: &DflModel,
    snaps: &[PreparedSnapshot],
    patterns: &[KernelPattern],
    x: &[f64],
) -> (f64, Vec<f64>) {
    let fail = (f64::NEG_INFINITY, vec![0.0; x.len()]);
    match template.unpack(x) {
        Ok(model) => match pooled(&model, snaps, patterns, true) {
            Ok((f, Some(g))) => (f, g.flat()),
            _ => fail,
        },
        Err(_) => fail,
    }
}

/// Warm start, then joint penalized ascent over all parameter groups
/// pooled across the training snapshots. Each snapshot's kernel
/// pattern is pinned from the warm-start embedding for the whole
/// ascent. The warm map has never seen the responses, so a pinned
/// pattern cannot chain equal-response nodes, which is the degenerate
/// direction of this likelihood: strong edges between nodes with
/// near-equal responses buy log-determinant mass at almost no
/// quadratic cost, and the objective then grows without bound in `v`
/// while the kernel disconnects everything else. Letting the pattern
/// follow the trained embedding hands the map exactly that selection
/// channel (it can sort nodes by fitted response), and no sane penalty
/// weight stops a slope that stays positive in `v`. The learned
/// coordinates still set every edge weight inside the pattern, and
/// prediction rebuilds the pattern from the embedding it is given.
pub fn fit_dfl(
    train: &TemporalDataset,
    arch: &Architecture,
    opts: &DflOptions,
) -> Result<DflFit, DflError> {
    let pairs: Vec<(&FeatureMatrix, &DVector<f64>)> = train
        .snapshots()
        .iter()
        .map(|snap| (snap.features(), snap.response()))
        .collect();
    let (warm, mut warnings) = warm_start_pooled(&pairs, train.n(), arch, opts)?;

    let mut snaps = Vec::with_capacity(pairs.len());
    for (fm, y) in &pairs {
        snaps.push(prepare_snapshot(&warm, fm, y)?);
    }
    let template = warm.clone();
    let patterns = fresh_patterns(&warm, &snaps);
    let (f0, g0) = eval_flat(&template, &snaps, &patterns, &warm.pack());
    let mut ascent = Ascent::new(warm.pack(), f0, g0, opts.ascent.clone())?;

    let mut last = StepStatus::Improved;
    while ascent.iterations() < opts.ascent.max_iters {
        last = ascent.step(&mut |x| eval_flat(&template, &snaps, &patterns, x));
        if last != StepStatus::Improved {
            break;
        }
    }
    let converged =
        matches!(last, StepStatus::GradientConverged | StepStatus::ObjectiveConverged);
    if last == StepStatus::Stalled {
        warnings.push("line search stalled; returning the best iterate".to_string());
    } else if !converged {
        warnings.push("iteration cap reached before tolerances; returning the best iterate".to_string());
    }

    let model = template.unpack(ascent.x())?;
    Ok(DflFit {
        model,
        objective: ascent.objective(),
        grad_norm: ascent.grad_norm(),
        trace: ascent.trace().to_vec(),
        iterations: ascent.iterations(),
        converged,
        warnings,
    })
}
