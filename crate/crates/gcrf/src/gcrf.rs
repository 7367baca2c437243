//! Gaussian conditional random fields over similarity graphs.
//!
//! The response vector `y` is modeled as Gaussian given `K` columns of
//! unstructured per-node predictions `R` and `L` nonnegative similarity
//! graphs `S`. With `alpha_k = exp(u_k)` and `beta_l = exp(v_l)`, the
//! precision and linear term are
//!
//! ```text
//! Q_ii = 2 sum_k alpha_k + 2 sum_l beta_l * deg_l(i)
//! Q_ij = -2 sum_l beta_l * S_l[i, j]          (i != j)
//! b_i  = 2 sum_k alpha_k * R_ik
//! ```
//!
//! so `Q = 2 sum_k alpha_k I + 2 sum_l beta_l Lap_l` is positive
//! definite for every finite parameter value, and the mean is
//! `mu = Q^-1 b`. Working in `(u, v)` keeps the positivity constraint
//! out of the optimizer.
//!
//! The fitting objective is the exact log-likelihood plus an L2
//! penalty on `(u, v)`; its gradient is computed in closed form and is
//! checked against central finite differences in the tests.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{self, AscentOptions, OptimError};
use crate::sparse::{SparseError, SymmetricSparse};

#[derive(Debug, Error)]
pub enum GcrfError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{name}[{index}] = {value} is not finite")]
    NonFiniteParam {
        name: &'static str,
        index: usize,
        value: f64,
    },
    #[error("non-finite value in {what} at row {row}")]
    NonFiniteValue { what: &'static str, row: usize },
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unstructured predictions need at least one column")]
    NoPredictors,
    #[error("pooled fit needs at least one snapshot")]
    NoSnapshots,
    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Log-scale CRF weights: `alpha = exp(u)` for the `K` unstructured
/// columns, `beta = exp(v)` for the `L` graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcrfParams {
    u: DVector<f64>,
    v: DVector<f64>,
}

impl GcrfParams {
    pub fn new(u: DVector<f64>, v: DVector<f64>) -> Result<Self, GcrfError> {
        if u.is_empty() {
            return Err(GcrfError::NoPredictors);
        }
        for (name, vec) in [("u", &u), ("v", &v)] {
            if let Some(index) = vec.iter().position(|x| !x.is_finite()) {
                return Err(GcrfError::NonFiniteParam { name, index, value: vec[index] });
            }
        }
        Ok(Self { u, v })
    }

    pub fn zeros(k: usize, l: usize) -> Self {
        Self { u: DVector::zeros(k), v: DVector::zeros(l) }
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn k(&self) -> usize {
        self.u.len()
    }

    pub fn l(&self) -> usize {
        self.v.len()
    }

    pub fn alphas(&self) -> DVector<f64> {
        self.u.map(f64::exp)
    }

    pub fn betas(&self) -> DVector<f64> {
        self.v.map(f64::exp)
    }
}

/// Validated model inputs for one snapshot: `R` is `n x K` with finite
/// entries, each graph is `n x n`, symmetric, nonnegative, with an
/// empty diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Potentials {
    r: DMatrix<f64>,
    s: Vec<SymmetricSparse>,
}

impl Potentials {
    pub fn new(r: DMatrix<f64>, s: Vec<SymmetricSparse>) -> Result<Self, GcrfError> {
        if r.ncols() == 0 {
            return Err(GcrfError::NoPredictors);
        }
        if r.nrows() == 0 {
            return Err(GcrfError::DimensionMismatch { what: "rows of R", expected: 1, got: 0 });
        }
        for i in 0..r.nrows() {
            if r.row(i).iter().any(|x| !x.is_finite()) {
                return Err(GcrfError::NonFiniteValue { what: "unstructured predictions", row: i });
            }
        }
        for graph in &s {
            if graph.n() != r.nrows() {
                return Err(GcrfError::DimensionMismatch {
                    what: "graph dimension",
                    expected: r.nrows(),
                    got: graph.n(),
                });
            }
            graph.validate_similarity()?;
        }
        Ok(Self { r, s })
    }

    /// Common case of one prediction column and one graph.
    pub fn single(r: DVector<f64>, s: SymmetricSparse) -> Result<Self, GcrfError> {
        let n = r.len();
        Self::new(DMatrix::from_column_slice(n, 1, r.as_slice()), vec![s])
    }

    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    pub fn k(&self) -> usize {
        self.r.ncols()
    }

    pub fn l(&self) -> usize {
        self.s.len()
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn s(&self) -> &[SymmetricSparse] {
        &self.s
    }
}

fn check_compat(params: &GcrfParams, pot: &Potentials) -> Result<(), GcrfError> {
    if params.k() != pot.k() {
        return Err(GcrfError::DimensionMismatch {
            what: "u length vs R columns",
            expected: pot.k(),
            got: params.k(),
        });
    }
    if params.l() != pot.l() {
        return Err(GcrfError::DimensionMismatch {
            what: "v length vs graph count",
            expected: pot.l(),
            got: params.l(),
        });
    }
    Ok(())
}

fn check_response(y: &DVector<f64>, n: usize) -> Result<(), GcrfError> {
    if y.len() != n {
        return Err(GcrfError::DimensionMismatch {
            what: "response length",
            expected: n,
            got: y.len(),
        });
    }
    if let Some(row) = y.iter().position(|x| !x.is_finite()) {
        return Err(GcrfError::NonFiniteValue { what: "response", row });
    }
    Ok(())
}

/// Assembles the sparse precision matrix for `n` nodes. The pattern is
/// the union of the graph patterns plus the full diagonal.
pub fn build_precision(
    params: &GcrfParams,
    n: usize,
    s: &[SymmetricSparse],
) -> Result<SymmetricSparse, GcrfError> {
    if params.l() != s.len() {
        return Err(GcrfError::DimensionMismatch {
            what: "v length vs graph count",
            expected: s.len(),
            got: params.l(),
        });
    }
    let alphas = params.alphas();
    let betas = params.betas();
    if let Some(index) = alphas.iter().position(|a| !a.is_finite()) {
        return Err(GcrfError::NonFiniteParam { name: "alpha", index, value: alphas[index] });
    }
    if let Some(index) = betas.iter().position(|b| !b.is_finite()) {
        return Err(GcrfError::NonFiniteParam { name: "beta", index, value: betas[index] });
    }
    let mut diag = vec![2.0 * alphas.sum(); n];
    let mut off = std::collections::BTreeMap::<(usize, usize), f64>::new();
    for (l, graph) in s.iter().enumerate() {
        if graph.n() != n {
            return Err(GcrfError::DimensionMismatch {
                what: "graph dimension",
                expected: n,
                got: graph.n(),
            });
        }
        let degrees = graph.off_diagonal_row_sums();
        for i in 0..n {
            diag[i] += 2.0 * betas[l] * degrees[i];
        }
        for (i, j, w) in graph.upper_entries() {
            *off.entry((i, j)).or_insert(0.0) -= 2.0 * betas[l] * w;
        }
    }
    let mut entries: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, diag[i])).collect();
    entries.extend(off.iter().map(|(&(i, j), &w)| (i, j, w)));
    Ok(SymmetricSparse::from_entries(n, &entries)?)
}

/// Linear term `b = 2 R alpha`.
pub fn build_b(params: &GcrfParams, r: &DMatrix<f64>) -> DVector<f64> {
    2.0 * r * params.alphas()
}

/// Factorized conditional distribution for one snapshot.
pub struct GaussianPosterior {
    mu: DVector<f64>,
    precision: SymmetricSparse,
    chol: Cholesky<f64, Dyn>,
    log_det_precision: f64,
}

impl GaussianPosterior {
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn precision(&self) -> &SymmetricSparse {
        &self.precision
    }

    /// `log det Q`, accumulated from the Cholesky diagonal so it stays
    /// finite even when the determinant itself over- or underflows.
    pub fn log_det_precision(&self) -> f64 {
        self.log_det_precision
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `(y - mu)' Q (y - mu)`.
    pub fn mahalanobis(&self, y: &DVector<f64>) -> f64 {
        let e = y - &self.mu;
        self.precision.mul_vec(&e).dot(&e)
    }

    /// Maps a standard normal draw `z` to a draw from this
    /// distribution: with `Q = L L'`, returns `mu + L^-T z`, whose
    /// covariance is `L^-T L^-1 = Q^-1`.
    pub fn color_standard_normal(&self, z: &DVector<f64>) -> DVector<f64> {
        let lt = self.chol.l().transpose();
        let w = lt
            .solve_upper_triangular(z)
            .expect("Cholesky factor has positive diagonal");
        &self.mu + w
    }
}

/// Builds and factorizes the conditional distribution.
pub fn posterior(params: &GcrfParams, pot: &Potentials) -> Result<GaussianPosterior, GcrfError> {
    check_compat(params, pot)?;
    let precision = build_precision(params, pot.n(), pot.s())?;
    let chol = Cholesky::new(precision.to_dense()).ok_or(GcrfError::NotPositiveDefinite)?;
    let log_det_precision = 2.0 * chol.l_dirty().diagonal().map(f64::ln).sum();
    let b = build_b(params, pot.r());
    let mu = chol.solve(&b);
    Ok(GaussianPosterior { mu, precision, chol, log_det_precision })
}

/// Exact Gaussian log-density of `y` under the model.
pub fn log_likelihood(
    params: &GcrfParams,
    pot: &Potentials,
    y: &DVector<f64>,
) -> Result<f64, GcrfError> {
    check_response(y, pot.n())?;
    let post = posterior(params, pot)?;
    Ok(log_density(&post, y))
}

fn log_density(post: &GaussianPosterior, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    -0.5 * post.mahalanobis(y) + 0.5 * post.log_det_precision()
        - 0.5 * n * std::f64::consts::TAU.ln()
}

/// Gradient of [`log_likelihood`] with respect to `(u, v)`.
pub fn grad_uv(
    params: &GcrfParams,
    pot: &Potentials,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), GcrfError> {
    let (_, du, dv) = log_likelihood_and_grad(params, pot, y)?;
    Ok((du, dv))
}

/// Log-likelihood and its `(u, v)` gradient from one factorization.
///
/// With `Sigma = Q^-1` the chain rule through `mu = Q^-1 b` gives
///
/// ```text
/// dL/d alpha_k = -y'y + mu'mu + 2 R_k'(y - mu) + tr(Sigma)
/// dL/d beta_l  = -y' Lap_l y + mu' Lap_l mu + tr(Sigma Lap_l)
/// ```
///
/// and `dL/du_k = alpha_k dL/d alpha_k`, `dL/dv_l = beta_l dL/d beta_l`.
pub fn log_likelihood_and_grad(
    params: &GcrfParams,
    pot: &Potentials,
    y: &DVector<f64>,
) -> Result<(f64, DVector<f64>, DVector<f64>), GcrfError> {
    check_response(y, pot.n())?;
    let post = posterior(params, pot)?;
    let value = log_density(&post, y);
    let cov = post.covariance();
    let mu = post.mu();
    let e = y - mu;
    let shared = -y.dot(y) + mu.dot(mu) + cov.trace();
    let alphas = params.alphas();
    let betas = params.betas();
    let du = DVector::from_fn(params.k(), |k, _| {
        alphas[k] * (shared + 2.0 * pot.r().column(k).dot(&e))
    });
    let dv = DVector::from_fn(params.l(), |l, _| {
        let graph = &pot.s()[l];
        betas[l]
            * (-graph.laplacian_quad(y) + graph.laplacian_quad(mu)
                + graph.laplacian_trace_product(&cov))
    });
    Ok((value, du, dv))
}

/// Posterior mean prediction for one snapshot.
pub fn predict(params: &GcrfParams, pot: &Potentials) -> Result<DVector<f64>, GcrfError> {
    Ok(posterior(params, pot)?.mu().clone())
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Coefficient of the `(lambda/2) ||(u, v)||^2` penalty subtracted
    /// from the objective.
    pub l2: f64,
    /// Starting point; zeros (unit alpha and beta) when absent.
    pub init: Option<GcrfParams>,
    pub ascent: AscentOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { l2: 1e-3, init: None, ascent: AscentOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: GcrfParams,
    /// Final penalized objective.
    pub objective: f64,
    /// Norm of the penalized gradient at the returned point.
    pub grad_norm: f64,
    /// Penalized objective after initialization and after every
    /// accepted step; non-decreasing.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap or a line-search stall ended the
    /// fit; the returned params are still the best visited point.
    pub converged: bool,
}

fn pack(params: &GcrfParams) -> Vec<f64> {
    params.u.iter().chain(params.v.iter()).copied().collect()
}

fn unpack(x: &[f64], k: usize, l: usize) -> GcrfParams {
    GcrfParams {
        u: DVector::from_column_slice(&x[..k]),
        v: DVector::from_column_slice(&x[k..k + l]),
    }
}

/// Penalized pooled objective and gradient; snapshots evaluated in
/// parallel, reduced in index order so results are bit-reproducible.
fn pooled_objective(
    cases: &[(&Potentials, &DVector<f64>)],
    x: &[f64],
    k: usize,
    l: usize,
    l2: f64,
) -> (f64, Vec<f64>) {
    let params = unpack(x, k, l);
    let per: Vec<Result<(f64, DVector<f64>, DVector<f64>), GcrfError>> = cases
        .par_iter()
        .map(|(pot, y)| log_likelihood_and_grad(&params, pot, y))
        .collect();
    let mut f = 0.0;
    let mut g = vec![0.0; k + l];
    for item in per {
        match item {
            Ok((value, du, dv)) => {
                f += value;
                for i in 0..k {
                    g[i] += du[i];
                }
                for i in 0..l {
                    g[k + i] += dv[i];
                }
            }
            // Overflowed parameters during a line-search probe; report
            // the point as worthless so the search backtracks.
            Err(_) => return (f64::NEG_INFINITY, vec![0.0; k + l]),
        }
    }
    for i in 0..k + l {
        f -= 0.5 * l2 * x[i] * x[i];
        g[i] -= l2 * x[i];
    }
    (f, g)
}

/// Maximizes the penalized pooled log-likelihood over snapshots that
/// share parameters. Snapshots may differ in node count but must agree
/// on the number of prediction columns and graphs.
pub fn fit_gcrf_pooled(
    cases: &[(&Potentials, &DVector<f64>)],
    opts: &FitOptions,
) -> Result<FitOutcome, GcrfError> {
    let (k, l) = match cases.first() {
        Some((pot, _)) => (pot.k(), pot.l()),
        None => return Err(GcrfError::NoSnapshots),
    };
    for (pot, y) in cases {
        if pot.k() != k {
            return Err(GcrfError::DimensionMismatch {
                what: "R columns across snapshots",
                expected: k,
                got: pot.k(),
            });
        }
        if pot.l() != l {
            return Err(GcrfError::DimensionMismatch {
                what: "graph count across snapshots",
                expected: l,
                got: pot.l(),
            });
        }
        check_response(y, pot.n())?;
    }
    let init = match &opts.init {
        Some(params) => {
            if params.k() != k || params.l() != l {
                return Err(GcrfError::DimensionMismatch {
                    what: "initial parameter length",
                    expected: k + l,
                    got: params.k() + params.l(),
                });
            }
            params.clone()
        }
        None => GcrfParams::zeros(k, l),
    };
    let mut eval = |x: &[f64]| pooled_objective(cases, x, k, l, opts.l2);
    let out = optim::maximize(&mut eval, pack(&init), &opts.ascent)?;
    Ok(FitOutcome {
        params: unpack(&out.x, k, l),
        objective: out.objective,
        grad_norm: out.grad_norm,
        trace: out.trace,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Single-snapshot convenience wrapper around [`fit_gcrf_pooled`].
pub fn fit_gcrf(
    pot: &Potentials,
    y: &DVector<f64>,
    opts: &FitOptions,
) -> Result<FitOutcome, GcrfError> {
    fit_gcrf_pooled(&[(pot, y)], opts)
}
