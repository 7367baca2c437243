//! Structured regression over networked observations.
//!
//! The core model is a Gaussian conditional random field (GCRF): given
//! per-node unstructured predictions `R` and one or more nonnegative
//! similarity graphs `S`, the conditional distribution of the response
//! vector is Gaussian with a sparse precision matrix whose off-diagonal
//! entries encode pairwise smoothing and whose diagonal balances fit
//! against smoothness. Both the unstructured weights and the graph
//! weights are learned by maximizing the exact log-likelihood.
//!
//! On top of the core sit:
//!
//! * [`dfl`]: joint ("deep feature learning") training of a small neural
//!   feature map together with the CRF, so that the unstructured
//!   predictor and the similarity graph are both functions of a learned
//!   low-dimensional embedding. This is the main model; it handles
//!   partially observed inputs by masking.
//! * [`baselines`]: reference predictors (linear regression, Gaussian
//!   process regression, a feed-forward net, and GCRF pipelines over
//!   fixed embeddings such as PCA or a denoising autoencoder) under two
//!   missing-data policies, deletion and zero imputation.
//! * [`synth`]: a synthetic generator with planted structure and
//!   controllable noise, used for calibration experiments.
//! * [`harness`]: missingness sweeps that fit every model on the same
//!   masked copies of a dataset and report R² curves deterministically.
//!
//! The `gcrf` binary exposes dataset generation, model fitting,
//! prediction, and sweep execution as subcommands.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod dfl;
pub mod gcrf;
pub mod harness;
pub mod model;
pub mod nnet;
pub mod optim;
pub mod sparse;
pub mod synth;

/// Derives a child seed from a parent seed and a stream index.
///
/// SplitMix64 finalizer over the xor-combined inputs. Stable across
/// platforms and rust versions, unlike hasher-based derivation.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    let mut z = parent ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
