//! Model files: one JSON envelope for every model the command line
//! can fit, tagged by kind, with save/load and a uniform predict.
//!
//! Deletion protocols (the `i` baselines) are evaluation procedures,
//! not artifacts; fitting one for a file is refused with a pointer to
//! its zero-imputation twin, whose saved weights are identical.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, BaselineSpec, FittedBaseline};
use crate::data::FeatureMatrix;
use crate::dfl::{self, Architecture, DflError, DflModel, DflOptions};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Dfl(#[from] DflError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0} is an evaluation protocol, not a storable model; fit {1} instead")]
    DeletionProtocol(&'static str, &'static str),
}

/// Everything a fit leaves behind, ready for prediction after a
/// round-trip through disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Dfl {
        model: DflModel,
        arch: Architecture,
        objective: f64,
        /// Objective after warm start and every accepted step.
        trace: Vec<f64>,
        converged: bool,
        warnings: Vec<String>,
    },
    Baseline {
        name: String,
        fitted: FittedBaseline,
        warnings: Vec<String>,
    },
}

impl TrainedModel {
    pub fn name(&self) -> &str {
        match self {
            TrainedModel::Dfl { .. } => "DFL",
            TrainedModel::Baseline { name, .. } => name,
        }
    }

    pub fn warnings(&self) -> &[String] {
        match self {
            TrainedModel::Dfl { warnings, .. } => warnings,
            TrainedModel::Baseline { warnings, .. } => warnings,
        }
    }

    /// Posterior or point predictions on one snapshot's feature rows;
    /// masked cells are consumed as stored (zero-filled).
    pub fn predict(&self, fm: &FeatureMatrix) -> Result<DVector<f64>, ModelError> {
        match self {
            TrainedModel::Dfl { model, .. } => Ok(dfl::dfl_predict(model, fm)?),
            TrainedModel::Baseline { fitted, .. } => Ok(baselines::predict_plain(fitted, fm)?),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(fs::write(path, text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Fits a baseline family for storage. The deletion variants are
/// refused; their twins fit the same weights.
pub fn fit_baseline_model(
    spec: &BaselineSpec,
    train: &crate::data::TemporalDataset,
) -> Result<TrainedModel, ModelError> {
    if spec.kind.drops_incomplete() {
        let twin = match spec.kind {
            baselines::BaselineKind::ILr => "LR0",
            baselines::BaselineKind::IGp => "GP0",
            _ => "GCRF0",
        };
        return Err(ModelError::DeletionProtocol(spec.kind.name(), twin));
    }
    let (fitted, warnings) = baselines::fit_plain(spec, train)?;
    Ok(TrainedModel::Baseline { name: spec.kind.name().to_string(), fitted, warnings })
}

/// Fits the joint model for storage.
pub fn fit_dfl_model(
    train: &crate::data::TemporalDataset,
    arch: &Architecture,
    opts: &DflOptions,
) -> Result<TrainedModel, ModelError> {
    let fit = dfl::fit_dfl(train, arch, opts)?;
    Ok(TrainedModel::Dfl {
        model: fit.model,
        arch: arch.clone(),
        objective: fit.objective,
        trace: fit.trace,
        converged: fit.converged,
        warnings: fit.warnings,
    })
}
