//! Similarity metrics and the composite registration objective.
//!
//! The objective is `L = L_sim(fixed, moved) + lambda * smoothness(u)`, with
//! the similarity term selectable between local normalized cross-correlation
//! (NCC, windowed, robust to affine intensity shifts) and mean squared error.
//! Volume-level entry points here evaluate at f64; the tensor-level hooks
//! used inside network training stay generic over the scalar type.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::field::DisplacementField;
use crate::ops::{self, Tensor};
use crate::real::Real;
use crate::volume::Volume;

/// Image similarity term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Local normalized cross-correlation over a cubic window.
    Ncc,
    /// Mean squared voxelwise difference.
    Mse,
}

/// Configuration of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Which similarity term to use.
    #[serde(default = "default_similarity")]
    pub similarity: Similarity,
    /// Cubic window edge for NCC, in voxels; odd and >= 3.
    #[serde(default = "default_ncc_window")]
    pub ncc_window: usize,
    /// Weight of the displacement smoothness penalty; finite and >= 0.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_similarity() -> Similarity {
    Similarity::Ncc
}

fn default_ncc_window() -> usize {
    5
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            similarity: default_similarity(),
            ncc_window: default_ncc_window(),
            lambda: default_lambda(),
        }
    }
}

impl LossConfig {
    /// Check the field invariants; call before using a config from outside.
    pub fn validate(&self) -> Result<(), Error> {
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::Invalid(format!(
                "ncc_window must be odd and >= 3, got {}",
                self.ncc_window
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Invalid(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_same_dims(a: &Volume, b: &Volume) -> Result<(), Error> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!(
            "volumes have different grids: {:?} vs {:?}",
            a.dims().as_array(),
            b.dims().as_array()
        )));
    }
    Ok(())
}

/// Mean squared voxelwise difference between two volumes on the same grid.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64, Error> {
    check_same_dims(a, b)?;
    let ta = Tensor::<f64>::from_volume(a);
    let tb = Tensor::<f64>::from_volume(b);
    Ok(ops::mse_forward(&ta, &tb))
}

/// Negated mean local normalized cross-correlation between two volumes.
///
/// Windows are cubic with the given odd edge length (>= 3) and clamp-padded
/// at the volume border; windows whose local variance falls below the
/// degeneracy floor contribute correlation 0. The result lies in [-1, 1],
/// with -1 meaning perfect correlation.
pub fn ncc_loss(a: &Volume, b: &Volume, window: usize) -> Result<f64, Error> {
    check_same_dims(a, b)?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::Invalid(format!(
            "NCC window must be odd and >= 3, got {window}"
        )));
    }
    let ta = Tensor::<f64>::from_volume(a);
    let tb = Tensor::<f64>::from_volume(b);
    Ok(ops::ncc_forward(&ta, &tb, window))
}

/// Composite objective: similarity between the fixed and the already-warped
/// moving volume, plus `lambda` times the smoothness penalty of the
/// displacement field that produced it.
pub fn total_loss(
    fixed: &Volume,
    moved: &Volume,
    u: &DisplacementField,
    cfg: &LossConfig,
) -> Result<f64, Error> {
    cfg.validate()?;
    check_same_dims(fixed, moved)?;
    if u.dims() != fixed.dims() {
        return Err(Error::DimMismatch(format!(
            "field grid {:?} does not match volume grid {:?}",
            u.dims().as_array(),
            fixed.dims().as_array()
        )));
    }
    let sim = match cfg.similarity {
        Similarity::Ncc => ncc_loss(fixed, moved, cfg.ncc_window)?,
        Similarity::Mse => mse(fixed, moved)?,
    };
    let smooth = ops::smoothness_forward(&u.to_tensor::<f64>());
    Ok(sim + cfg.lambda * smooth)
}

/// Tensor-level similarity forward used inside network training.
pub(crate) fn sim_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &LossConfig) -> T {
    match cfg.similarity {
        Similarity::Ncc => ops::ncc_forward(a, b, cfg.ncc_window),
        Similarity::Mse => ops::mse_forward(a, b),
    }
}

/// Gradient of [`sim_forward`] with respect to its first argument.
pub(crate) fn sim_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    cfg: &LossConfig,
    upstream: T,
) -> Tensor<T> {
    match cfg.similarity {
        Similarity::Ncc => ops::ncc_backward(a, b, cfg.ncc_window, upstream),
        Similarity::Mse => ops::mse_backward(a, b, upstream),
    }
}
