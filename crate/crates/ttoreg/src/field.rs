//! Dense 3D displacement fields and the resampling operations built on them.
//!
//! A [`DisplacementField`] stores one 3-vector per voxel, interleaved
//! `[ux, uy, uz]` in voxel units on the same grid as the volumes it deforms.
//! Warping follows the pull (backward-mapping) convention:
//! `out(x) = v(x + u(x))`, sampled trilinearly with clamp-to-edge handling,
//! so every output voxel is defined.

use std::path::Path;

use crate::fileio;
use crate::ops::{self, Tensor};
use crate::real::Real;
use crate::volume::{ArrayHeader, Dims, Volume, DTYPE_VEC3};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    /// Interleaved `[ux, uy, uz]` per voxel, x-fastest voxel order.
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn zeros(dims: Dims) -> Self {
        DisplacementField { dims, data: vec![0.0; 3 * dims.len()] }
    }

    pub fn from_interleaved(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * dims.len() {
            return Err(Error::DimMismatch(format!(
                "field data length {} does not match 3 x {} voxels",
                data.len(),
                dims.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("field contains non-finite component {bad}")));
        }
        Ok(DisplacementField { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = 3 * self.dims.idx(x, y, z);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Largest Euclidean displacement magnitude over the grid.
    pub fn max_magnitude(&self) -> f32 {
        self.data
            .chunks_exact(3)
            .map(|v| (v[0] as f64 * v[0] as f64 + v[1] as f64 * v[1] as f64 + v[2] as f64 * v[2] as f64).sqrt())
            .fold(0.0f64, f64::max) as f32
    }

    /// Mean Euclidean displacement magnitude over the grid.
    pub fn mean_magnitude(&self) -> f32 {
        let sum: f64 = self
            .data
            .chunks_exact(3)
            .map(|v| (v[0] as f64 * v[0] as f64 + v[1] as f64 * v[1] as f64 + v[2] as f64 * v[2] as f64).sqrt())
            .sum();
        (sum / self.dims.len() as f64) as f32
    }

    pub(crate) fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Planar 3-channel tensor view (x, y, z component channels).
    pub(crate) fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let n = self.dims.len();
        let mut out = vec![T::ZERO; 3 * n];
        for i in 0..n {
            out[i] = T::from_f32(self.data[3 * i]);
            out[n + i] = T::from_f32(self.data[3 * i + 1]);
            out[2 * n + i] = T::from_f32(self.data[3 * i + 2]);
        }
        Tensor::from_vec(3, self.dims, out)
    }

    pub(crate) fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        assert_eq!(t.ch, 3, "displacement tensor must have 3 channels");
        let n = t.dims.len();
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            data[3 * i] = t.data[i].to_f32();
            data[3 * i + 1] = t.data[n + i].to_f32();
            data[3 * i + 2] = t.data[2 * n + i].to_f32();
        }
        DisplacementField { dims: t.dims, data }
    }
}

fn require_same_grid(what: &str, a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!(
            "{what}: grids differ ({:?} vs {:?})",
            a.as_array(),
            b.as_array()
        )));
    }
    Ok(())
}

/// Deform a volume: `out(x) = v(x + u(x))` with trilinear interpolation and
/// clamp-to-edge sampling. The output keeps the input's spacing.
pub fn warp_volume(v: &Volume, u: &DisplacementField) -> Result<Volume> {
    require_same_grid("warp_volume", v.dims(), u.dims())?;
    let src = Tensor::<f32>::from_volume(v);
    let out = ops::warp_forward(&src, &u.to_tensor::<f32>());
    Volume::new(v.dims(), v.spacing(), out.data)
}

/// Deform a binary mask: interpolate its indicator, then re-binarize at 0.5.
pub fn warp_mask(mask: &Volume, u: &DisplacementField) -> Result<Volume> {
    if !mask.is_binary() {
        return Err(Error::Invalid("warp_mask input is not binary".into()));
    }
    require_same_grid("warp_mask", mask.dims(), u.dims())?;
    let src = Tensor::<f32>::from_volume(mask);
    let mut out = ops::warp_forward(&src, &u.to_tensor::<f32>());
    for v in &mut out.data {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    Volume::new(mask.dims(), mask.spacing(), out.data)
}

/// Composition `compose(first, second)` such that warping by the result
/// equals warping by `first` and then warping that result by `second`:
/// `out(x) = second(x) + first(x + second(x))`.
pub fn compose(first: &DisplacementField, second: &DisplacementField) -> Result<DisplacementField> {
    require_same_grid("compose", first.dims(), second.dims())?;
    let out = ops::compose_forward(&first.to_tensor::<f32>(), &second.to_tensor::<f32>());
    Ok(DisplacementField::from_tensor(&out))
}

/// Mean squared forward-difference of the field components (the deformation
/// regularity score; 0 for any constant field).
pub fn smoothness(u: &DisplacementField) -> f32 {
    ops::smoothness_forward(&u.to_tensor::<f32>())
}

/// Write a field as a JSON header plus a little-endian f32 payload holding
/// the interleaved components.
pub fn save_field(u: &DisplacementField, spacing_mm: [f32; 3], path: &Path) -> Result<()> {
    let header = ArrayHeader {
        dims: u.dims().as_array(),
        spacing_mm,
        dtype: DTYPE_VEC3.to_string(),
        data: fileio::payload_name_for(path)?,
    };
    fileio::write_pair(path, &header, &fileio::f32s_to_le_bytes(&u.data))
}

pub fn load_field(path: &Path) -> Result<(DisplacementField, [f32; 3])> {
    let header: ArrayHeader = fileio::read_header(path)?;
    if header.dtype != DTYPE_VEC3 {
        return Err(Error::format(
            path,
            format!("expected dtype {DTYPE_VEC3:?} for a displacement field, found {:?}", header.dtype),
        ));
    }
    for s in header.spacing_mm {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::format(path, format!("non-positive spacing {s}")));
        }
    }
    let dims = Dims::from(header.dims);
    let bytes = fileio::read_payload(path, &header.data, 12 * dims.len())?;
    let field = DisplacementField::from_interleaved(dims, fileio::le_bytes_to_f32s(&bytes))?;
    Ok((field, header.spacing_mm))
}
