//! Scalar volumes, binary structure masks, and their file format.
//!
//! A [`Volume`] is a dense 3D scalar field with voxel spacing in millimeters.
//! Data is stored x-fastest: `index = x + nx*(y + ny*z)`. Every array this
//! crate persists uses the same scheme — a JSON header with exact keys
//! `dims`, `spacing_mm`, `dtype`, `data`, next to a raw little-endian payload.
//! Volumes use dtype `"f32le"`, binary masks `"u8"`; displacement fields
//! (dtype `"f32le_vec3"`) live in [`crate::field`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fileio;

/// Voxel grid extents. Convertible to/from `[nx, ny, nz]` for headers.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    /// Total voxel count.
    pub fn len(self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// Linear index of voxel (x, y, z), x-fastest.
    #[inline(always)]
    pub fn idx(self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn as_array(self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

/// Dense 3D scalar field with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    /// Build a volume, enforcing the type invariants: data length matches
    /// dims, spacing strictly positive, all intensities finite.
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("spacing must be positive and finite, got {spacing:?}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("volume contains non-finite intensities".into()));
        }
        Ok(Volume { dims, spacing, data })
    }

    /// All-zero volume.
    pub fn zeros(dims: Dims, spacing: [f32; 3]) -> Self {
        Volume { dims, spacing, data: vec![0.0; dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Consume the volume, returning its raw data.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.idx(x, y, z)]
    }

    /// True if every voxel is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of set voxels in a binary volume.
    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Affine rescale of intensities to [0, 1]: `(x - min) / (max - min)`.
    /// A constant volume maps to all zeros (degenerate range).
    pub fn normalize_intensity(&self) -> Volume {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            return Volume { dims: self.dims, spacing: self.spacing, data: vec![0.0; self.data.len()] };
        }
        let inv = 1.0 / (hi - lo);
        let data = self.data.iter().map(|&v| (v - lo) * inv).collect();
        Volume { dims: self.dims, spacing: self.spacing, data }
    }

    /// Block-mean downsample by integer per-axis factors, then crop. The crop
    /// window (origin + dims) addresses the *downsampled* grid. Spacing is
    /// multiplied by the factor. Dims must be divisible by their factor.
    pub fn resample(&self, factor: [usize; 3], crop_origin: [usize; 3], crop_dims: Dims) -> Result<Volume> {
        if factor.iter().any(|&f| f == 0) {
            return Err(Error::Invalid(format!("resample factor must be positive, got {factor:?}")));
        }
        let src = self.dims;
        let ext = [src.nx, src.ny, src.nz];
        for a in 0..3 {
            if ext[a] % factor[a] != 0 {
                return Err(Error::Invalid(format!(
                    "dims {:?} not divisible by factor {:?}",
                    src.as_array(),
                    factor
                )));
            }
        }
        let down = Dims::new(src.nx / factor[0], src.ny / factor[1], src.nz / factor[2]);
        let dext = down.as_array();
        let cext = crop_dims.as_array();
        for a in 0..3 {
            if crop_origin[a] + cext[a] > dext[a] {
                return Err(Error::Invalid(format!(
                    "crop origin {:?} + dims {:?} exceeds downsampled extent {:?}",
                    crop_origin, cext, dext
                )));
            }
        }
        let block = (factor[0] * factor[1] * factor[2]) as f64;
        let mut data = Vec::with_capacity(crop_dims.len());
        for cz in 0..crop_dims.nz {
            let bz = (crop_origin[2] + cz) * factor[2];
            for cy in 0..crop_dims.ny {
                let by = (crop_origin[1] + cy) * factor[1];
                for cx in 0..crop_dims.nx {
                    let bx = (crop_origin[0] + cx) * factor[0];
                    let mut acc = 0.0f64;
                    for dz in 0..factor[2] {
                        for dy in 0..factor[1] {
                            for dx in 0..factor[0] {
                                acc += self.at(bx + dx, by + dy, bz + dz) as f64;
                            }
                        }
                    }
                    data.push((acc / block) as f32);
                }
            }
        }
        let spacing = [
            self.spacing[0] * factor[0] as f32,
            self.spacing[1] * factor[1] as f32,
            self.spacing[2] * factor[2] as f32,
        ];
        Volume::new(crop_dims, spacing, data)
    }
}

/// JSON header shared by volumes, masks, and fields. Keys are part of the
/// on-disk contract and must not be renamed.
#[derive(Serialize, Deserialize)]
pub(crate) struct ArrayHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub dtype: String,
    pub data: String,
}

pub(crate) const DTYPE_F32: &str = "f32le";
pub(crate) const DTYPE_U8: &str = "u8";
pub(crate) const DTYPE_VEC3: &str = "f32le_vec3";

/// Save a volume as a `<name>.json` + `<name>.raw` pair with dtype `f32le`.
pub fn save_volume(v: &Volume, json_path: &Path) -> Result<()> {
    let header = ArrayHeader {
        dims: v.dims.as_array(),
        spacing_mm: v.spacing,
        dtype: DTYPE_F32.into(),
        data: fileio::payload_name_for(json_path)?,
    };
    fileio::write_pair(json_path, &header, &fileio::f32s_to_le_bytes(&v.data))
}

/// Save a binary mask with dtype `u8` (one byte per voxel).
pub fn save_mask(m: &Volume, json_path: &Path) -> Result<()> {
    if !m.is_binary() {
        return Err(Error::Invalid("mask volume has values outside {0, 1}".into()));
    }
    let header = ArrayHeader {
        dims: m.dims.as_array(),
        spacing_mm: m.spacing,
        dtype: DTYPE_U8.into(),
        data: fileio::payload_name_for(json_path)?,
    };
    let bytes: Vec<u8> = m.data.iter().map(|&v| if v != 0.0 { 1u8 } else { 0u8 }).collect();
    fileio::write_pair(json_path, &header, &bytes)
}

/// Load a volume or mask pair. Accepts dtypes `f32le` and `u8`; mask bytes
/// become 0.0/1.0 intensities. Rejects size mismatches, unknown dtypes, and
/// non-finite payloads.
pub fn load_volume(json_path: &Path) -> Result<Volume> {
    let header: ArrayHeader = fileio::read_header(json_path)?;
    let dims = Dims::from(header.dims);
    let data = match header.dtype.as_str() {
        DTYPE_F32 => {
            let bytes = fileio::read_payload(json_path, &header.data, dims.len() * 4)?;
            let vals = fileio::le_bytes_to_f32s(&bytes);
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(Error::format(json_path, "payload contains non-finite values"));
            }
            vals
        }
        DTYPE_U8 => {
            let bytes = fileio::read_payload(json_path, &header.data, dims.len())?;
            if let Some(bad) = bytes.iter().find(|&&b| b > 1) {
                return Err(Error::format(json_path, format!("mask byte {bad} outside {{0, 1}}")));
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
        other => {
            return Err(Error::format(json_path, format!("unsupported dtype {other:?} for a volume")));
        }
    };
    Volume::new(dims, header.spacing_mm, data)
        .map_err(|e| Error::format(json_path, format!("invalid stored volume: {e}")))
}

/// A named, ordered collection of binary masks sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureSet {
    pub structures: Vec<(String, Volume)>,
}

impl StructureSet {
    pub fn new(structures: Vec<(String, Volume)>) -> Result<Self> {
        let set = StructureSet { structures };
        set.validate()?;
        Ok(set)
    }

    pub fn empty() -> Self {
        StructureSet { structures: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.structures.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Volume> {
        self.structures.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Check the type invariants: all masks binary, all sharing one grid.
    pub fn validate(&self) -> Result<()> {
        let Some((_, first)) = self.structures.first() else {
            return Ok(());
        };
        for (name, mask) in &self.structures {
            if mask.dims() != first.dims() || mask.spacing() != first.spacing() {
                return Err(Error::DimMismatch(format!("structure {name:?} grid differs from the set's grid")));
            }
            if !mask.is_binary() {
                return Err(Error::Invalid(format!("structure {name:?} mask is not binary")));
            }
        }
        Ok(())
    }

    /// Check that every mask matches a reference volume's grid.
    pub fn validate_against(&self, reference: &Volume) -> Result<()> {
        self.validate()?;
        for (name, mask) in &self.structures {
            if mask.dims() != reference.dims() || mask.spacing() != reference.spacing() {
                return Err(Error::DimMismatch(format!(
                    "structure {name:?} grid differs from its reference volume"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> Volume {
        let data = (0..dims.len()).map(|i| i as f32).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn constructor_enforces_invariants() {
        let d = Dims::cube(2);
        assert!(Volume::new(d, [1.0; 3], vec![0.0; 8]).is_ok());
        assert!(matches!(Volume::new(d, [1.0; 3], vec![0.0; 7]), Err(Error::DimMismatch(_))));
        assert!(matches!(Volume::new(d, [0.0, 1.0, 1.0], vec![0.0; 8]), Err(Error::Invalid(_))));
        assert!(matches!(
            Volume::new(d, [1.0; 3], vec![f32::NAN; 8]),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp(Dims::cube(4));
        let path = dir.path().join("ramp.json");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back, v);
        // Bit-exactness of the payload itself.
        let raw = std::fs::read(dir.path().join("ramp.raw")).unwrap();
        assert_eq!(raw, fileio::f32s_to_le_bytes(v.data()));
    }

    #[test]
    fn zero_volume_payload_is_all_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros(Dims::cube(2), [1.0; 3]);
        save_volume(&v, &dir.path().join("z.json")).unwrap();
        let raw = std::fs::read(dir.path().join("z.raw")).unwrap();
        assert_eq!(raw, vec![0u8; 32], "8 voxels x 4 bytes of zeros");
    }

    #[test]
    fn two_saves_produce_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp(Dims::new(3, 2, 2));
        save_volume(&v, &dir.path().join("a.json")).unwrap();
        save_volume(&v, &dir.path().join("b.json")).unwrap();
        let ja = std::fs::read(dir.path().join("a.json")).unwrap();
        let jb = std::fs::read(dir.path().join("b.json")).unwrap();
        // Headers differ only in the payload filename; payloads are identical.
        assert_eq!(
            String::from_utf8(ja).unwrap().replace("a.raw", "X"),
            String::from_utf8(jb).unwrap().replace("b.raw", "X")
        );
        assert_eq!(
            std::fs::read(dir.path().join("a.raw")).unwrap(),
            std::fs::read(dir.path().join("b.raw")).unwrap()
        );
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let header = ArrayHeader {
            dims: [2, 2, 2],
            spacing_mm: [1.0; 3],
            dtype: DTYPE_F32.into(),
            data: "bad.raw".into(),
        };
        // 7 floats where the header implies 8.
        fileio::write_pair(&path, &header, &fileio::f32s_to_le_bytes(&[0.0; 7])).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err:?}");
        assert!(err.to_string().contains("28 bytes"), "diagnostic should name the size: {err}");
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.json");
        let header = ArrayHeader {
            dims: [1, 1, 1],
            spacing_mm: [1.0; 3],
            dtype: DTYPE_F32.into(),
            data: "nan.raw".into(),
        };
        fileio::write_pair(&path, &header, &f32::NAN.to_le_bytes()).unwrap();
        assert!(load_volume(&path).is_err());
    }

    #[test]
    fn mask_roundtrip_uses_u8_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = vec![0.0f32; 8];
        data[3] = 1.0;
        let m = Volume::new(Dims::cube(2), [2.0, 1.0, 1.0], data).unwrap();
        let path = dir.path().join("m.json");
        save_mask(&m, &path).unwrap();
        assert_eq!(std::fs::read(dir.path().join("m.raw")).unwrap().len(), 8);
        let back = load_volume(&path).unwrap();
        assert_eq!(back, m);
        // Re-saving the loaded mask reproduces the payload byte-for-byte.
        let path2 = dir.path().join("m2.json");
        save_mask(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("m.raw")).unwrap(),
            std::fs::read(dir.path().join("m2.raw")).unwrap()
        );
    }

    #[test]
    fn mask_with_stray_bytes_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let header = ArrayHeader {
            dims: [1, 1, 2],
            spacing_mm: [1.0; 3],
            dtype: DTYPE_U8.into(),
            data: "m.raw".into(),
        };
        fileio::write_pair(&path, &header, &[0u8, 7u8]).unwrap();
        assert!(load_volume(&path).is_err());
    }

    #[test]
    fn normalize_maps_range_to_unit_interval() {
        let d = Dims::new(3, 1, 1);
        let v = Volume::new(d, [1.0; 3], vec![0.0, 50.0, 100.0]).unwrap();
        assert_eq!(v.normalize_intensity().data(), &[0.0, 0.5, 1.0]);

        let v = Volume::new(d, [1.0; 3], vec![-10.0, 10.0, 30.0]).unwrap();
        assert_eq!(v.normalize_intensity().data()[1], 0.5);

        let constant = Volume::new(d, [1.0; 3], vec![5.0; 3]).unwrap();
        assert_eq!(constant.normalize_intensity().data(), &[0.0; 3]);
    }

    #[test]
    fn normalize_is_idempotent_on_normalized_input() {
        let d = Dims::cube(3);
        let data: Vec<f32> = (0..27).map(|i| (i as f32) / 26.0).collect();
        let v = Volume::new(d, [1.0; 3], data).unwrap();
        let once = v.normalize_intensity();
        let twice = once.normalize_intensity();
        assert_eq!(once, twice);
    }

    #[test]
    fn resample_identity_with_unit_factor() {
        let v = ramp(Dims::cube(4));
        let out = v.resample([1, 1, 1], [0, 0, 0], v.dims()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn resample_block_means() {
        // Constant volume stays constant under 2x downsampling.
        let ones = Volume::new(Dims::cube(4), [1.0; 3], vec![1.0; 64]).unwrap();
        let half = ones.resample([2, 2, 2], [0, 0, 0], Dims::cube(2)).unwrap();
        assert_eq!(half.data(), &[1.0; 8]);
        assert_eq!(half.spacing(), [2.0; 3]);

        // {0, 2} with factor (2,1,1) -> single voxel holding the mean, 1.
        let pair = Volume::new(Dims::new(2, 1, 1), [1.0; 3], vec![0.0, 2.0]).unwrap();
        let one = pair.resample([2, 1, 1], [0, 0, 0], Dims::new(1, 1, 1)).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn resample_rejects_out_of_bounds_crop() {
        let v = ramp(Dims::cube(4));
        let err = v.resample([2, 2, 2], [1, 0, 0], Dims::cube(2)).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn structure_set_checks_grids_and_binarity() {
        let d = Dims::cube(2);
        let mask = Volume::new(d, [1.0; 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let set = StructureSet::new(vec![("a".into(), mask.clone())]).unwrap();
        let reference = Volume::zeros(d, [1.0; 3]);
        set.validate_against(&reference).unwrap();

        let graded = Volume::new(d, [1.0; 3], vec![0.5; 8]).unwrap();
        assert!(StructureSet::new(vec![("bad".into(), graded)]).is_err());

        let other_grid = Volume::zeros(Dims::cube(3), [1.0; 3]);
        let set = StructureSet { structures: vec![("a".into(), mask), ("b".into(), other_grid)] };
        assert!(set.validate().is_err());
    }
}
