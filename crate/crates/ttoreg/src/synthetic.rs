//! Reproducible phantom cohorts: anatomy volumes, structure masks, and
//! smooth ground-truth deformations with known amplitude.
//!
//! Every artifact is a pure function of the cohort seed plus subject and
//! fraction indices, so cohorts can be regenerated bit-identically anywhere.
//! Fraction images are the planning phantom warped by a ground-truth field
//! (fraction 2 adds a composed drift field) plus mild intensity noise, and
//! the fraction truth masks are the planning masks warped by that same
//! field — a perfect registration therefore scores DSC 1 by construction.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, DisplacementField};
use crate::volume::{load_volume, save_mask, save_volume, Dims, StructureSet, Volume};

/// Everything that determines a generated cohort. Serialized into the cohort
/// manifest so any cohort directory is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    /// Training subjects.
    pub n_subjects: usize,
    /// Held-out test subjects.
    pub n_test: usize,
    pub dims: [usize; 3],
    /// Organ structures per subject (0 = body only).
    pub n_structures: usize,
    /// Maximum ground-truth displacement magnitude, in voxels.
    pub deformation_amplitude: f64,
    /// Gaussian smoothing width of the deformation noise, in voxels.
    pub smoothness_sigma: f64,
    /// Maximum magnitude of the inter-fraction drift field, in voxels.
    pub drift_amplitude: f64,
    /// Standard deviation of additive intensity noise.
    pub noise_sigma: f64,
    /// Fraction images per subject.
    pub n_fractions: usize,
    pub seed: u64,
    /// Share of test subjects generated with amplified deformations.
    pub ood_fraction: f64,
    /// Amplitude multiplier for those out-of-distribution subjects.
    pub ood_scale: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_subjects: 40,
            n_test: 8,
            dims: [32, 32, 32],
            n_structures: 4,
            deformation_amplitude: 3.0,
            smoothness_sigma: 4.0,
            drift_amplitude: 1.0,
            noise_sigma: 0.02,
            n_fractions: 2,
            seed: 42,
            ood_fraction: 0.25,
            ood_scale: 2.0,
        }
    }
}

impl CohortSpec {
    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn total_subjects(&self) -> usize {
        self.n_subjects + self.n_test
    }

    /// Number of test subjects drawn with amplified deformations.
    pub fn ood_count(&self) -> usize {
        (self.ood_fraction * self.n_test as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().is_empty() {
            return Err(Error::Invalid(format!("cohort dims must be nonzero, got {:?}", self.dims)));
        }
        if !(self.deformation_amplitude >= 0.0) || !self.deformation_amplitude.is_finite() {
            return Err(Error::Invalid(format!(
                "deformation_amplitude must be finite and >= 0, got {}",
                self.deformation_amplitude
            )));
        }
        if !(self.smoothness_sigma > 0.0) || !self.smoothness_sigma.is_finite() {
            return Err(Error::Invalid(format!(
                "smoothness_sigma must be finite and > 0, got {}",
                self.smoothness_sigma
            )));
        }
        if !(self.drift_amplitude >= 0.0) || !self.drift_amplitude.is_finite() {
            return Err(Error::Invalid(format!(
                "drift_amplitude must be finite and >= 0, got {}",
                self.drift_amplitude
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Invalid(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return Err(Error::Invalid(format!(
                "ood_fraction must lie in [0, 1], got {}",
                self.ood_fraction
            )));
        }
        if !(self.ood_scale > 0.0) || !self.ood_scale.is_finite() {
            return Err(Error::Invalid(format!("ood_scale must be finite and > 0, got {}", self.ood_scale)));
        }
        if self.n_fractions == 0 {
            return Err(Error::Invalid("n_fractions must be at least 1".into()));
        }
        Ok(())
    }
}

// --- deterministic seed derivation -----------------------------------------

const PURPOSE_PHANTOM: u64 = 0x5048_414e_544f_4d00;
const PURPOSE_FIELD: u64 = 0x4649_454c_4400_0000;
const PURPOSE_DRIFT: u64 = 0x4452_4946_5400_0000;
const PURPOSE_NOISE: u64 = 0x4e4f_4953_4500_0000;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a purpose tag and two indices into an independent
/// stream seed.
pub(crate) fn derive_seed(base: u64, purpose: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base.wrapping_add(purpose)).wrapping_add(a)).wrapping_add(b))
}

/// Standard normal draw (Box-Muller, one value per call).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// --- phantom anatomy --------------------------------------------------------

const BACKGROUND_INTENSITY: f64 = 0.06;
const BODY_INTENSITY: f64 = 0.3;
/// Full placement restarts before giving up, and center samples per organ
/// within one restart.
const PLACEMENT_RESTARTS: usize = 40;
const PLACEMENT_TRIES: usize = 50;

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    intensity: f64,
}

impl Ellipsoid {
    /// Normalized radius: 1 on the surface, < 1 inside.
    fn radius(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.semi[i];
            s += d * d;
        }
        s.sqrt()
    }

    /// Soft-edged support: 1 well inside, 0.5 on the surface, 0 outside.
    fn profile(&self, p: [f64; 3], edge: f64) -> f64 {
        let t = ((1.0 - self.radius(p)) / edge + 0.5).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    fn max_semi(&self) -> f64 {
        self.semi[0].max(self.semi[1]).max(self.semi[2])
    }
}

/// Uniform point in the closed unit ball, by bounded rejection sampling.
fn sample_unit_ball(rng: &mut ChaCha8Rng) -> Option<[f64; 3]> {
    for _ in 0..20 {
        let p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
            return Some(p);
        }
    }
    None
}

fn sample_body(dims: Dims, rng: &mut ChaCha8Rng) -> Ellipsoid {
    let n = dims.as_array();
    let mut center = [0.0; 3];
    let mut semi = [0.0; 3];
    for i in 0..3 {
        let extent = n[i] as f64;
        center[i] = 0.5 * (extent - 1.0) + rng.gen_range(-0.02..0.02) * extent;
        semi[i] = rng.gen_range(0.36..0.42) * extent;
    }
    Ellipsoid { center, semi, intensity: BODY_INTENSITY }
}

/// Place `n_structures` non-overlapping organs strictly inside the body.
/// Placement is rejection-sampled with bounded restarts; a spec too crowded
/// for its grid fails with a placement error.
fn place_organs(spec: &CohortSpec, body: &Ellipsoid, rng: &mut ChaCha8Rng) -> Result<Vec<Ellipsoid>> {
    let min_dim = *spec.dims.iter().min().expect("three axes") as f64;
    let min_body_semi = body.semi[0].min(body.semi[1]).min(body.semi[2]);
    let semi_lo = (0.07 * min_dim).clamp(1.3, 2.5);
    let semi_hi = (0.11 * min_dim).clamp(1.9, 3.5);
    let gap = 1.2; // voxels of clearance between organ bounding spheres

    for _restart in 0..PLACEMENT_RESTARTS {
        let mut organs: Vec<Ellipsoid> = Vec::with_capacity(spec.n_structures);
        'organ: for k in 0..spec.n_structures {
            let spread = if spec.n_structures > 1 {
                k as f64 / (spec.n_structures - 1) as f64
            } else {
                0.0
            };
            let intensity = 0.55 + 0.35 * spread;
            for _try in 0..PLACEMENT_TRIES {
                let mut semi = [0.0; 3];
                for s in &mut semi {
                    *s = rng.gen_range(semi_lo..semi_hi);
                }
                let max_semi = semi[0].max(semi[1]).max(semi[2]);
                // Stay inside the body: moving a point by d shifts its
                // normalized body radius by at most d / min(body semi-axes),
                // so centers within this normalized radius keep the whole
                // organ inside.
                let rn_max = 0.85 - max_semi / min_body_semi;
                if rn_max <= 0.05 {
                    continue;
                }
                let Some(p) = sample_unit_ball(rng) else { continue };
                let mut center = [0.0; 3];
                for i in 0..3 {
                    center[i] = body.center[i] + p[i] * rn_max * body.semi[i];
                }
                let cand = Ellipsoid { center, semi, intensity };
                let clear = organs.iter().all(|o| {
                    let d2: f64 = (0..3).map(|i| (o.center[i] - center[i]).powi(2)).sum();
                    d2.sqrt() > o.max_semi() + cand.max_semi() + gap
                });
                if clear {
                    organs.push(cand);
                    continue 'organ;
                }
            }
            break; // this restart failed; redraw everything
        }
        if organs.len() == spec.n_structures {
            return Ok(organs);
        }
    }
    Err(Error::Placement(format!(
        "could not place {} non-overlapping structures on a {:?} grid after {} restarts; \
         reduce n_structures or enlarge dims",
        spec.n_structures, spec.dims, PLACEMENT_RESTARTS
    )))
}

/// Phantom plus its organ masks and the body support mask (the latter used
/// by containment checks).
fn phantom_parts(spec: &CohortSpec, subject_index: usize) -> Result<(Volume, StructureSet, Volume)> {
    spec.validate()?;
    let dims = spec.dims();
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, PURPOSE_PHANTOM, subject_index as u64, 0));
    let body = sample_body(dims, &mut rng);
    let organs = place_organs(spec, &body, &mut rng)?;

    let body_edge = 0.12;
    let organ_edge = 0.25;
    let n = dims.len();
    let mut image = vec![0.0f32; n];
    let mut body_mask = vec![0.0f32; n];
    let mut organ_masks = vec![vec![0.0f32; n]; organs.len()];
    let mut noise_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, PURPOSE_NOISE, subject_index as u64, 0));
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let p = [x as f64, y as f64, z as f64];
                let mut v = BACKGROUND_INTENSITY;
                let pb = body.profile(p, body_edge);
                v += (body.intensity - v) * pb;
                if body.radius(p) < 1.0 {
                    body_mask[idx] = 1.0;
                }
                for (k, o) in organs.iter().enumerate() {
                    let po = o.profile(p, organ_edge);
                    v += (o.intensity - v) * po;
                    if o.radius(p) < 1.0 {
                        organ_masks[k][idx] = 1.0;
                    }
                }
                v += spec.noise_sigma * gauss(&mut noise_rng);
                image[idx] = v as f32;
                idx += 1;
            }
        }
    }

    let spacing = [1.0f32; 3];
    let volume = Volume::new(dims, spacing, image)?;
    let structures = StructureSet::new(
        organ_masks
            .into_iter()
            .enumerate()
            .map(|(k, m)| Ok((format!("organ_{k:02}"), Volume::new(dims, spacing, m)?)))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let body_volume = Volume::new(dims, spacing, body_mask)?;
    Ok((volume, structures, body_volume))
}

/// Deterministic anatomy for one subject: a soft-edged body ellipsoid
/// containing non-overlapping organ ellipsoids with distinct intensities
/// over a noisy background. Masks are the thresholded organ supports.
pub fn generate_phantom(spec: &CohortSpec, subject_index: usize) -> Result<(Volume, StructureSet)> {
    let (volume, structures, _body) = phantom_parts(spec, subject_index)?;
    Ok((volume, structures))
}

// --- smooth deformation fields ----------------------------------------------

/// Separable Gaussian blur along all three axes with zero padding.
fn gaussian_blur(data: &mut [f32], dims: Dims, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= norm;
    }

    let Dims { nx, ny, nz } = dims;
    let strides = [1usize, nx, nx * ny];
    let counts = [nx, ny, nz];
    let mut line = vec![0.0f64; nx.max(ny).max(nz)];
    for axis in 0..3 {
        let n = counts[axis];
        let stride = strides[axis];
        let (oa, ob) = match axis {
            0 => (nx, nx * ny), // iterate (y, z)
            1 => (1, nx * ny),  // iterate (x, z)
            _ => (1, nx),       // iterate (x, y)
        };
        let (ca, cb) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for b in 0..cb {
            for a in 0..ca {
                let base = a * oa + b * ob;
                for i in 0..n {
                    line[i] = data[base + i * stride] as f64;
                }
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, w) in kernel.iter().enumerate() {
                        let src = i as isize + j as isize - radius as isize;
                        if src >= 0 && (src as usize) < n {
                            acc += w * line[src as usize];
                        }
                    }
                    data[base + i * stride] = acc as f32;
                }
            }
        }
    }
}

fn border_margin(dims: Dims) -> usize {
    let min_dim = dims.nx.min(dims.ny).min(dims.nz);
    (min_dim / 8).clamp(2, 6)
}

/// Smoothstep taper that is exactly zero on the volume border and one at
/// `margin` voxels inside.
fn taper(i: usize, n: usize, margin: usize) -> f64 {
    let d = i.min(n - 1 - i) as f64;
    let t = (d / margin as f64).min(1.0);
    t * t * (3.0 - 2.0 * t)
}

fn smooth_field_seeded(dims: Dims, sigma: f64, amplitude: f64, seed: u64) -> DisplacementField {
    if amplitude == 0.0 {
        return DisplacementField::zeros(dims);
    }
    let n = dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps = vec![vec![0.0f32; n]; 3];
    for i in 0..n {
        for comp in &mut comps {
            comp[i] = (rng.gen::<f64>() * 2.0 - 1.0) as f32;
        }
    }
    for comp in &mut comps {
        gaussian_blur(comp, dims, sigma);
    }

    let margin = border_margin(dims);
    let mut data = vec![0.0f32; n * 3];
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let w = taper(x, dims.nx, margin) * taper(y, dims.ny, margin) * taper(z, dims.nz, margin);
                for (c, comp) in comps.iter().enumerate() {
                    data[idx * 3 + c] = (comp[idx] as f64 * w) as f32;
                }
                idx += 1;
            }
        }
    }
    let mut u = DisplacementField::from_interleaved(dims, data).expect("constructed in place");
    let max = u.max_magnitude();
    if max > 0.0 {
        u.scale((amplitude / max as f64) as f32);
    }
    u
}

/// Smooth random displacement field: white noise blurred by a Gaussian of
/// width `smoothness_sigma`, tapered to zero at the volume border, and
/// rescaled so the maximum displacement magnitude equals
/// `deformation_amplitude`.
pub fn generate_smooth_field(
    spec: &CohortSpec,
    subject_index: usize,
    fraction_index: usize,
) -> Result<DisplacementField> {
    spec.validate()?;
    Ok(smooth_field_seeded(
        spec.dims(),
        spec.smoothness_sigma,
        spec.deformation_amplitude,
        derive_seed(spec.seed, PURPOSE_FIELD, subject_index as u64, fraction_index as u64),
    ))
}

// --- cohort assembly ---------------------------------------------------------

/// One treatment fraction: the acquired image plus the ground truth that
/// produced it.
#[derive(Debug, Clone)]
pub struct Fraction {
    pub image: Volume,
    pub truth_field: DisplacementField,
    pub truth_masks: StructureSet,
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub train: bool,
    /// Drawn with amplified deformations (test subjects only).
    pub ood: bool,
    pub planning: Volume,
    pub masks: StructureSet,
    pub fractions: Vec<Fraction>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub subjects: Vec<Subject>,
}

impl Cohort {
    pub fn training(&self) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(|s| s.train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(|s| !s.train)
    }
}

fn add_noise(image: Volume, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Volume> {
    if sigma == 0.0 {
        return Ok(image);
    }
    let dims = image.dims();
    let spacing = image.spacing();
    let mut data = image.into_data();
    for v in &mut data {
        *v = (*v as f64 + sigma * gauss(rng)) as f32;
    }
    Volume::new(dims, spacing, data)
}

fn warp_structures(masks: &StructureSet, u: &DisplacementField) -> Result<StructureSet> {
    StructureSet::new(
        masks
            .structures
            .iter()
            .map(|(name, m)| Ok((name.clone(), field::warp_mask(m, u)?)))
            .collect::<Result<Vec<_>>>()?,
    )
}

fn generate_subject(spec: &CohortSpec, index: usize) -> Result<Subject> {
    let train = index < spec.n_subjects;
    let test_index = index.wrapping_sub(spec.n_subjects);
    let ood = !train && test_index >= spec.n_test - spec.ood_count();
    let id = if train {
        format!("train_{index:02}")
    } else {
        format!("test_{test_index:02}")
    };
    let (planning, masks) = generate_phantom(spec, index)?;
    let amplitude = spec.deformation_amplitude * if ood { spec.ood_scale } else { 1.0 };
    let mut truth = smooth_field_seeded(
        spec.dims(),
        spec.smoothness_sigma,
        amplitude,
        derive_seed(spec.seed, PURPOSE_FIELD, index as u64, 1),
    );
    let mut fractions = Vec::with_capacity(spec.n_fractions);
    for f in 1..=spec.n_fractions {
        if f > 1 {
            let drift = smooth_field_seeded(
                spec.dims(),
                spec.smoothness_sigma,
                spec.drift_amplitude,
                derive_seed(spec.seed, PURPOSE_DRIFT, index as u64, f as u64),
            );
            truth = field::compose(&truth, &drift)?;
        }
        let warped = field::warp_volume(&planning, &truth)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            PURPOSE_NOISE,
            index as u64,
            f as u64,
        ));
        let image = add_noise(warped, spec.noise_sigma, &mut noise_rng)?;
        fractions.push(Fraction {
            image,
            truth_field: truth.clone(),
            truth_masks: warp_structures(&masks, &truth)?,
        });
    }
    Ok(Subject { id, train, ood, planning, masks, fractions })
}

/// Generate the full cohort: training subjects first, then test subjects,
/// with the final `ood_count` test subjects drawn at amplified deformation.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let subjects = (0..spec.total_subjects())
        .map(|i| generate_subject(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { spec: spec.clone(), subjects })
}

// --- on-disk layout ------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SubjectEntry {
    id: String,
    train: bool,
    ood: bool,
    structures: Vec<String>,
    n_fractions: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CohortManifest {
    spec: CohortSpec,
    subjects: Vec<SubjectEntry>,
}

fn subject_dir(root: &Path, id: &str) -> PathBuf {
    root.join("subjects").join(id)
}

fn check_structure_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("structure name {name:?} is not filesystem-safe")))
    }
}

fn save_structures(dir: &Path, set: &StructureSet) -> Result<()> {
    for (name, mask) in &set.structures {
        check_structure_name(name)?;
        save_mask(mask, &dir.join(format!("{name}.json")))?;
    }
    Ok(())
}

fn load_structures(dir: &Path, names: &[String]) -> Result<StructureSet> {
    StructureSet::new(
        names
            .iter()
            .map(|name| {
                check_structure_name(name)?;
                Ok((name.clone(), load_volume(&dir.join(format!("{name}.json")))?))
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Write a cohort as a directory tree rooted at `root`:
/// `cohort.json` plus per-subject planning volume, masks, and per-fraction
/// image / truth field / truth masks.
pub fn write_cohort(cohort: &Cohort, root: &Path) -> Result<()> {
    let manifest = CohortManifest {
        spec: cohort.spec.clone(),
        subjects: cohort
            .subjects
            .iter()
            .map(|s| SubjectEntry {
                id: s.id.clone(),
                train: s.train,
                ood: s.ood,
                structures: s.masks.names().iter().map(|n| n.to_string()).collect(),
                n_fractions: s.fractions.len(),
            })
            .collect(),
    };
    for subject in &cohort.subjects {
        let dir = subject_dir(root, &subject.id);
        save_volume(&subject.planning, &dir.join("planning.json"))?;
        save_structures(&dir.join("masks"), &subject.masks)?;
        for (k, fraction) in subject.fractions.iter().enumerate() {
            let fdir = dir.join("fractions").join(format!("f{}", k + 1));
            save_volume(&fraction.image, &fdir.join("image.json"))?;
            field::save_field(
                &fraction.truth_field,
                subject.planning.spacing(),
                &fdir.join("truth_field.json"),
            )?;
            save_structures(&fdir.join("truth_masks"), &fraction.truth_masks)?;
        }
    }
    let path = root.join("cohort.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, format!("manifest encode: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Load a cohort directory written by [`write_cohort`].
pub fn load_cohort(root: &Path) -> Result<Cohort> {
    let path = root.join("cohort.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CohortManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("manifest decode: {e}")))?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let dir = subject_dir(root, &entry.id);
        let planning = load_volume(&dir.join("planning.json"))?;
        let masks = load_structures(&dir.join("masks"), &entry.structures)?;
        let mut fractions = Vec::with_capacity(entry.n_fractions);
        for k in 1..=entry.n_fractions {
            let fdir = dir.join("fractions").join(format!("f{k}"));
            let image = load_volume(&fdir.join("image.json"))?;
            let (truth_field, _spacing) = field::load_field(&fdir.join("truth_field.json"))?;
            let truth_masks = load_structures(&fdir.join("truth_masks"), &entry.structures)?;
            fractions.push(Fraction { image, truth_field, truth_masks });
        }
        subjects.push(Subject {
            id: entry.id.clone(),
            train: entry.train,
            ood: entry.ood,
            planning,
            masks,
            fractions,
        });
    }
    Ok(Cohort { spec: manifest.spec, subjects })
}
