//! Segmentation evaluation: Dice similarity coefficient and the 95th
//! percentile Hausdorff distance, plus batch scoring over structure sets.
//!
//! HD95 operates on mask boundary voxels (6-connectivity; the volume border
//! counts as unset), with spacing-scaled Euclidean distances computed by an
//! exact separable squared distance transform and the nearest-rank
//! percentile rule. Scores that are undefined for empty masks are explicit
//! flags, never sentinel numbers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, StructureSet, Volume};

/// Per-structure evaluation result. `None` marks an undefined score: DSC is
/// undefined when both masks are empty, HD95 when either is.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureScore {
    pub name: String,
    pub dsc: Option<f64>,
    pub hd95_mm: Option<f64>,
}

fn check_mask_pair(x: &Volume, y: &Volume) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::DimMismatch(format!(
            "mask grids differ: {:?} vs {:?}",
            x.dims().as_array(),
            y.dims().as_array()
        )));
    }
    if !x.is_binary() || !y.is_binary() {
        return Err(Error::Invalid("masks must be binary (0/1)".into()));
    }
    Ok(())
}

/// Dice similarity coefficient `2|X intersect Y| / (|X| + |Y|)`.
/// Returns `None` when both masks are empty.
pub fn dsc(x: &Volume, y: &Volume) -> Result<Option<f64>> {
    check_mask_pair(x, y)?;
    let mut inter = 0usize;
    let mut nx = 0usize;
    let mut ny = 0usize;
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (a, b) = (a != 0.0, b != 0.0);
        inter += (a && b) as usize;
        nx += a as usize;
        ny += b as usize;
    }
    if nx + ny == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * inter as f64 / (nx + ny) as f64))
}

/// Flat indices of boundary voxels: set voxels with at least one unset
/// 6-neighbor, the volume border counting as unset.
fn boundary_voxels(mask: &Volume) -> Vec<usize> {
    let Dims { nx, ny, nz } = mask.dims();
    let data = mask.data();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = (z * ny + y) * nx + x;
                if data[idx] == 0.0 {
                    continue;
                }
                let exposed = x == 0
                    || x == nx - 1
                    || y == 0
                    || y == ny - 1
                    || z == 0
                    || z == nz - 1
                    || data[idx - 1] == 0.0
                    || data[idx + 1] == 0.0
                    || data[idx - nx] == 0.0
                    || data[idx + nx] == 0.0
                    || data[idx - nx * ny] == 0.0
                    || data[idx + nx * ny] == 0.0;
                if exposed {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// One pass of the exact lower-envelope distance transform along a line with
/// physical sample positions `i * step`. `f` holds squared distances in, and
/// receives the transformed squared distances out.
fn dt1d(f: &mut [f64], step: f64, v: &mut [usize], z: &mut [f64], buf: &mut [f64]) {
    let n = f.len();
    buf[..n].copy_from_slice(f);
    let mut k = 0usize;
    let mut seeded = false;
    for q in 0..n {
        if buf[q] == f64::INFINITY {
            continue;
        }
        let pq = q as f64 * step;
        if !seeded {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            seeded = true;
            continue;
        }
        loop {
            let p = v[k] as f64 * step;
            let s = ((buf[q] + pq * pq) - (buf[v[k]] + p * p)) / (2.0 * (pq - p));
            if s <= z[k] {
                if k == 0 {
                    // Replace the sole parabola.
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !seeded {
        return; // no finite source on this line
    }
    let mut k = 0usize;
    for (q, out) in f.iter_mut().enumerate() {
        let pq = q as f64 * step;
        while z[k + 1] < pq {
            k += 1;
        }
        let p = v[k] as f64 * step;
        *out = (pq - p) * (pq - p) + buf[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm^2) from every voxel to the nearest
/// seed voxel, under anisotropic spacing.
fn squared_edt(dims: Dims, seeds: &[usize], spacing_mm: [f32; 3]) -> Vec<f64> {
    let Dims { nx, ny, nz } = dims;
    let mut g = vec![f64::INFINITY; dims.len()];
    for &s in seeds {
        g[s] = 0.0;
    }
    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0f64; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0.0f64; max_n + 1];
    let mut buf = vec![0.0f64; max_n];

    // Along x.
    for zy in 0..nz * ny {
        let base = zy * nx;
        line[..nx].copy_from_slice(&g[base..base + nx]);
        dt1d(&mut line[..nx], spacing_mm[0] as f64, &mut v, &mut z, &mut buf);
        g[base..base + nx].copy_from_slice(&line[..nx]);
    }
    // Along y.
    for zz in 0..nz {
        for x in 0..nx {
            let base = zz * ny * nx + x;
            for y in 0..ny {
                line[y] = g[base + y * nx];
            }
            dt1d(&mut line[..ny], spacing_mm[1] as f64, &mut v, &mut z, &mut buf);
            for y in 0..ny {
                g[base + y * nx] = line[y];
            }
        }
    }
    // Along z.
    let plane = nx * ny;
    for xy in 0..plane {
        for zz in 0..nz {
            line[zz] = g[xy + zz * plane];
        }
        dt1d(&mut line[..nz], spacing_mm[2] as f64, &mut v, &mut z, &mut buf);
        for zz in 0..nz {
            g[xy + zz * plane] = line[zz];
        }
    }
    g
}

/// Nearest-rank percentile: the ceil(p * n)-th smallest value.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// 95th-percentile Hausdorff distance between two binary masks, in mm.
///
/// Boundary voxels of each mask are extracted (6-connectivity, volume border
/// unset), each boundary point is assigned the spacing-scaled Euclidean
/// distance to the other mask's nearest boundary point, and the result is
/// the larger of the two directed 95th percentiles (nearest-rank rule).
/// Returns `None` when either mask is empty.
pub fn hd95(x: &Volume, y: &Volume, spacing_mm: [f32; 3]) -> Result<Option<f64>> {
    check_mask_pair(x, y)?;
    if spacing_mm.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Invalid(format!("spacing must be positive and finite, got {spacing_mm:?}")));
    }
    let bx = boundary_voxels(x);
    let by = boundary_voxels(y);
    if bx.is_empty() || by.is_empty() {
        return Ok(None);
    }
    let dims = x.dims();
    let edt_y = squared_edt(dims, &by, spacing_mm);
    let edt_x = squared_edt(dims, &bx, spacing_mm);
    let mut d_xy: Vec<f64> = bx.iter().map(|&i| edt_y[i].sqrt()).collect();
    let mut d_yx: Vec<f64> = by.iter().map(|&i| edt_x[i].sqrt()).collect();
    d_xy.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    d_yx.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    Ok(Some(nearest_rank(&d_xy, 0.95).max(nearest_rank(&d_yx, 0.95))))
}

/// Median of a sample; `None` when empty. Even-sized samples average the two
/// middle order statistics.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) })
}

/// Mean of a sample; `None` when empty.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Score a registration result: deform the planning structure masks by the
/// predicted displacement field, then score them against the target
/// fraction's truth masks.
pub fn registration_scores(
    planning_masks: &StructureSet,
    truth_masks: &StructureSet,
    field: &crate::field::DisplacementField,
) -> Result<Vec<StructureScore>> {
    let warped = StructureSet::new(
        planning_masks
            .structures
            .iter()
            .map(|(name, m)| Ok((name.clone(), crate::field::warp_mask(m, field)?)))
            .collect::<Result<Vec<_>>>()?,
    )?;
    score_structures(&warped, truth_masks)
}

/// Score every structure of `predicted` against the same-named structure of
/// `truth`. The two sets must contain exactly the same names.
pub fn score_structures(predicted: &StructureSet, truth: &StructureSet) -> Result<Vec<StructureScore>> {
    let mut p_names = predicted.names();
    let mut t_names = truth.names();
    p_names.sort_unstable();
    t_names.sort_unstable();
    if p_names != t_names {
        return Err(Error::Invalid(format!(
            "structure names differ: predicted {p_names:?} vs truth {t_names:?}"
        )));
    }
    let mut scores = Vec::with_capacity(predicted.len());
    for (name, pred_mask) in &predicted.structures {
        let truth_mask = truth.get(name).expect("names verified equal");
        let spacing = truth_mask.spacing();
        scores.push(StructureScore {
            name: name.clone(),
            dsc: dsc(pred_mask, truth_mask)?,
            hd95_mm: hd95(pred_mask, truth_mask, spacing)?,
        });
    }
    Ok(scores)
}

/// Aggregate structure scores, excluding undefined entries and reporting how
/// many were excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSummary {
    pub mean_dsc: Option<f64>,
    pub dsc_defined: usize,
    pub dsc_excluded: usize,
    pub mean_hd95_mm: Option<f64>,
    pub hd95_defined: usize,
    pub hd95_excluded: usize,
}

pub fn summarize(scores: &[StructureScore]) -> ScoreSummary {
    let dscs: Vec<f64> = scores.iter().filter_map(|s| s.dsc).collect();
    let hds: Vec<f64> = scores.iter().filter_map(|s| s.hd95_mm).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    ScoreSummary {
        mean_dsc: mean(&dscs),
        dsc_defined: dscs.len(),
        dsc_excluded: scores.len() - dscs.len(),
        mean_hd95_mm: mean(&hds),
        hd95_defined: hds.len(),
        hd95_excluded: scores.len() - hds.len(),
    }
}

/// One row of the scores CSV.
#[derive(Debug, Clone)]
pub struct SubjectScore {
    pub subject: String,
    pub score: StructureScore,
}

/// Write scores as `subject,structure,dsc,hd95_mm,flags` CSV. Undefined
/// values leave the cell empty and are named in the flags column (`-` when
/// everything is defined).
pub fn write_scores_csv(path: &Path, rows: &[SubjectScore]) -> Result<()> {
    let mut text = String::from("subject,structure,dsc,hd95_mm,flags\n");
    for r in rows {
        let mut flags: Vec<&str> = Vec::new();
        if r.score.dsc.is_none() {
            flags.push("dsc_undefined");
        }
        if r.score.hd95_mm.is_none() {
            flags.push("hd95_undefined");
        }
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.subject,
            r.score.name,
            cell(r.score.dsc),
            cell(r.score.hd95_mm),
            if flags.is_empty() { "-".to_string() } else { flags.join(";") }
        ));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: Dims, set: &[(usize, usize, usize)]) -> Volume {
        let mut data = vec![0.0f32; dims.len()];
        for &(x, y, z) in set {
            data[dims.idx(x, y, z)] = 1.0;
        }
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    fn rand_mask(rng: &mut ChaCha8Rng, dims: Dims, fill: f64) -> Volume {
        let data = (0..dims.len())
            .map(|_| if rng.gen_bool(fill) { 1.0 } else { 0.0 })
            .collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    /// All-pairs brute-force HD95 oracle with an independently written
    /// boundary extraction and directed-percentile computation.
    fn hd95_brute(x: &Volume, y: &Volume, spacing: [f32; 3]) -> Option<f64> {
        let dims = x.dims();
        let surface = |m: &Volume| -> Vec<[f64; 3]> {
            let mut pts = Vec::new();
            for z in 0..dims.nz {
                for y0 in 0..dims.ny {
                    for x0 in 0..dims.nx {
                        if m.at(x0, y0, z) == 0.0 {
                            continue;
                        }
                        let neighbors = [
                            (x0 as isize - 1, y0 as isize, z as isize),
                            (x0 as isize + 1, y0 as isize, z as isize),
                            (x0 as isize, y0 as isize - 1, z as isize),
                            (x0 as isize, y0 as isize + 1, z as isize),
                            (x0 as isize, y0 as isize, z as isize - 1),
                            (x0 as isize, y0 as isize, z as isize + 1),
                        ];
                        let on_surface = neighbors.iter().any(|&(a, b, c)| {
                            a < 0
                                || b < 0
                                || c < 0
                                || a >= dims.nx as isize
                                || b >= dims.ny as isize
                                || c >= dims.nz as isize
                                || m.at(a as usize, b as usize, c as usize) == 0.0
                        });
                        if on_surface {
                            pts.push([
                                x0 as f64 * spacing[0] as f64,
                                y0 as f64 * spacing[1] as f64,
                                z as f64 * spacing[2] as f64,
                            ]);
                        }
                    }
                }
            }
            pts
        };
        let sx = surface(x);
        let sy = surface(y);
        if sx.is_empty() || sy.is_empty() {
            return None;
        }
        let directed_p95 = |from: &[[f64; 3]], to: &[[f64; 3]]| {
            let mut ds: Vec<f64> = from
                .iter()
                .map(|p| {
                    to.iter()
                        .map(|q| {
                            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = (0.95 * ds.len() as f64).ceil() as usize;
            ds[rank.clamp(1, ds.len()) - 1]
        };
        Some(directed_p95(&sx, &sy).max(directed_p95(&sy, &sx)))
    }

    #[test]
    fn dsc_hand_cases() {
        let d = Dims::cube(4);
        let a = mask(d, &[(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)]);
        let b = mask(d, &[(2, 0, 0), (3, 0, 0), (0, 1, 0), (1, 1, 0)]);
        assert_eq!(dsc(&a, &a).unwrap(), Some(1.0));
        assert_eq!(dsc(&a, &b).unwrap(), Some(0.5));
        let disjoint = mask(d, &[(0, 3, 3)]);
        assert_eq!(dsc(&a, &disjoint).unwrap(), Some(0.0));
        let empty = mask(d, &[]);
        assert_eq!(dsc(&empty, &empty).unwrap(), None);
        assert_eq!(dsc(&empty, &a).unwrap(), Some(0.0));
    }

    #[test]
    fn dsc_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let d = Dims::cube(6);
        for _ in 0..20 {
            let a = rand_mask(&mut rng, d, 0.3);
            let b = rand_mask(&mut rng, d, 0.3);
            assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        }
    }

    #[test]
    fn masks_must_be_binary_and_congruent() {
        let d = Dims::cube(3);
        let a = mask(d, &[(0, 0, 0)]);
        let soft = Volume::new(d, [1.0; 3], vec![0.5; d.len()]).unwrap();
        assert_eq!(dsc(&a, &soft).unwrap_err().kind(), "invalid");
        let other = mask(Dims::cube(4), &[]);
        assert_eq!(dsc(&a, &other).unwrap_err().kind(), "dim_mismatch");
        assert_eq!(hd95(&a, &soft, [1.0; 3]).unwrap_err().kind(), "invalid");
    }

    #[test]
    fn hd95_identity_and_single_pair() {
        let d = Dims::new(6, 6, 3);
        let a = mask(d, &[(0, 0, 0)]);
        let b = mask(d, &[(3, 4, 0)]);
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), Some(5.0));
    }

    #[test]
    fn hd95_empty_mask_is_undefined() {
        let d = Dims::cube(4);
        let a = mask(d, &[(1, 1, 1)]);
        let empty = mask(d, &[]);
        assert_eq!(hd95(&a, &empty, [1.0; 3]).unwrap(), None);
        assert_eq!(hd95(&empty, &empty, [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn hd95_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let d = Dims::cube(8);
        for trial in 0..15 {
            let a = rand_mask(&mut rng, d, 0.25);
            let b = rand_mask(&mut rng, d, 0.25);
            let fast = hd95(&a, &b, [1.0; 3]).unwrap();
            let slow = hd95_brute(&a, &b, [1.0; 3]);
            match (fast, slow) {
                (Some(f), Some(s)) => assert!((f - s).abs() < 1e-6, "trial {trial}: {f} vs {s}"),
                (f, s) => assert_eq!(f, s, "trial {trial}"),
            }
        }
    }

    #[test]
    fn hd95_matches_brute_force_with_anisotropic_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let d = Dims::new(7, 6, 5);
        let spacing = [1.0, 1.5, 2.25];
        for trial in 0..10 {
            let a = rand_mask(&mut rng, d, 0.3);
            let b = rand_mask(&mut rng, d, 0.3);
            let fast = hd95(&a, &b, spacing).unwrap();
            let slow = hd95_brute(&a, &b, spacing);
            match (fast, slow) {
                (Some(f), Some(s)) => assert!((f - s).abs() < 1e-6, "trial {trial}: {f} vs {s}"),
                (f, s) => assert_eq!(f, s, "trial {trial}"),
            }
        }
    }

    #[test]
    fn hd95_is_bounded_by_the_full_hausdorff_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let d = Dims::cube(8);
        for _ in 0..10 {
            let a = rand_mask(&mut rng, d, 0.3);
            let b = rand_mask(&mut rng, d, 0.3);
            let (Some(h95), Some(sa), Some(sb)) = (
                hd95(&a, &b, [1.0; 3]).unwrap(),
                hd95_brute(&a, &b, [1.0; 3]),
                Some(0.0),
            ) else {
                continue;
            };
            let _ = (sa, sb);
            // Full Hausdorff: the directed maxima instead of p95.
            let full = {
                let d100 = |x: &Volume, y: &Volume| {
                    let bx = boundary_voxels(x);
                    let edt = squared_edt(d, &boundary_voxels(y), [1.0; 3]);
                    bx.iter().map(|&i| edt[i].sqrt()).fold(0.0f64, f64::max)
                };
                d100(&a, &b).max(d100(&b, &a))
            };
            assert!(h95 <= full + 1e-12, "{h95} > {full}");
        }
    }

    #[test]
    fn hd95_scales_linearly_with_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let d = Dims::cube(7);
        for _ in 0..10 {
            let a = rand_mask(&mut rng, d, 0.3);
            let b = rand_mask(&mut rng, d, 0.3);
            let Some(base) = hd95(&a, &b, [1.0; 3]).unwrap() else { continue };
            // Power-of-two factor: exact in floating point.
            let doubled = hd95(&a, &b, [2.0; 3]).unwrap().unwrap();
            assert_eq!(doubled, 2.0 * base);
            let s = 1.7f32;
            let scaled = hd95(&a, &b, [s; 3]).unwrap().unwrap();
            let expect = s as f64 * base;
            assert!((scaled - expect).abs() <= 1e-12 * expect.max(1.0), "{scaled} vs {expect}");
        }
    }

    fn set_of(dims: Dims, entries: &[(&str, &[(usize, usize, usize)])]) -> StructureSet {
        StructureSet::new(
            entries.iter().map(|(n, pts)| (n.to_string(), mask(dims, pts))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn score_structures_identity_and_toy_values() {
        let d = Dims::cube(6);
        let truth = set_of(
            d,
            &[
                ("organ_a", &[(1, 1, 1), (2, 1, 1), (1, 2, 1), (2, 2, 1)]),
                ("organ_b", &[(4, 4, 4)]),
            ],
        );
        let same = score_structures(&truth, &truth).unwrap();
        assert!(same.iter().all(|s| s.dsc == Some(1.0) && s.hd95_mm == Some(0.0)));

        // organ_a prediction overlaps half; organ_b prediction shifted by 3
        // along x.
        let pred = set_of(
            d,
            &[
                ("organ_a", &[(2, 1, 1), (2, 2, 1), (3, 1, 1), (3, 2, 1)]),
                ("organ_b", &[(1, 4, 4)]),
            ],
        );
        let scores = score_structures(&pred, &truth).unwrap();
        assert_eq!(scores[0].dsc, Some(0.5));
        assert_eq!(scores[1].dsc, Some(0.0));
        assert_eq!(scores[1].hd95_mm, Some(3.0));
        let oracle = hd95_brute(pred.get("organ_a").unwrap(), truth.get("organ_a").unwrap(), [1.0; 3]);
        assert_eq!(scores[0].hd95_mm, oracle);
    }

    #[test]
    fn empty_prediction_is_dsc_zero_hd95_undefined() {
        let d = Dims::cube(5);
        let truth = set_of(d, &[("target", &[(2, 2, 2), (3, 2, 2)])]);
        let pred = set_of(d, &[("target", &[])]);
        let scores = score_structures(&pred, &truth).unwrap();
        assert_eq!(scores[0].dsc, Some(0.0));
        assert_eq!(scores[0].hd95_mm, None);
    }

    #[test]
    fn mismatched_names_are_rejected() {
        let d = Dims::cube(4);
        let a = set_of(d, &[("left", &[(1, 1, 1)])]);
        let b = set_of(d, &[("right", &[(1, 1, 1)])]);
        assert_eq!(score_structures(&a, &b).unwrap_err().kind(), "invalid");
    }

    #[test]
    fn summary_excludes_undefined_scores_with_counts() {
        let scores = vec![
            StructureScore { name: "a".into(), dsc: Some(0.8), hd95_mm: Some(2.0) },
            StructureScore { name: "b".into(), dsc: Some(0.6), hd95_mm: None },
            StructureScore { name: "c".into(), dsc: None, hd95_mm: None },
        ];
        let s = summarize(&scores);
        assert_eq!(s.mean_dsc, Some(0.7));
        assert_eq!((s.dsc_defined, s.dsc_excluded), (2, 1));
        assert_eq!(s.mean_hd95_mm, Some(2.0));
        assert_eq!((s.hd95_defined, s.hd95_excluded), (1, 2));
        assert_eq!(summarize(&[]).mean_dsc, None);
    }

    #[test]
    fn scores_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let rows = vec![
            SubjectScore {
                subject: "s01".into(),
                score: StructureScore { name: "organ_a".into(), dsc: Some(0.75), hd95_mm: Some(1.5) },
            },
            SubjectScore {
                subject: "s01".into(),
                score: StructureScore { name: "organ_b".into(), dsc: Some(0.0), hd95_mm: None },
            },
        ];
        write_scores_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "subject,structure,dsc,hd95_mm,flags");
        assert_eq!(lines[1], "s01,organ_a,0.75,1.5,-");
        assert_eq!(lines[2], "s01,organ_b,0,,hd95_undefined");
    }

    #[test]
    fn median_and_mean_basics() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(mean(&[]), None);
        assert_eq!(mean(&[1.0, 2.0, 6.0]), Some(3.0));
    }

    #[test]
    fn registration_scores_zero_field_matches_direct_scoring() {
        let dims = Dims::cube(6);
        let a = mask(dims, &[(1, 1, 1), (2, 1, 1)]);
        let b = mask(dims, &[(2, 1, 1), (3, 1, 1), (3, 2, 1)]);
        let planning =
            StructureSet::new(vec![("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
        let truth = StructureSet::new(vec![("a".into(), a), ("b".into(), b)]).unwrap();
        let zero = crate::field::DisplacementField::zeros(dims);
        let scored = registration_scores(&planning, &truth, &zero).unwrap();
        assert_eq!(scored.len(), 2);
        for s in &scored {
            assert_eq!(s.dsc, Some(1.0));
            assert_eq!(s.hd95_mm, Some(0.0));
        }
    }
}
