//! Release acceptance checks for the registration engine.
//!
//! Each test prints one `acceptance N/10: PASS|FAIL - ...` verdict line
//! (visible with `--nocapture`) and then asserts it, so a failing gate is
//! both human-readable in the log and fatal to the suite. Checks 6-8 share
//! one desk-scale benchmark run behind a `OnceLock`; run this suite
//! single-threaded (the default on a one-core box) to keep timings honest.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttoreg::benchmark::{run_benchmark, BenchmarkConfig, BenchmarkReport};
use ttoreg::field::{self, DisplacementField};
use ttoreg::loss::{LossConfig, Similarity};
use ttoreg::metrics;
use ttoreg::network::{ArchitectureSpec, Network, Provenance};
use ttoreg::ops::{self, Tensor};
use ttoreg::optim::{check_convergence, ConvergenceRule, ConvergenceVerdict};
use ttoreg::volume::{load_volume, save_mask, save_volume, Dims, Volume};

fn verdict(number: usize, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {number}/10: {word} - {detail}");
    assert!(pass, "acceptance check {number} failed: {detail}");
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ttoreg-acceptance-{tag}-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clear stale temp dir");
    }
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}

// ---------------------------------------------------------------------------
// 1/10: analytic gradients vs central finite differences.
// ---------------------------------------------------------------------------

/// Relative error with an absolute-scale floor: below `FLOOR` the comparison
/// degrades to an absolute one, so finite-difference truncation noise on
/// near-zero entries of an O(1) tensor cannot dominate the verdict.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FLOOR)
}

const FD_EPS: f64 = 1e-3;

/// Max relative error between `analytic[i]` and the central finite difference
/// of `f` along each coordinate of `xs`.
fn fd_check(xs: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(xs.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..xs.len() {
        let saved = xs[i];
        xs[i] = saved + FD_EPS;
        let hi = f(xs);
        xs[i] = saved - FD_EPS;
        let lo = f(xs);
        xs[i] = saved;
        let fd = (hi - lo) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Displacement components with fractional parts well inside (0, 1): trilinear
/// interpolation is only piecewise-smooth, so finite differences are valid
/// only away from the integer lattice crossings.
fn rand_offsets(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..0.45);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn a01_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let dims = Dims::cube(6);
    let n = dims.len();
    let mut worst_of: Vec<(String, f64)> = Vec::new();

    // Convolution, strides 1 and 2: gradients w.r.t. input, weights, bias.
    for stride in [1usize, 2] {
        let (in_ch, out_ch) = (2usize, 3usize);
        let inp = rand_vec(&mut rng, in_ch * n, -1.0, 1.0);
        let w = rand_vec(&mut rng, out_ch * in_ch * ops::KERNEL_VOLUME, -0.5, 0.5);
        let b = rand_vec(&mut rng, out_ch, -0.5, 0.5);
        let odims = ops::conv_output_dims(dims, stride);
        let r = rand_vec(&mut rng, out_ch * odims.len(), -1.0, 1.0);
        let objective = |inp: &[f64], w: &[f64], b: &[f64]| {
            let t = Tensor::from_vec(in_ch, dims, inp.to_vec());
            let out = ops::conv3d_forward(&t, w, b, out_ch, stride);
            dot(&out.data, &r)
        };
        let t = Tensor::from_vec(in_ch, dims, inp.clone());
        let dout = Tensor::from_vec(out_ch, odims, r.clone());
        let (dinp, dw, db) = ops::conv3d_backward(&t, &w, &dout, stride, true);
        let mut xs = inp.clone();
        let e_inp = fd_check(&mut xs, &dinp.unwrap().data, |xs| objective(xs, &w, &b));
        let mut ws = w.clone();
        let e_w = fd_check(&mut ws, &dw, |ws| objective(&inp, ws, &b));
        let mut bs = b.clone();
        let e_b = fd_check(&mut bs, &db, |bs| objective(&inp, &w, bs));
        worst_of.push((format!("conv3d[s{stride}]"), e_inp.max(e_w).max(e_b)));
    }

    // LeakyReLU: inputs kept away from the kink at zero, where the true
    // derivative jumps and a finite difference is meaningless.
    {
        let slope = 0.2f64;
        let x: Vec<f64> = (0..2 * n)
            .map(|_| {
                let mag = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let r = rand_vec(&mut rng, 2 * n, -1.0, 1.0);
        let objective = |x: &[f64]| {
            let mut t = Tensor::from_vec(2, dims, x.to_vec());
            ops::leaky_relu_forward(&mut t, slope);
            dot(&t.data, &r)
        };
        let mut out = Tensor::from_vec(2, dims, x.clone());
        ops::leaky_relu_forward(&mut out, slope);
        let mut dout = Tensor::from_vec(2, dims, r.clone());
        ops::leaky_relu_backward(&out, &mut dout, slope);
        let mut xs = x.clone();
        worst_of.push(("leaky_relu".into(), fd_check(&mut xs, &dout.data, objective)));
    }

    // Trilinear warp: gradients w.r.t. the source image and the field.
    {
        let src = rand_vec(&mut rng, n, -1.0, 1.0);
        let u = rand_offsets(&mut rng, 3 * n);
        let r = rand_vec(&mut rng, n, -1.0, 1.0);
        let objective = |src: &[f64], u: &[f64]| {
            let s = Tensor::from_vec(1, dims, src.to_vec());
            let f = Tensor::from_vec(3, dims, u.to_vec());
            dot(&ops::warp_forward(&s, &f).data, &r)
        };
        let s = Tensor::from_vec(1, dims, src.clone());
        let f = Tensor::from_vec(3, dims, u.clone());
        let dout = Tensor::from_vec(1, dims, r.clone());
        let (dsrc, du) = ops::warp_backward(&s, &f, &dout);
        let mut xs = src.clone();
        let e_src = fd_check(&mut xs, &dsrc.data, |xs| objective(xs, &u));
        let mut us = u.clone();
        let e_u = fd_check(&mut us, &du.data, |us| objective(&src, us));
        worst_of.push(("warp".into(), e_src.max(e_u)));
    }

    // Field composition: gradients w.r.t. both fields.
    {
        let u1 = rand_offsets(&mut rng, 3 * n);
        let u2 = rand_offsets(&mut rng, 3 * n);
        let r = rand_vec(&mut rng, 3 * n, -1.0, 1.0);
        let objective = |u1: &[f64], u2: &[f64]| {
            let a = Tensor::from_vec(3, dims, u1.to_vec());
            let b = Tensor::from_vec(3, dims, u2.to_vec());
            dot(&ops::compose_forward(&a, &b).data, &r)
        };
        let a = Tensor::from_vec(3, dims, u1.clone());
        let b = Tensor::from_vec(3, dims, u2.clone());
        let dout = Tensor::from_vec(3, dims, r.clone());
        let (du1, du2) = ops::compose_backward(&a, &b, &dout);
        let mut xs = u1.clone();
        let e1 = fd_check(&mut xs, &du1.data, |xs| objective(xs, &u2));
        let mut ys = u2.clone();
        let e2 = fd_check(&mut ys, &du2.data, |ys| objective(&u1, ys));
        worst_of.push(("compose".into(), e1.max(e2)));
    }

    // Trilinear 2x upsampling.
    {
        let small = Dims::cube(3);
        let x = rand_vec(&mut rng, 3 * small.len(), -1.0, 1.0);
        let r = rand_vec(&mut rng, 3 * n, -1.0, 1.0);
        let objective = |x: &[f64]| {
            let t = Tensor::from_vec(3, small, x.to_vec());
            dot(&ops::upsample2x_forward(&t, dims).data, &r)
        };
        let dout = Tensor::from_vec(3, dims, r.clone());
        let dinp = ops::upsample2x_backward(&dout, small);
        let mut xs = x.clone();
        worst_of.push(("upsample2x".into(), fd_check(&mut xs, &dinp.data, objective)));
    }

    // MSE.
    {
        let a = rand_vec(&mut rng, n, -1.0, 1.0);
        let b = rand_vec(&mut rng, n, -1.0, 1.0);
        let tb = Tensor::from_vec(1, dims, b.clone());
        let objective = |a: &[f64]| {
            let ta = Tensor::from_vec(1, dims, a.to_vec());
            ops::mse_forward(&ta, &tb)
        };
        let ta = Tensor::from_vec(1, dims, a.clone());
        let da = ops::mse_backward(&ta, &tb, 1.0);
        let mut xs = a.clone();
        worst_of.push(("mse".into(), fd_check(&mut xs, &da.data, objective)));
    }

    // Local NCC, window 3. Uniform inputs keep every window's variance far
    // above the stabilizing floor, so no window sits on the floor's kink.
    {
        let a = rand_vec(&mut rng, n, 0.2, 1.2);
        let b = rand_vec(&mut rng, n, 0.2, 1.2);
        let tb = Tensor::from_vec(1, dims, b.clone());
        let objective = |a: &[f64]| {
            let ta = Tensor::from_vec(1, dims, a.to_vec());
            ops::ncc_forward(&ta, &tb, 3)
        };
        let ta = Tensor::from_vec(1, dims, a.clone());
        let da = ops::ncc_backward(&ta, &tb, 3, 1.0);
        let mut xs = a.clone();
        worst_of.push(("ncc".into(), fd_check(&mut xs, &da.data, objective)));
    }

    // Smoothness regularizer.
    {
        let u = rand_vec(&mut rng, 3 * n, -1.0, 1.0);
        let objective = |u: &[f64]| {
            let t = Tensor::from_vec(3, dims, u.to_vec());
            ops::smoothness_forward(&t)
        };
        let t = Tensor::from_vec(3, dims, u.clone());
        let du = ops::smoothness_backward(&t, 1.0);
        let mut xs = u.clone();
        worst_of.push(("smoothness".into(), fd_check(&mut xs, &du.data, objective)));
    }

    // End to end: a two-layer network (one hidden convolution plus the field
    // head) against finite differences over every parameter, under both
    // similarity measures. The chain is only piecewise-smooth: LeakyReLU has
    // a kink at zero pre-activation and the warp has kinks wherever a
    // displacement crosses the integer lattice, and central differences are
    // meaningless across a kink. The parameters are therefore arranged to
    // hold the whole chain inside one smooth piece while still exercising
    // every term: hidden biases split the channels into strongly positive
    // and strongly negative (both LeakyReLU branches active, no
    // pre-activation near zero), small weights bound the data-dependent
    // variation, and the head biases park each displacement near a quarter
    // voxel.
    for (tag, sim) in [("toy-mse", Similarity::Mse), ("toy-ncc", Similarity::Ncc)] {
        let dims6 = Dims::cube(6);
        let spacing = [1.0f32; 3];
        let mut prng = ChaCha8Rng::seed_from_u64(777);
        let moving = Volume::new(
            dims6,
            spacing,
            (0..dims6.len()).map(|_| prng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let fixed = Volume::new(
            dims6,
            spacing,
            (0..dims6.len()).map(|_| prng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let cfg = LossConfig { similarity: sim, ncc_window: 3, lambda: 0.05 };
        let arch = ArchitectureSpec::custom_chain(vec![4], 1);
        let mut net = Network::<f64>::init(arch, 9).unwrap();
        let (in_ch, hidden, out_ch) = (2usize, 4usize, 3usize);
        let w1 = in_ch * hidden * ops::KERNEL_VOLUME;
        let w2 = hidden * out_ch * ops::KERNEL_VOLUME;
        let n_params = net.params().len();
        assert_eq!(n_params, w1 + hidden + w2 + out_ch);
        let mut params: Vec<f64> = (0..n_params).map(|_| prng.gen_range(-0.06..0.06)).collect();
        for (c, b) in params[w1..w1 + hidden].iter_mut().enumerate() {
            *b = if c % 2 == 0 { 1.0 } else { -1.0 };
        }
        for p in &mut params[w1 + hidden..w1 + hidden + w2] {
            *p *= 0.1;
        }
        params[n_params - 3..].copy_from_slice(&[0.23, 0.27, 0.31]);
        net.set_params(&params);
        let u = net.forward(&moving, &fixed).unwrap();
        let frac_margin = u
            .data()
            .iter()
            .map(|c| {
                let f = (c - c.floor()) as f64;
                f.min(1.0 - f)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            frac_margin > 20.0 * FD_EPS,
            "toy net field sits too close to a lattice kink (margin {frac_margin}); pick another seed"
        );
        let (_, grads) = net.loss_and_gradients(&moving, &fixed, &cfg).unwrap();
        let mut xs = params.clone();
        let err = fd_check(&mut xs, &grads, |xs| {
            let mut probe = net.clone();
            probe.set_params(xs);
            probe.loss_and_gradients(&moving, &fixed, &cfg).unwrap().0
        });
        worst_of.push((tag.into(), err));
    }

    let max_err = worst_of.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    let elapsed = started.elapsed().as_secs_f64();
    let detail = format!(
        "max relative gradient error {max_err:.2e} over {} checks (per-op worst: {}), {elapsed:.1}s",
        worst_of.len(),
        worst_of
            .iter()
            .map(|(k, e)| format!("{k} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    verdict(1, max_err < 1e-3 && elapsed < 60.0, &detail);
}

// ---------------------------------------------------------------------------
// 2/10: warping identities.
// ---------------------------------------------------------------------------

fn constant_field(dims: Dims, d: [f32; 3]) -> DisplacementField {
    let mut data = Vec::with_capacity(3 * dims.len());
    for _ in 0..dims.len() {
        data.extend_from_slice(&d);
    }
    DisplacementField::from_interleaved(dims, data).unwrap()
}

#[test]
fn a02_warp_identities() {
    let dims = Dims::new(7, 6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let data: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let v = Volume::new(dims, [1.0, 1.0, 1.0], data).unwrap();

    // Zero field: bit-exact identity.
    let zero = DisplacementField::zeros(dims);
    let warped = field::warp_volume(&v, &zero).unwrap();
    let zero_ok = warped.data() == v.data();

    // Integer shifts: every voxel must equal the clamped index lookup.
    let mut shift_ok = true;
    for d in [[1.0f32, 0.0, 0.0], [0.0, -2.0, 0.0], [0.0, 0.0, 3.0], [2.0, -1.0, 1.0], [-6.0, 5.0, -4.0]] {
        let w = field::warp_volume(&v, &constant_field(dims, d)).unwrap();
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let cx = (x as isize + d[0] as isize).clamp(0, dims.nx as isize - 1) as usize;
                    let cy = (y as isize + d[1] as isize).clamp(0, dims.ny as isize - 1) as usize;
                    let cz = (z as isize + d[2] as isize).clamp(0, dims.nz as isize - 1) as usize;
                    if w.at(x, y, z) != v.at(cx, cy, cz) {
                        shift_ok = false;
                    }
                }
            }
        }
    }

    // Half-voxel shift of a linear ramp: trilinear interpolation reproduces
    // the ramp exactly (up to f32 rounding); samples past the last voxel
    // clamp to the edge value.
    let mut ramp_ok = true;
    let mut ramp_worst = 0.0f32;
    for axis in 0..3 {
        let slope = 0.25f32;
        let coord = |x: usize, y: usize, z: usize| [x, y, z][axis] as f32;
        let ramp_data: Vec<f32> = (0..dims.nz)
            .flat_map(|z| {
                (0..dims.ny).flat_map(move |y| (0..dims.nx).map(move |x| slope * coord(x, y, z)))
            })
            .collect();
        let ramp = Volume::new(dims, [1.0, 1.0, 1.0], ramp_data).unwrap();
        for sign in [0.5f32, -0.5] {
            let mut d = [0.0f32; 3];
            d[axis] = sign;
            let w = field::warp_volume(&ramp, &constant_field(dims, d)).unwrap();
            let limit = [dims.nx, dims.ny, dims.nz][axis] as f32 - 1.0;
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x in 0..dims.nx {
                        let pos = (coord(x, y, z) + sign).clamp(0.0, limit);
                        let expect = slope * pos;
                        let err = (w.at(x, y, z) - expect).abs();
                        ramp_worst = ramp_worst.max(err);
                        if err > 1e-6 {
                            ramp_ok = false;
                        }
                    }
                }
            }
        }
    }

    verdict(
        2,
        zero_ok && shift_ok && ramp_ok,
        &format!(
            "zero-field bit-exact: {zero_ok}; integer shifts match index oracle: {shift_ok}; \
             half-voxel ramp max abs err {ramp_worst:.1e} (tolerance 1e-6)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3/10: overlap and surface metrics vs brute force.
// ---------------------------------------------------------------------------

fn brute_dsc(a: &Volume, b: &Volume) -> Option<f64> {
    let inter = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| **x != 0.0 && **y != 0.0)
        .count();
    let na = a.data().iter().filter(|x| **x != 0.0).count();
    let nb = b.data().iter().filter(|x| **x != 0.0).count();
    if na + nb == 0 {
        return None;
    }
    Some(2.0 * inter as f64 / (na + nb) as f64)
}

/// Boundary voxels: set voxels with an unset 6-neighbor, the border counting
/// as unset. Returned as physical coordinates in mm.
fn brute_boundary(m: &Volume, spacing: [f32; 3]) -> Vec<[f64; 3]> {
    let d = m.dims();
    let mut pts = Vec::new();
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                if m.at(x, y, z) == 0.0 {
                    continue;
                }
                let unset = |xx: isize, yy: isize, zz: isize| {
                    xx < 0
                        || yy < 0
                        || zz < 0
                        || xx >= d.nx as isize
                        || yy >= d.ny as isize
                        || zz >= d.nz as isize
                        || m.at(xx as usize, yy as usize, zz as usize) == 0.0
                };
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                if unset(xi - 1, yi, zi)
                    || unset(xi + 1, yi, zi)
                    || unset(xi, yi - 1, zi)
                    || unset(xi, yi + 1, zi)
                    || unset(xi, yi, zi - 1)
                    || unset(xi, yi, zi + 1)
                {
                    pts.push([
                        x as f64 * spacing[0] as f64,
                        y as f64 * spacing[1] as f64,
                        z as f64 * spacing[2] as f64,
                    ]);
                }
            }
        }
    }
    pts
}

/// All-pairs 95th-percentile symmetric boundary distance (nearest-rank).
fn brute_hd95(a: &Volume, b: &Volume, spacing: [f32; 3]) -> Option<f64> {
    let pa = brute_boundary(a, spacing);
    let pb = brute_boundary(b, spacing);
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let mut dists: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let dx = p[0] - q[0];
                        let dy = p[1] - q[1];
                        let dz = p[2] - q[2];
                        (dx * dx + dy * dy + dz * dz).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = (0.95 * dists.len() as f64).ceil() as usize;
        dists[rank.clamp(1, dists.len()) - 1]
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, spacing: [f32; 3], fill: f64) -> Volume {
    let data: Vec<f32> = (0..dims.len()).map(|_| if rng.gen_bool(fill) { 1.0 } else { 0.0 }).collect();
    Volume::new(dims, spacing, data).unwrap()
}

#[test]
fn a03_overlap_and_surface_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dims = Dims::cube(8);
    let mut worst_hd = 0.0f64;
    let mut dsc_exact = true;
    let mut none_agree = true;
    for pair in 0..50 {
        let spacing = [
            rng.gen_range(0.5..2.5) as f32,
            rng.gen_range(0.5..2.5) as f32,
            rng.gen_range(0.5..2.5) as f32,
        ];
        // Sparse pairs occasionally produce an empty mask, exercising the
        // None conventions; denser ones exercise the typical path.
        let fill = if pair % 10 == 9 { 0.02 } else { rng.gen_range(0.15..0.5) };
        let a = random_mask(&mut rng, dims, spacing, fill);
        let b = random_mask(&mut rng, dims, spacing, fill);
        let got_dsc = metrics::dsc(&a, &b).unwrap();
        if got_dsc != brute_dsc(&a, &b) {
            dsc_exact = false;
        }
        let got_hd = metrics::hd95(&a, &b, spacing).unwrap();
        match (got_hd, brute_hd95(&a, &b, spacing)) {
            (Some(x), Some(y)) => worst_hd = worst_hd.max((x - y).abs()),
            (None, None) => {}
            _ => none_agree = false,
        }
    }

    // Self-identities on a nonempty mask.
    let m = random_mask(&mut rng, dims, [1.0, 1.0, 1.0], 0.4);
    assert!(m.count_set() > 0);
    let self_ok = metrics::dsc(&m, &m).unwrap() == Some(1.0)
        && metrics::hd95(&m, &m, [1.0, 1.0, 1.0]).unwrap() == Some(0.0);

    // Distances scale linearly with spacing (checked per axis via two
    // spacings differing by a single factor, and globally).
    let a = random_mask(&mut rng, dims, [1.0, 1.0, 1.0], 0.3);
    let b = random_mask(&mut rng, dims, [1.0, 1.0, 1.0], 0.3);
    let base = metrics::hd95(&a, &b, [1.0, 1.0, 1.0]).unwrap().unwrap();
    let tripled = metrics::hd95(&a, &b, [3.0, 3.0, 3.0]).unwrap().unwrap();
    let halved = metrics::hd95(&a, &b, [0.5, 0.5, 0.5]).unwrap().unwrap();
    let linear_ok = (tripled - 3.0 * base).abs() < 1e-9 && (halved - 0.5 * base).abs() < 1e-9;
    // Anisotropic hand case: two voxels two apart along z, spacing 3 mm.
    let mut da = vec![0.0f32; dims.len()];
    let mut db = vec![0.0f32; dims.len()];
    da[dims.idx(4, 4, 2)] = 1.0;
    db[dims.idx(4, 4, 4)] = 1.0;
    let va = Volume::new(dims, [1.0, 1.0, 3.0], da).unwrap();
    let vb = Volume::new(dims, [1.0, 1.0, 3.0], db).unwrap();
    let aniso = metrics::hd95(&va, &vb, [1.0, 1.0, 3.0]).unwrap().unwrap();
    let aniso_ok = (aniso - 6.0).abs() < 1e-9;

    verdict(
        3,
        dsc_exact && none_agree && worst_hd < 1e-6 && self_ok && linear_ok && aniso_ok,
        &format!(
            "dsc exact on 50 pairs: {dsc_exact}; hd95 max abs diff {worst_hd:.1e} \
             (tolerance 1e-6, empty-mask agreement {none_agree}); self-identity {self_ok}; \
             spacing linearity {linear_ok}; anisotropic case {aniso_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4/10: plateau stopping rule worked examples.
// ---------------------------------------------------------------------------

#[test]
fn a04_plateau_rule_worked_examples() {
    let defaults = ConvergenceRule::warm(); // min_delta 0.005, patience 50, cap 500

    // Strictly decreasing by 0.01 per step: every step is a real improvement,
    // so the run never converges (and 200 < 500 leaves it uncapped).
    let decreasing: Vec<f64> = (0..200).map(|i| 1.0 - 0.01 * i as f64).collect();
    let v1 = check_convergence(&decreasing, &defaults);
    let ex1 = v1 == ConvergenceVerdict { converged: false, capped: false, stop_iteration: 200 };

    // A 0.001 drop then flat: 50 consecutive sub-threshold changes converge
    // at the 50th plateau entry (trace position 51).
    let mut plateau = vec![1.0f64];
    plateau.extend(std::iter::repeat(0.999).take(50));
    let v2 = check_convergence(&plateau, &defaults);
    let ex2 = v2 == ConvergenceVerdict { converged: true, capped: false, stop_iteration: 51 };

    // Patience 1: a single no-decrease entry converges immediately.
    let one = ConvergenceRule { patience: 1, ..defaults };
    let v3 = check_convergence(&[1.0, 1.0], &one);
    let ex3 = v3 == ConvergenceVerdict { converged: true, capped: false, stop_iteration: 2 };

    verdict(
        4,
        ex1 && ex2 && ex3,
        &format!(
            "strict-decrease {:?}; plateau {:?}; patience-1 {:?}",
            (v1.converged, v1.capped, v1.stop_iteration),
            (v2.converged, v2.capped, v2.stop_iteration),
            (v3.converged, v3.capped, v3.stop_iteration)
        ),
    );
}

// ---------------------------------------------------------------------------
// 5/10: end-to-end determinism through the binary.
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ttoreg"))
        .args(args)
        .output()
        .expect("spawn ttoreg");
    assert!(
        out.status.success(),
        "ttoreg {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Compare two files byte for byte.
fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

/// Compare two CSV files, masking the named columns (wall-clock readings are
/// genuinely nondeterministic; everything else must match byte for byte).
fn same_csv_masking(a: &Path, b: &Path, masked: &[&str]) -> bool {
    let read = |p: &Path| -> Vec<Vec<String>> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    };
    let (ra, rb) = (read(a), read(b));
    if ra.len() != rb.len() || ra.is_empty() || ra[0] != rb[0] {
        return false;
    }
    let mask: Vec<usize> =
        ra[0].iter().enumerate().filter(|(_, h)| masked.contains(&h.as_str())).map(|(i, _)| i).collect();
    ra.iter().zip(&rb).all(|(la, lb)| {
        la.len() == lb.len()
            && la.iter().zip(lb).enumerate().all(|(i, (x, y))| mask.contains(&i) || x == y)
    })
}

/// Compare two JSON files after zeroing the named top-level numeric fields.
fn same_json_masking(a: &Path, b: &Path, masked: &[&str]) -> bool {
    let read = |p: &Path| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        if let Some(obj) = v.as_object_mut() {
            for k in masked {
                obj.remove(*k);
            }
        }
        v
    };
    read(a) == read(b)
}

#[test]
fn a05_pipeline_is_deterministic_end_to_end() {
    let started = Instant::now();
    let root = temp_dir("determinism");
    let cfg_path = root.join("config.toml");
    // Stock configuration (32^3 grid, 40 training / 8 test subjects); only
    // the output location varies between the two passes.
    std::fs::write(&cfg_path, "").unwrap();

    for pass in ["pass1", "pass2"] {
        let out = root.join(pass);
        let cfg = cfg_path.to_str().unwrap();
        let out_s = out.to_str().unwrap();
        run_cli(&["synth", "--config", cfg, "--out", out_s, "--seed", "42"]);
        run_cli(&["train", "--config", cfg, "--out", out_s, "--seed", "42"]);
        let start = out.join("train/checkpoint.json");
        run_cli(&[
            "tto",
            "--config",
            cfg,
            "--out",
            out_s,
            "--seed",
            "42",
            "--mode",
            "inter",
            "--start",
            start.to_str().unwrap(),
        ]);
    }

    let p1 = root.join("pass1");
    let p2 = root.join("pass2");
    let mut mismatches: Vec<String> = Vec::new();
    let mut byte_pairs: Vec<PathBuf> = vec![
        PathBuf::from("train/checkpoint.json"),
        PathBuf::from("train/checkpoint.raw"),
    ];
    // One spot-check of the generated cohort (full trees are compared via
    // the artifacts derived from them).
    byte_pairs.push(PathBuf::from("cohort/cohort.json"));

    let runs = p1.join("tto_inter");
    for entry in std::fs::read_dir(&runs).unwrap() {
        let subject = entry.unwrap();
        if !subject.file_type().unwrap().is_dir() {
            continue;
        }
        let rel = PathBuf::from("tto_inter").join(subject.file_name()).join("f1");
        for name in ["checkpoint.json", "checkpoint.raw", "final_field.json", "final_field.raw"] {
            byte_pairs.push(rel.join(name));
        }
        if !same_csv_masking(&p1.join(&rel).join("trace.csv"), &p2.join(&rel).join("trace.csv"), &["wall_ms"]) {
            mismatches.push(format!("{}/trace.csv", rel.display()));
        }
        if !same_json_masking(&p1.join(&rel).join("run.json"), &p2.join(&rel).join("run.json"), &["wall_ms"]) {
            mismatches.push(format!("{}/run.json", rel.display()));
        }
    }
    for rel in &byte_pairs {
        if !same_bytes(&p1.join(rel), &p2.join(rel)) {
            mismatches.push(rel.display().to_string());
        }
    }
    if !same_csv_masking(&p1.join("train/epochs.csv"), &p2.join("train/epochs.csv"), &["wall_ms"]) {
        mismatches.push("train/epochs.csv".into());
    }
    if !same_csv_masking(&p1.join("tto_inter/summary.csv"), &p2.join("tto_inter/summary.csv"), &["wall_ms"]) {
        mismatches.push("tto_inter/summary.csv".into());
    }

    let elapsed = started.elapsed().as_secs_f64();
    let compared = byte_pairs.len() + 2 + 2 * std::fs::read_dir(&runs).unwrap().count();
    verdict(
        5,
        mismatches.is_empty() && elapsed < 600.0,
        &format!(
            "two full synth+train+tto passes: {} artifacts compared, mismatches: {:?}, {elapsed:.0}s (budget 600s)",
            compared,
            mismatches
        ),
    );
    std::fs::remove_dir_all(&root).ok();
}

// ---------------------------------------------------------------------------
// 6-8/10: desk benchmark (shared run).
// ---------------------------------------------------------------------------

struct SharedBench {
    report: BenchmarkReport,
    wall_s: f64,
    _dir: PathBuf,
}

fn desk_benchmark() -> &'static SharedBench {
    static BENCH: OnceLock<SharedBench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = temp_dir("benchmark");
        let cfg = BenchmarkConfig::desk(42, dir.clone(), 1);
        let started = Instant::now();
        let report = run_benchmark(&cfg).expect("benchmark run");
        SharedBench { report, wall_s: started.elapsed().as_secs_f64(), _dir: dir }
    })
}

fn assertion(report: &BenchmarkReport, id: &str) -> (bool, String) {
    match report.assertions.iter().find(|a| a.id == id) {
        Some(a) => (a.pass, format!("{id}: measured {:.4} {} {:.4}", a.measured, a.cmp, a.threshold)),
        None => (false, format!("{id}: missing from report")),
    }
}

#[test]
fn a06_benchmark_individualization_improves_dsc() {
    let bench = desk_benchmark();
    let mut pass = bench.wall_s < 1800.0;
    let mut parts: Vec<String> = Vec::new();
    for arch in &bench.report.experiment_1 {
        let (p, _) = assertion(&bench.report, &format!("exp1_direction_{}", arch.arch));
        pass &= p;
        parts.push(format!(
            "{}: pop {:.4} -> ind {:.4} (delta {:+.4})",
            arch.arch, arch.population_dsc, arch.individualized_dsc, arch.delta_dsc
        ));
    }
    let primary = &bench.report.experiment_2.arch;
    let (ood_pass, ood_detail) = assertion(&bench.report, &format!("exp1_ood_gain_{primary}"));
    pass &= ood_pass;
    verdict(
        6,
        pass,
        &format!(
            "{}; OOD {}; benchmark wall {:.0}s (budget 1800s)",
            parts.join("; "),
            ood_detail,
            bench.wall_s
        ),
    );
}

#[test]
fn a07_benchmark_warm_start_saves_iterations() {
    let bench = desk_benchmark();
    let e2 = &bench.report.experiment_2;
    let (ratio_pass, ratio_detail) = assertion(&bench.report, "exp2_iteration_ratio");
    let (conv_pass, conv_detail) = assertion(&bench.report, "exp2_inter_all_converged");
    verdict(
        7,
        ratio_pass && conv_pass,
        &format!(
            "median iterations scratch {:.0} vs warm-start {:.0} ({ratio_detail}); {conv_detail}",
            e2.median_scratch_iterations, e2.median_inter_iterations
        ),
    );
}

#[test]
fn a08_benchmark_fraction_chaining_holds_quality() {
    let bench = desk_benchmark();
    let e3 = &bench.report.experiment_3;
    let (iter_pass, iter_detail) = assertion(&bench.report, "exp3_iteration_direction");
    let (dsc_pass, dsc_detail) = assertion(&bench.report, "exp3_dsc_no_degradation");
    verdict(
        8,
        iter_pass && dsc_pass,
        &format!(
            "median iterations intra {:.0} vs inter {:.0} ({iter_detail}); \
             mean DSC before {:.4} -> after {:.4} ({dsc_detail})",
            e3.median_intra_iterations, e3.median_inter_iterations, e3.mean_dsc_before, e3.mean_dsc_after
        ),
    );
}

// ---------------------------------------------------------------------------
// 9/10: cascade consistency.
// ---------------------------------------------------------------------------

#[test]
fn a09_cascade_reduction_and_composition() {
    // A cascade whose extra stage predicts an all-zero field must reproduce
    // the single-stage output bit for bit: composing with a zero field and
    // warping by a zero field are exact identities, so any deviation would
    // come from the cascade plumbing itself.
    let dims = Dims::cube(8);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let spacing = [1.0f32; 3];
    let moving = Volume::new(dims, spacing, (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let fixed = Volume::new(dims, spacing, (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();

    let one = Network::<f32>::init(ArchitectureSpec::custom_chain(vec![6, 4], 1), 5).unwrap();
    let mut two = Network::<f32>::init(ArchitectureSpec::custom_chain(vec![6, 4], 2), 5).unwrap();
    let stage = one.params().len();
    assert_eq!(two.params().len(), 2 * stage);
    let mut params = vec![0.0f32; 2 * stage];
    params[..stage].copy_from_slice(one.params());
    two.set_params(&params);

    let u_one = one.forward(&moving, &fixed).unwrap();
    let u_two = two.forward(&moving, &fixed).unwrap();
    let cascade_ok = u_one.data() == u_two.data();

    // Warping by compose(u1, u2) versus warping twice. The identity holds up
    // to interpolation error, which scales with image-gradient times
    // field-curvature; a gently sloped image and long-wavelength fields keep
    // that error far below the 1e-4 contract, so any structural mistake in
    // the composition (wrong order, wrong units, missing inner offset) shows
    // up orders of magnitude above the tolerance.
    let cdims = Dims::cube(16);
    let gentle: Vec<f32> = (0..cdims.nz)
        .flat_map(|z| {
            (0..cdims.ny).flat_map(move |y| {
                (0..cdims.nx).map(move |x| {
                    0.3 + 0.020 * x as f32 + 0.016 * y as f32 + 0.024 * z as f32
                        + 5e-4 * (x * y) as f32
                        - 4e-4 * (y * z) as f32
                })
            })
        })
        .collect();
    let canvas = Volume::new(cdims, spacing, gentle).unwrap();
    let mut worst = 0.0f32;
    for trial in 0..3 {
        let u1 = smooth_field(cdims, 910 + trial, 0.06);
        let u2 = smooth_field(cdims, 920 + trial, 0.06);
        let w_seq = field::warp_volume(&field::warp_volume(&canvas, &u1).unwrap(), &u2).unwrap();
        let w_comp = field::warp_volume(&canvas, &field::compose(&u1, &u2).unwrap()).unwrap();
        for (a, b) in w_seq.data().iter().zip(w_comp.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let compose_ok = worst < 1e-4;

    verdict(
        9,
        cascade_ok && compose_ok,
        &format!(
            "zero-padded two-stage cascade bit-identical to one stage: {cascade_ok}; \
             compose-vs-sequential warp max abs diff {worst:.1e} (tolerance 1e-4)"
        ),
    );
}

/// Smooth random displacement field: one long-wavelength sinusoid per
/// component with random amplitude and phase, smoothly tapered (C¹
/// smoothstep over a five-voxel margin) to zero at the volume border so
/// composition and sequential warping never sample the clamp region.
fn smooth_field(dims: Dims, seed: u64, amplitude: f32) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::new();
    for _ in 0..3 {
        waves.push((
            rng.gen_range(0.5..1.0) as f32,
            rng.gen_range(0.0..std::f32::consts::TAU) as f32,
            rng.gen_range(0.02..0.04) as f32,
        ));
    }
    let mut data = Vec::with_capacity(3 * dims.len());
    let taper = |t: usize, n: usize| {
        let edge = t.min(n - 1 - t) as f32;
        let s = (edge / 5.0).min(1.0);
        s * s * (3.0 - 2.0 * s)
    };
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let t = taper(x, dims.nx) * taper(y, dims.ny) * taper(z, dims.nz);
                for (c, &(a, phase, freq)) in waves.iter().enumerate() {
                    let s = [x, y, z][(c + 1) % 3] as f32;
                    data.push(amplitude * a * t * (freq * s * std::f32::consts::TAU + phase).sin());
                }
            }
        }
    }
    DisplacementField::from_interleaved(dims, data).unwrap()
}

// ---------------------------------------------------------------------------
// 10/10: persistence round-trips and corruption rejection.
// ---------------------------------------------------------------------------

#[test]
fn a10_persistence_roundtrips_and_corruption_detection() {
    let root = temp_dir("persistence");
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dims = Dims::new(6, 5, 4);
    let spacing = [0.8f32, 1.0, 2.5];

    // Volume.
    let v = Volume::new(dims, spacing, (0..dims.len()).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let vp = root.join("volume.json");
    save_volume(&v, &vp).unwrap();
    let v2 = load_volume(&vp).unwrap();
    let vol_ok = v2.data() == v.data() && v2.dims() == dims && v2.spacing() == spacing;

    // Mask.
    let m = random_mask(&mut rng, dims, spacing, 0.3);
    let mp = root.join("mask.json");
    save_mask(&m, &mp).unwrap();
    let m2 = load_volume(&mp).unwrap();
    let mask_ok = m2.data() == m.data() && m2.is_binary();

    // Field (with spacing sidecar).
    let u = smooth_field(dims, 7, 0.9);
    let up = root.join("field.json");
    field::save_field(&u, spacing, &up).unwrap();
    let (u2, sp2) = field::load_field(&up).unwrap();
    let field_ok = u2.data() == u.data() && sp2 == spacing;

    // Checkpoint.
    let mut net = Network::<f32>::init(ArchitectureSpec::encoder_decoder(2), 99).unwrap();
    net.set_provenance(Provenance::Individualized);
    let cp = root.join("checkpoint.json");
    net.save(&cp).unwrap();
    let net2 = Network::<f32>::load(&cp).unwrap();
    let ckpt_ok = net2.params() == net.params()
        && net2.arch() == net.arch()
        && net2.seed() == net.seed()
        && net2.provenance() == net.provenance();

    // Corrupted payloads must be rejected with a diagnostic, not read
    // through. Truncation changes the length; the loaders must notice.
    let mut rejections = Vec::new();
    for (json_path, label) in [(&vp, "volume"), (&up, "field"), (&cp, "checkpoint")] {
        let raw_path = json_path.with_extension("raw");
        let bytes = std::fs::read(&raw_path).unwrap();
        std::fs::write(&raw_path, &bytes[..bytes.len() - 3]).unwrap();
        let err = match label {
            "volume" => load_volume(json_path).err().map(|e| e.to_string()),
            "field" => field::load_field(json_path).err().map(|e| e.to_string()),
            _ => Network::<f32>::load(json_path).err().map(|e| e.to_string()),
        };
        match err {
            Some(msg) => rejections.push(format!("{label}: {msg}")),
            None => rejections.push(format!("{label}: NOT REJECTED")),
        }
        std::fs::write(&raw_path, &bytes).unwrap();
    }
    let corrupt_ok = rejections.iter().all(|r| !r.ends_with("NOT REJECTED"));

    verdict(
        10,
        vol_ok && mask_ok && field_ok && ckpt_ok && corrupt_ok,
        &format!(
            "volume {vol_ok}, mask {mask_ok}, field {field_ok}, checkpoint {ckpt_ok}; \
             truncated payloads rejected: {}",
            rejections.join(" | ")
        ),
    );
    std::fs::remove_dir_all(&root).ok();
}
