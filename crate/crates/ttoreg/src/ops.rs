//! Differentiable 3D kernels with hand-derived reverse-mode gradients.
//!
//! Everything the registration objective touches — convolution, LeakyReLU,
//! trilinear warping and resampling, field composition, MSE, local NCC, and
//! the smoothness regularizer — lives here as a forward function paired with
//! an explicit backward function. The kernels are generic over [`Real`]
//! (`f32` in production, `f64` in the finite-difference gradient tests) and
//! operate on channel-major [`Tensor`] buffers: `data[c][z][y][x]`,
//! x-fastest, matching the volume index order.
//!
//! Determinism: every loop has a fixed iteration order and reductions use
//! fixed-width lane accumulators, so results are bit-reproducible run to run.

use crate::real::Real;
use crate::volume::{Dims, Volume};

/// Channel-major dense buffer: `data[c * dims.len() + dims.idx(x, y, z)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub ch: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(ch: usize, dims: Dims) -> Self {
        Tensor { ch, dims, data: vec![T::ZERO; ch * dims.len()] }
    }

    pub fn from_vec(ch: usize, dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), ch * dims.len(), "tensor data length mismatch");
        Tensor { ch, dims, data }
    }

    /// Single-channel tensor from a volume's intensities.
    pub fn from_volume(v: &Volume) -> Self {
        let data = v.data().iter().map(|&x| T::from_f32(x)).collect();
        Tensor { ch: 1, dims: v.dims(), data }
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.to_f32()).collect()
    }

    /// Concatenate channels of `a` then `b` (same grid).
    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.dims, b.dims, "concat grids differ");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor { ch: a.ch + b.ch, dims: a.dims, data }
    }

    /// Split a gradient of a concatenated tensor back into the two parts.
    pub fn split(&self, ch_a: usize) -> (Tensor<T>, Tensor<T>) {
        assert!(ch_a <= self.ch);
        let n = self.dims.len();
        let a = Tensor { ch: ch_a, dims: self.dims, data: self.data[..ch_a * n].to_vec() };
        let b = Tensor { ch: self.ch - ch_a, dims: self.dims, data: self.data[ch_a * n..].to_vec() };
        (a, b)
    }
}

const LANES: usize = 8;

/// Deterministic lane-accumulated sum (vectorizable without reassociating
/// differently from run to run).
fn sum_lanes<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    for (l, &x) in rem.iter().enumerate() {
        acc[l] += x;
    }
    let mut s = T::ZERO;
    for a in acc {
        s += a;
    }
    s
}

// ---------------------------------------------------------------------------
// 3D convolution, kernel 3x3x3, zero padding 1, stride 1 or 2.
// Weight layout: [out][in][kz][ky][kx], then per-layer biases [out].
// ---------------------------------------------------------------------------

pub const KERNEL: usize = 3;
pub const KERNEL_VOLUME: usize = KERNEL * KERNEL * KERNEL;

/// Output grid of a stride-`s` convolution over `dims` (padding 1, kernel 3).
pub fn conv_output_dims(dims: Dims, stride: usize) -> Dims {
    match stride {
        1 => dims,
        2 => Dims::new(dims.nx / 2, dims.ny / 2, dims.nz / 2),
        _ => panic!("unsupported stride {stride}"),
    }
}

/// Stage one input row into a zero-padded buffer (`pad[0] = pad[nx+1] = 0`)
/// so the 3-tap x-kernel needs no edge branches: contribution to `acc[x]`
/// is `w0*pad[x] + w1*pad[x+1] + w2*pad[x+2]`.
#[inline]
fn stage_padded_row<T: Real>(pad: &mut [T], row: &[T]) {
    let n = row.len();
    debug_assert_eq!(pad.len(), n + 2);
    pad[0] = T::ZERO;
    pad[1..=n].copy_from_slice(row);
    pad[n + 1] = T::ZERO;
}

/// `acc[x] += w0*pad[x] + w1*pad[x+1] + w2*pad[x+2]` over a padded row.
#[inline]
fn fused_row_3tap<T: Real>(acc: &mut [T], pad: &[T], w0: T, w1: T, w2: T) {
    let n = acc.len();
    debug_assert_eq!(pad.len(), n + 2);
    for x in 0..n {
        acc[x] += w0 * pad[x] + w1 * pad[x + 1] + w2 * pad[x + 2];
    }
}

pub fn conv3d_forward<T: Real>(
    inp: &Tensor<T>,
    w: &[T],
    bias: &[T],
    out_ch: usize,
    stride: usize,
) -> Tensor<T> {
    assert_eq!(w.len(), out_ch * inp.ch * KERNEL_VOLUME);
    assert_eq!(bias.len(), out_ch);
    match stride {
        1 => conv3d_s1(inp, w, bias, out_ch),
        2 => conv3d_s2(inp, w, bias, out_ch),
        _ => panic!("unsupported stride {stride}"),
    }
}

fn conv3d_s1<T: Real>(inp: &Tensor<T>, w: &[T], bias: &[T], out_ch: usize) -> Tensor<T> {
    let Dims { nx, ny, nz } = inp.dims;
    let plane = nx * ny;
    let vol = inp.dims.len();
    let mut out = Tensor::zeros(out_ch, inp.dims);
    let mut acc = vec![T::ZERO; out_ch * nx];
    let mut pad = vec![T::ZERO; nx + 2];
    for z in 0..nz {
        for y in 0..ny {
            for (co, &b) in bias.iter().enumerate() {
                acc[co * nx..(co + 1) * nx].fill(b);
            }
            for ci in 0..inp.ch {
                let chan = &inp.data[ci * vol..(ci + 1) * vol];
                for dz in 0..KERNEL {
                    let zz = z as isize + dz as isize - 1;
                    if zz < 0 || zz >= nz as isize {
                        continue;
                    }
                    for dy in 0..KERNEL {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= ny as isize {
                            continue;
                        }
                        stage_padded_row(&mut pad, &chan[zz as usize * plane + yy as usize * nx..][..nx]);
                        for co in 0..out_ch {
                            let wb = (((co * inp.ch + ci) * KERNEL + dz) * KERNEL + dy) * KERNEL;
                            fused_row_3tap(&mut acc[co * nx..(co + 1) * nx], &pad, w[wb], w[wb + 1], w[wb + 2]);
                        }
                    }
                }
            }
            for co in 0..out_ch {
                out.data[co * vol + z * plane + y * nx..][..nx].copy_from_slice(&acc[co * nx..(co + 1) * nx]);
            }
        }
    }
    out
}

fn conv3d_s2<T: Real>(inp: &Tensor<T>, w: &[T], bias: &[T], out_ch: usize) -> Tensor<T> {
    let Dims { nx, ny, nz } = inp.dims;
    assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0, "stride-2 conv needs even dims");
    let odims = conv_output_dims(inp.dims, 2);
    let oplane = odims.nx * odims.ny;
    let ovol = odims.len();
    let plane = nx * ny;
    let vol = inp.dims.len();
    let mut out = Tensor::zeros(out_ch, odims);
    let mut acc = vec![T::ZERO; odims.nx];
    for co in 0..out_ch {
        for zo in 0..odims.nz {
            for yo in 0..odims.ny {
                acc.fill(bias[co]);
                for ci in 0..inp.ch {
                    let chan = &inp.data[ci * vol..(ci + 1) * vol];
                    for dz in 0..KERNEL {
                        let zi = 2 * zo as isize + dz as isize - 1;
                        if zi < 0 || zi >= nz as isize {
                            continue;
                        }
                        for dy in 0..KERNEL {
                            let yi = 2 * yo as isize + dy as isize - 1;
                            if yi < 0 || yi >= ny as isize {
                                continue;
                            }
                            let row = &chan[zi as usize * plane + yi as usize * nx..][..nx];
                            let wb = (((co * inp.ch + ci) * KERNEL + dz) * KERNEL + dy) * KERNEL;
                            for dx in 0..KERNEL {
                                let wk = w[wb + dx];
                                // in_x = 2*xo + dx - 1; only dx=0, xo=0 underflows.
                                let xo_lo = usize::from(dx == 0);
                                for (xo, a) in acc.iter_mut().enumerate().skip(xo_lo) {
                                    *a += wk * row[2 * xo + dx - 1];
                                }
                            }
                        }
                    }
                }
                out.data[co * ovol + zo * oplane + yo * odims.nx..][..odims.nx].copy_from_slice(&acc);
            }
        }
    }
    out
}

/// Reverse-mode convolution: gradients w.r.t. input (optional), weights, and
/// biases, given `dout` on the output grid.
pub fn conv3d_backward<T: Real>(
    inp: &Tensor<T>,
    w: &[T],
    dout: &Tensor<T>,
    stride: usize,
    want_dinput: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let out_ch = dout.ch;
    let in_ch = inp.ch;
    assert_eq!(w.len(), out_ch * in_ch * KERNEL_VOLUME);
    assert_eq!(dout.dims, conv_output_dims(inp.dims, stride));

    let mut db = vec![T::ZERO; out_ch];
    for co in 0..out_ch {
        db[co] = sum_lanes(dout.channel(co));
    }

    match stride {
        1 => {
            let dw = conv3d_s1_dw(inp, dout);
            let dinput = want_dinput.then(|| {
                // dIn = conv(dOut, W transposed over channels and flipped over
                // the kernel axes); reversing the 27-entry block flips all
                // three axes at once.
                let mut wt = vec![T::ZERO; w.len()];
                for co in 0..out_ch {
                    for ci in 0..in_ch {
                        let src = (co * in_ch + ci) * KERNEL_VOLUME;
                        let dst = (ci * out_ch + co) * KERNEL_VOLUME;
                        for k in 0..KERNEL_VOLUME {
                            wt[dst + k] = w[src + KERNEL_VOLUME - 1 - k];
                        }
                    }
                }
                let zero_bias = vec![T::ZERO; in_ch];
                conv3d_s1(dout, &wt, &zero_bias, in_ch)
            });
            (dinput, dw, db)
        }
        2 => {
            let (dinput, dw) = conv3d_s2_backward(inp, w, dout, want_dinput);
            (dinput, dw, db)
        }
        _ => panic!("unsupported stride {stride}"),
    }
}

fn conv3d_s1_dw<T: Real>(inp: &Tensor<T>, dout: &Tensor<T>) -> Vec<T> {
    let Dims { nx, ny, nz } = inp.dims;
    let plane = nx * ny;
    let vol = inp.dims.len();
    let (in_ch, out_ch) = (inp.ch, dout.ch);
    let mut dw = vec![T::ZERO; out_ch * in_ch * KERNEL_VOLUME];
    let mut pad = vec![T::ZERO; nx + 2];
    // Per-(ci,dz,dy) sweep with persistent per-channel lane accumulators so
    // the horizontal reduction happens once per weight, not once per row.
    let mut acc = vec![T::ZERO; out_ch * 3 * LANES];
    for ci in 0..in_ch {
        let chan = &inp.data[ci * vol..(ci + 1) * vol];
        for dz in 0..KERNEL {
            for dy in 0..KERNEL {
                acc.fill(T::ZERO);
                for z in 0..nz {
                    let zz = z as isize + dz as isize - 1;
                    if zz < 0 || zz >= nz as isize {
                        continue;
                    }
                    for y in 0..ny {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= ny as isize {
                            continue;
                        }
                        stage_padded_row(&mut pad, &chan[zz as usize * plane + yy as usize * nx..][..nx]);
                        for co in 0..out_ch {
                            let row_do = &dout.data[co * vol + z * plane + y * nx..][..nx];
                            triple_dot_accum(row_do, &pad, &mut acc[co * 3 * LANES..][..3 * LANES]);
                        }
                    }
                }
                for co in 0..out_ch {
                    let wb = (((co * in_ch + ci) * KERNEL + dz) * KERNEL + dy) * KERNEL;
                    for tap in 0..3 {
                        dw[wb + tap] = sum_lanes(&acc[(co * 3 + tap) * LANES..][..LANES]);
                    }
                }
            }
        }
    }
    dw
}

/// Accumulate three shifted dot products of `a` against a (len+2) padded row
/// into 3 x LANES persistent lane accumulators (`acc[tap * LANES + lane]`).
#[inline]
fn triple_dot_accum<T: Real>(a: &[T], pad: &[T], acc: &mut [T]) {
    let n = a.len();
    debug_assert_eq!(pad.len(), n + 2);
    debug_assert_eq!(acc.len(), 3 * LANES);
    let (acc01, acc2) = acc.split_at_mut(2 * LANES);
    let (acc0, acc1) = acc01.split_at_mut(LANES);
    let chunks = n / LANES;
    for i in 0..chunks {
        let pa: &[T; LANES] = a[i * LANES..][..LANES].try_into().unwrap();
        let p0: &[T; LANES] = pad[i * LANES..][..LANES].try_into().unwrap();
        let p1: &[T; LANES] = pad[i * LANES + 1..][..LANES].try_into().unwrap();
        let p2: &[T; LANES] = pad[i * LANES + 2..][..LANES].try_into().unwrap();
        for l in 0..LANES {
            let g = pa[l];
            acc0[l] += g * p0[l];
            acc1[l] += g * p1[l];
            acc2[l] += g * p2[l];
        }
    }
    for i in chunks * LANES..n {
        let l = i - chunks * LANES;
        acc0[l] += a[i] * pad[i];
        acc1[l] += a[i] * pad[i + 1];
        acc2[l] += a[i] * pad[i + 2];
    }
}

fn conv3d_s2_backward<T: Real>(
    inp: &Tensor<T>,
    w: &[T],
    dout: &Tensor<T>,
    want_dinput: bool,
) -> (Option<Tensor<T>>, Vec<T>) {
    let Dims { nx, ny, nz } = inp.dims;
    let odims = dout.dims;
    let plane = nx * ny;
    let vol = inp.dims.len();
    let oplane = odims.nx * odims.ny;
    let ovol = odims.len();
    let (in_ch, out_ch) = (inp.ch, dout.ch);
    let mut dw = vec![T::ZERO; out_ch * in_ch * KERNEL_VOLUME];
    let mut dinput = want_dinput.then(|| Tensor::zeros(in_ch, inp.dims));
    for co in 0..out_ch {
        for zo in 0..odims.nz {
            for yo in 0..odims.ny {
                let row_do = &dout.data[co * ovol + zo * oplane + yo * odims.nx..][..odims.nx];
                for ci in 0..in_ch {
                    for dz in 0..KERNEL {
                        let zi = 2 * zo as isize + dz as isize - 1;
                        if zi < 0 || zi >= nz as isize {
                            continue;
                        }
                        for dy in 0..KERNEL {
                            let yi = 2 * yo as isize + dy as isize - 1;
                            if yi < 0 || yi >= ny as isize {
                                continue;
                            }
                            let base = zi as usize * plane + yi as usize * nx;
                            let wb = (((co * in_ch + ci) * KERNEL + dz) * KERNEL + dy) * KERNEL;
                            for dx in 0..KERNEL {
                                let xo_lo = usize::from(dx == 0);
                                let mut acc = T::ZERO;
                                for (xo, &g) in row_do.iter().enumerate().skip(xo_lo) {
                                    let xi = 2 * xo + dx - 1;
                                    acc += g * inp.data[ci * vol + base + xi];
                                }
                                dw[wb + dx] += acc;
                                if let Some(di) = dinput.as_mut() {
                                    let wk = w[wb + dx];
                                    let dchan = &mut di.data[ci * vol..(ci + 1) * vol];
                                    for (xo, &g) in row_do.iter().enumerate().skip(xo_lo) {
                                        let xi = 2 * xo + dx - 1;
                                        dchan[base + xi] += wk * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dinput, dw)
}

// ---------------------------------------------------------------------------
// LeakyReLU
// ---------------------------------------------------------------------------

pub fn leaky_relu_forward<T: Real>(x: &mut Tensor<T>, slope: T) {
    for v in &mut x.data {
        if *v < T::ZERO {
            *v *= slope;
        }
    }
}

/// Backward using the *output* values (valid because the slope is positive,
/// so output sign equals input sign). Scales `dout` in place.
pub fn leaky_relu_backward<T: Real>(out: &Tensor<T>, dout: &mut Tensor<T>, slope: T) {
    debug_assert_eq!(out.data.len(), dout.data.len());
    for (g, &o) in dout.data.iter_mut().zip(&out.data) {
        if o < T::ZERO {
            *g *= slope;
        }
    }
}

// ---------------------------------------------------------------------------
// Trilinear sampling core (shared by warp, compose, upsample).
// ---------------------------------------------------------------------------

/// Corner indices, interpolation weights, and clamp-awareness for sampling a
/// grid at one continuous position (clamp-to-edge boundary handling).
#[derive(Clone, Copy)]
struct TriSample {
    // Low/high corner indices per axis (already clamped).
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    z0: usize,
    z1: usize,
    // Fractional weights toward the high corner.
    fx: f64,
    fy: f64,
    fz: f64,
    // Whether the position-derivative is live per axis (dies where the
    // clamp is active: moving the position there does not move the sample).
    gx: bool,
    gy: bool,
    gz: bool,
}

impl TriSample {
    #[inline]
    fn new(dims: Dims, px: f64, py: f64, pz: f64) -> Self {
        #[inline]
        fn axis(n: usize, p: f64) -> (usize, usize, f64, bool) {
            let hi = (n - 1) as f64;
            let pc = p.max(0.0).min(hi);
            let i0 = pc.floor();
            let f = pc - i0;
            let i0 = i0 as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, f, p > 0.0 && p < hi)
        }
        let (x0, x1, fx, gx) = axis(dims.nx, px);
        let (y0, y1, fy, gy) = axis(dims.ny, py);
        let (z0, z1, fz, gz) = axis(dims.nz, pz);
        TriSample { x0, x1, y0, y1, z0, z1, fx, fy, fz, gx, gy, gz }
    }

    /// True when the position is exactly on a grid point (no interpolation).
    #[inline]
    fn on_grid(&self) -> bool {
        self.fx == 0.0 && self.fy == 0.0 && self.fz == 0.0
    }

    #[inline]
    fn corners(&self, dims: Dims) -> [usize; 8] {
        [
            dims.idx(self.x0, self.y0, self.z0),
            dims.idx(self.x1, self.y0, self.z0),
            dims.idx(self.x0, self.y1, self.z0),
            dims.idx(self.x1, self.y1, self.z0),
            dims.idx(self.x0, self.y0, self.z1),
            dims.idx(self.x1, self.y0, self.z1),
            dims.idx(self.x0, self.y1, self.z1),
            dims.idx(self.x1, self.y1, self.z1),
        ]
    }

    #[inline]
    fn weights<T: Real>(&self) -> [T; 8] {
        let fx = T::from_f64(self.fx);
        let fy = T::from_f64(self.fy);
        let fz = T::from_f64(self.fz);
        let gx = T::ONE - fx;
        let gy = T::ONE - fy;
        let gz = T::ONE - fz;
        [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ]
    }

    /// Sample one channel.
    #[inline]
    fn sample<T: Real>(&self, chan: &[T], dims: Dims) -> T {
        let c = self.corners(dims);
        if self.on_grid() {
            return chan[c[0]];
        }
        let w = self.weights::<T>();
        let mut acc = T::ZERO;
        for k in 0..8 {
            acc += w[k] * chan[c[k]];
        }
        acc
    }

    /// Sample and the derivative of the sample w.r.t. the (unclamped)
    /// position, honoring clamp-dead axes.
    #[inline]
    fn sample_with_pos_grad<T: Real>(&self, chan: &[T], dims: Dims) -> (T, [T; 3]) {
        let c = self.corners(dims);
        let v = [
            chan[c[0]], chan[c[1]], chan[c[2]], chan[c[3]], chan[c[4]], chan[c[5]], chan[c[6]], chan[c[7]],
        ];
        let fx = T::from_f64(self.fx);
        let fy = T::from_f64(self.fy);
        let fz = T::from_f64(self.fz);
        let gx = T::ONE - fx;
        let gy = T::ONE - fy;
        let gz = T::ONE - fz;
        // Interpolate down axis by axis, keeping the pieces needed for the
        // position gradient.
        let c00 = gx * v[0] + fx * v[1];
        let c10 = gx * v[2] + fx * v[3];
        let c01 = gx * v[4] + fx * v[5];
        let c11 = gx * v[6] + fx * v[7];
        let d00 = v[1] - v[0];
        let d10 = v[3] - v[2];
        let d01 = v[5] - v[4];
        let d11 = v[7] - v[6];
        let e0 = gy * c00 + fy * c10;
        let e1 = gy * c01 + fy * c11;
        let value = gz * e0 + fz * e1;
        let ddx = gz * (gy * d00 + fy * d10) + fz * (gy * d01 + fy * d11);
        let ddy = gz * (c10 - c00) + fz * (c11 - c01);
        let ddz = e1 - e0;
        let gxt = if self.gx { ddx } else { T::ZERO };
        let gyt = if self.gy { ddy } else { T::ZERO };
        let gzt = if self.gz { ddz } else { T::ZERO };
        (value, [gxt, gyt, gzt])
    }
}

// ---------------------------------------------------------------------------
// Warp: out_c(x) = sample(src_c, x + u(x)), u is a 3-channel field tensor.
// ---------------------------------------------------------------------------

fn field_position<T: Real>(u: &Tensor<T>, i: usize, x: usize, y: usize, z: usize) -> (f64, f64, f64) {
    let n = u.dims.len();
    (
        x as f64 + u.data[i].to_f64(),
        y as f64 + u.data[n + i].to_f64(),
        z as f64 + u.data[2 * n + i].to_f64(),
    )
}

pub fn warp_forward<T: Real>(src: &Tensor<T>, u: &Tensor<T>) -> Tensor<T> {
    assert_eq!(u.ch, 3, "displacement tensor must have 3 channels");
    assert_eq!(src.dims, u.dims, "warp grids differ");
    let dims = src.dims;
    let n = dims.len();
    let mut out = Tensor::zeros(src.ch, dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let (px, py, pz) = field_position(u, i, x, y, z);
                let t = TriSample::new(dims, px, py, pz);
                for c in 0..src.ch {
                    out.data[c * n + i] = t.sample(src.channel(c), dims);
                }
                i += 1;
            }
        }
    }
    out
}

/// Gradients of the warp w.r.t. the source image and the field.
pub fn warp_backward<T: Real>(src: &Tensor<T>, u: &Tensor<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    assert_eq!(u.ch, 3);
    assert_eq!(src.dims, u.dims);
    assert_eq!(dout.ch, src.ch);
    let dims = src.dims;
    let n = dims.len();
    let mut dsrc = Tensor::zeros(src.ch, dims);
    let mut du = Tensor::zeros(3, dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let (px, py, pz) = field_position(u, i, x, y, z);
                let t = TriSample::new(dims, px, py, pz);
                let corners = t.corners(dims);
                let weights = t.weights::<T>();
                let mut gpos = [T::ZERO; 3];
                for c in 0..src.ch {
                    let g = dout.data[c * n + i];
                    let (_, pg) = t.sample_with_pos_grad(src.channel(c), dims);
                    gpos[0] += g * pg[0];
                    gpos[1] += g * pg[1];
                    gpos[2] += g * pg[2];
                    let dchan = &mut dsrc.data[c * n..(c + 1) * n];
                    for k in 0..8 {
                        dchan[corners[k]] += weights[k] * g;
                    }
                }
                du.data[i] = gpos[0];
                du.data[n + i] = gpos[1];
                du.data[2 * n + i] = gpos[2];
                i += 1;
            }
        }
    }
    (dsrc, du)
}

// ---------------------------------------------------------------------------
// Composition: out(x) = u2(x) + sample(u1, x + u2(x)), per component.
// ---------------------------------------------------------------------------

pub fn compose_forward<T: Real>(u1: &Tensor<T>, u2: &Tensor<T>) -> Tensor<T> {
    assert_eq!(u1.ch, 3);
    assert_eq!(u2.ch, 3);
    assert_eq!(u1.dims, u2.dims);
    let dims = u1.dims;
    let n = dims.len();
    let mut out = Tensor::zeros(3, dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let (px, py, pz) = field_position(u2, i, x, y, z);
                let t = TriSample::new(dims, px, py, pz);
                for c in 0..3 {
                    out.data[c * n + i] = u2.data[c * n + i] + t.sample(u1.channel(c), dims);
                }
                i += 1;
            }
        }
    }
    out
}

pub fn compose_backward<T: Real>(u1: &Tensor<T>, u2: &Tensor<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    assert_eq!(dout.ch, 3);
    assert_eq!(u1.dims, u2.dims);
    let dims = u1.dims;
    let n = dims.len();
    let mut du1 = Tensor::zeros(3, dims);
    let mut du2 = Tensor::zeros(3, dims);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let (px, py, pz) = field_position(u2, i, x, y, z);
                let t = TriSample::new(dims, px, py, pz);
                let corners = t.corners(dims);
                let weights = t.weights::<T>();
                let mut gpos = [T::ZERO; 3];
                for c in 0..3 {
                    let g = dout.data[c * n + i];
                    // Direct dependence on u2 through the additive term.
                    du2.data[c * n + i] += g;
                    let (_, pg) = t.sample_with_pos_grad(u1.channel(c), dims);
                    gpos[0] += g * pg[0];
                    gpos[1] += g * pg[1];
                    gpos[2] += g * pg[2];
                    let dchan = &mut du1.data[c * n..(c + 1) * n];
                    for k in 0..8 {
                        dchan[corners[k]] += weights[k] * g;
                    }
                }
                // Position dependence: p = x + u2(x).
                du2.data[i] += gpos[0];
                du2.data[n + i] += gpos[1];
                du2.data[2 * n + i] += gpos[2];
                i += 1;
            }
        }
    }
    (du1, du2)
}

// ---------------------------------------------------------------------------
// Trilinear 2x upsampling (and its transpose), used by the encoder-decoder.
// Output coordinate o maps to input coordinate (o + 0.5) / 2 - 0.5.
// ---------------------------------------------------------------------------

pub fn upsample2x_forward<T: Real>(inp: &Tensor<T>, out_dims: Dims) -> Tensor<T> {
    assert_eq!(out_dims.nx, inp.dims.nx * 2);
    assert_eq!(out_dims.ny, inp.dims.ny * 2);
    assert_eq!(out_dims.nz, inp.dims.nz * 2);
    let n_out = out_dims.len();
    let mut out = Tensor::zeros(inp.ch, out_dims);
    let mut i = 0;
    for z in 0..out_dims.nz {
        let pz = (z as f64 + 0.5) / 2.0 - 0.5;
        for y in 0..out_dims.ny {
            let py = (y as f64 + 0.5) / 2.0 - 0.5;
            for x in 0..out_dims.nx {
                let px = (x as f64 + 0.5) / 2.0 - 0.5;
                let t = TriSample::new(inp.dims, px, py, pz);
                for c in 0..inp.ch {
                    out.data[c * n_out + i] = t.sample(inp.channel(c), inp.dims);
                }
                i += 1;
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dout: &Tensor<T>, in_dims: Dims) -> Tensor<T> {
    let out_dims = dout.dims;
    assert_eq!(out_dims.nx, in_dims.nx * 2);
    assert_eq!(out_dims.ny, in_dims.ny * 2);
    assert_eq!(out_dims.nz, in_dims.nz * 2);
    let n_out = out_dims.len();
    let n_in = in_dims.len();
    let mut dinp = Tensor::zeros(dout.ch, in_dims);
    let mut i = 0;
    for z in 0..out_dims.nz {
        let pz = (z as f64 + 0.5) / 2.0 - 0.5;
        for y in 0..out_dims.ny {
            let py = (y as f64 + 0.5) / 2.0 - 0.5;
            for x in 0..out_dims.nx {
                let px = (x as f64 + 0.5) / 2.0 - 0.5;
                let t = TriSample::new(in_dims, px, py, pz);
                let corners = t.corners(in_dims);
                let weights = t.weights::<T>();
                for c in 0..dout.ch {
                    let g = dout.data[c * n_out + i];
                    let dchan = &mut dinp.data[c * n_in..(c + 1) * n_in];
                    for k in 0..8 {
                        dchan[corners[k]] += weights[k] * g;
                    }
                }
                i += 1;
            }
        }
    }
    dinp
}

// ---------------------------------------------------------------------------
// MSE
// ---------------------------------------------------------------------------

pub fn mse_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    assert_eq!(a.data.len(), b.data.len());
    let mut acc = [T::ZERO; LANES];
    let n = a.data.len();
    let chunks = n / LANES;
    for i in 0..chunks {
        for l in 0..LANES {
            let d = a.data[i * LANES + l] - b.data[i * LANES + l];
            acc[l] += d * d;
        }
    }
    for i in chunks * LANES..n {
        let d = a.data[i] - b.data[i];
        acc[i - chunks * LANES] += d * d;
    }
    let mut s = T::ZERO;
    for v in acc {
        s += v;
    }
    s / T::from_usize(n)
}

/// d(mse)/da scaled by `upstream`.
pub fn mse_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, upstream: T) -> Tensor<T> {
    assert_eq!(a.data.len(), b.data.len());
    let scale = upstream * (T::ONE + T::ONE) / T::from_usize(a.data.len());
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| scale * (x - y)).collect();
    Tensor { ch: a.ch, dims: a.dims, data }
}

// ---------------------------------------------------------------------------
// Local NCC over a cubic window with clamp-to-edge padding.
// Loss = -(mean over voxels of the local correlation coefficient); windows
// whose local variance (of either image) falls below VAR_EPS contribute 0.
// ---------------------------------------------------------------------------

/// Variance floor under which a window counts as textureless.
pub const NCC_VAR_EPS: f64 = 1e-6;

struct NccStats<T> {
    count: T,
    sa: T,
    sb: T,
    saa: T,
    sbb: T,
    sab: T,
}

#[inline]
fn ncc_window_stats<T: Real>(a: &[T], b: &[T], dims: Dims, cx: usize, cy: usize, cz: usize, r: usize) -> NccStats<T> {
    let mut sa = T::ZERO;
    let mut sb = T::ZERO;
    let mut saa = T::ZERO;
    let mut sbb = T::ZERO;
    let mut sab = T::ZERO;
    let ri = r as isize;
    for dz in -ri..=ri {
        let z = (cz as isize + dz).clamp(0, dims.nz as isize - 1) as usize;
        for dy in -ri..=ri {
            let y = (cy as isize + dy).clamp(0, dims.ny as isize - 1) as usize;
            let base = dims.idx(0, y, z);
            for dx in -ri..=ri {
                let x = (cx as isize + dx).clamp(0, dims.nx as isize - 1) as usize;
                let va = a[base + x];
                let vb = b[base + x];
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
            }
        }
    }
    let w = 2 * r + 1;
    NccStats { count: T::from_usize(w * w * w), sa, sb, saa, sbb, sab }
}

/// Centered second moments and the correlation pieces; `None` when either
/// window is (near-)constant.
#[inline]
fn ncc_terms<T: Real>(s: &NccStats<T>) -> Option<(T, T, T, T, T)> {
    let mean_a = s.sa / s.count;
    let mean_b = s.sb / s.count;
    let caa = s.saa - s.sa * mean_a;
    let cbb = s.sbb - s.sb * mean_b;
    let cab = s.sab - s.sa * mean_b;
    let eps = T::from_f64(NCC_VAR_EPS);
    if caa < eps * s.count || cbb < eps * s.count {
        return None;
    }
    let denom = (caa * cbb).sqrt();
    let rho = cab / denom;
    Some((rho, caa, denom, mean_a, mean_b))
}

pub fn ncc_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, window: usize) -> T {
    assert_eq!(a.dims, b.dims);
    assert_eq!(a.ch, 1);
    assert_eq!(b.ch, 1);
    assert!(window % 2 == 1 && window >= 3, "window must be odd and >= 3");
    let dims = a.dims;
    let r = window / 2;
    let mut acc = T::ZERO;
    for cz in 0..dims.nz {
        for cy in 0..dims.ny {
            let mut row = T::ZERO;
            for cx in 0..dims.nx {
                let s = ncc_window_stats(&a.data, &b.data, dims, cx, cy, cz, r);
                if let Some((rho, ..)) = ncc_terms(&s) {
                    row += rho;
                }
            }
            acc += row;
        }
    }
    -(acc / T::from_usize(dims.len()))
}

/// d(ncc_loss)/da scaled by `upstream`.
pub fn ncc_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, window: usize, upstream: T) -> Tensor<T> {
    assert_eq!(a.dims, b.dims);
    assert_eq!(a.ch, 1);
    let dims = a.dims;
    let r = window / 2;
    let ri = r as isize;
    let scale = -upstream / T::from_usize(dims.len());
    let mut da = Tensor::zeros(1, dims);
    for cz in 0..dims.nz {
        for cy in 0..dims.ny {
            for cx in 0..dims.nx {
                let s = ncc_window_stats(&a.data, &b.data, dims, cx, cy, cz, r);
                let Some((rho, caa, denom, mean_a, mean_b)) = ncc_terms(&s) else {
                    continue;
                };
                // d(rho)/da_j = (b_j - mean_b)/denom - rho*(a_j - mean_a)/caa
                let p = scale / denom;
                let q = -scale * rho / caa;
                let rconst = scale * (mean_a * rho / caa - mean_b / denom);
                for dz in -ri..=ri {
                    let z = (cz as isize + dz).clamp(0, dims.nz as isize - 1) as usize;
                    for dy in -ri..=ri {
                        let y = (cy as isize + dy).clamp(0, dims.ny as isize - 1) as usize;
                        let base = dims.idx(0, y, z);
                        for dx in -ri..=ri {
                            let x = (cx as isize + dx).clamp(0, dims.nx as isize - 1) as usize;
                            let j = base + x;
                            da.data[j] += b.data[j] * p + a.data[j] * q + rconst;
                        }
                    }
                }
            }
        }
    }
    da
}

// ---------------------------------------------------------------------------
// Smoothness: mean of squared forward differences over all components and
// axes; one-sided differences at the far borders are omitted from both the
// sum and the count.
// ---------------------------------------------------------------------------

fn smoothness_count(dims: Dims) -> usize {
    let Dims { nx, ny, nz } = dims;
    3 * ((nx.saturating_sub(1)) * ny * nz + nx * (ny.saturating_sub(1)) * nz + nx * ny * (nz.saturating_sub(1)))
}

pub fn smoothness_forward<T: Real>(u: &Tensor<T>) -> T {
    assert_eq!(u.ch, 3);
    let dims = u.dims;
    let count = smoothness_count(dims);
    if count == 0 {
        return T::ZERO;
    }
    let n = dims.len();
    let mut acc = T::ZERO;
    for c in 0..3 {
        let chan = &u.data[c * n..(c + 1) * n];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                let row = &chan[dims.idx(0, y, z)..][..dims.nx];
                // x-differences within the row.
                let mut rx = T::ZERO;
                for w in row.windows(2) {
                    let d = w[1] - w[0];
                    rx += d * d;
                }
                acc += rx;
                // y- and z-differences against the neighboring rows.
                if y + 1 < dims.ny {
                    let next = &chan[dims.idx(0, y + 1, z)..][..dims.nx];
                    let mut ry = T::ZERO;
                    for (a, b) in row.iter().zip(next) {
                        let d = *b - *a;
                        ry += d * d;
                    }
                    acc += ry;
                }
                if z + 1 < dims.nz {
                    let next = &chan[dims.idx(0, y, z + 1)..][..dims.nx];
                    let mut rz = T::ZERO;
                    for (a, b) in row.iter().zip(next) {
                        let d = *b - *a;
                        rz += d * d;
                    }
                    acc += rz;
                }
            }
        }
    }
    acc / T::from_usize(count)
}

/// d(smoothness)/du scaled by `upstream`.
pub fn smoothness_backward<T: Real>(u: &Tensor<T>, upstream: T) -> Tensor<T> {
    assert_eq!(u.ch, 3);
    let dims = u.dims;
    let count = smoothness_count(dims);
    let mut du = Tensor::zeros(3, dims);
    if count == 0 {
        return du;
    }
    let n = dims.len();
    let scale = upstream * (T::ONE + T::ONE) / T::from_usize(count);
    for c in 0..3 {
        let chan = &u.data[c * n..(c + 1) * n];
        let dchan = &mut du.data[c * n..(c + 1) * n];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.idx(x, y, z);
                    if x + 1 < dims.nx {
                        let d = scale * (chan[i + 1] - chan[i]);
                        dchan[i + 1] += d;
                        dchan[i] -= d;
                    }
                    if y + 1 < dims.ny {
                        let j = dims.idx(x, y + 1, z);
                        let d = scale * (chan[j] - chan[i]);
                        dchan[j] += d;
                        dchan[i] -= d;
                    }
                    if z + 1 < dims.nz {
                        let j = dims.idx(x, y, z + 1);
                        let d = scale * (chan[j] - chan[i]);
                        dchan[j] += d;
                        dchan[i] -= d;
                    }
                }
            }
        }
    }
    du
}
