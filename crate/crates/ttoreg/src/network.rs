//! Displacement-prediction networks with exact reverse-mode gradients.
//!
//! A network maps a (moving, fixed) volume pair to a displacement field. Two
//! families are provided: a plain stack of 3x3x3 convolutions at full
//! resolution, and a two-level encoder-decoder with a stride-2 downsampling
//! convolution, trilinear upsampling, and a skip concatenation. Either can be
//! cascaded: stage k re-warps the moving image by the accumulated field and
//! predicts a correction, with the final field being the composition of all
//! stage outputs. Gradients for every parameter are hand-derived reverse-mode
//! passes through the kernel set in [`crate::ops`]; finite differences are
//! used only as a test oracle.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::fileio;
use crate::loss::{self, LossConfig};
use crate::ops::{self, Tensor, KERNEL_VOLUME};
use crate::real::Real;
use crate::volume::{Dims, Volume};

/// Negative slope of the LeakyReLU used on every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Network family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchKind {
    /// Ten full-resolution convolutions: nine hidden layers of 16 filters,
    /// then a linear 3-channel output layer.
    PlainCnn,
    /// Two resolution levels: full-res encoder conv, stride-2 down conv,
    /// half-res conv, trilinear upsample + skip concat, fusion conv, and a
    /// linear 3-channel head. 16 filters per hidden layer.
    EncoderDecoder,
    /// Full-resolution stack with the given hidden widths (used for small
    /// test instances); always ends in a linear 3-channel layer.
    Chain(Vec<usize>),
}

impl ArchKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::PlainCnn => "plain-cnn",
            ArchKind::EncoderDecoder => "encoder-decoder",
            ArchKind::Chain(_) => "chain",
        }
    }
}

/// A network family plus its cascade depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Number of cascade stages, each with independent parameters; >= 1.
    pub cascade_stages: usize,
}

/// Shape and parameter-blob placement of one convolution layer. Offsets are
/// relative to the owning cascade stage's slice of the blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub lrelu: bool,
    pub w_off: usize,
    pub b_off: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * KERNEL_VOLUME
    }
}

fn chain_layout(widths: &[usize]) -> Vec<LayerShape> {
    let mut chans = Vec::with_capacity(widths.len() + 2);
    chans.push(2);
    chans.extend_from_slice(widths);
    chans.push(3);
    let mut layers = Vec::with_capacity(chans.len() - 1);
    let mut off = 0;
    for i in 0..chans.len() - 1 {
        let (in_ch, out_ch) = (chans[i], chans[i + 1]);
        let w_off = off;
        let b_off = off + out_ch * in_ch * KERNEL_VOLUME;
        off = b_off + out_ch;
        layers.push(LayerShape {
            in_ch,
            out_ch,
            stride: 1,
            lrelu: i + 2 < chans.len(),
            w_off,
            b_off,
        });
    }
    layers
}

fn encoder_decoder_layout() -> Vec<LayerShape> {
    // (in_ch, out_ch, stride, lrelu): full-res encoder, down, half-res,
    // fusion of upsample+skip concat, linear head.
    let shapes = [
        (2usize, 16usize, 1usize, true),
        (16, 16, 2, true),
        (16, 16, 1, true),
        (32, 16, 1, true),
        (16, 3, 1, false),
    ];
    let mut layers = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for (in_ch, out_ch, stride, lrelu) in shapes {
        let w_off = off;
        let b_off = off + out_ch * in_ch * KERNEL_VOLUME;
        off = b_off + out_ch;
        layers.push(LayerShape { in_ch, out_ch, stride, lrelu, w_off, b_off });
    }
    layers
}

impl ArchitectureSpec {
    pub fn plain_cnn(cascade_stages: usize) -> Self {
        ArchitectureSpec { kind: ArchKind::PlainCnn, cascade_stages }
    }

    pub fn encoder_decoder(cascade_stages: usize) -> Self {
        ArchitectureSpec { kind: ArchKind::EncoderDecoder, cascade_stages }
    }

    pub fn custom_chain(widths: Vec<usize>, cascade_stages: usize) -> Self {
        ArchitectureSpec { kind: ArchKind::Chain(widths), cascade_stages }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cascade_stages == 0 {
            return Err(Error::Invalid("cascade_stages must be >= 1".into()));
        }
        if let ArchKind::Chain(widths) = &self.kind {
            if widths.iter().any(|&w| w == 0) {
                return Err(Error::Invalid("chain layer widths must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn stage_layout(&self) -> Vec<LayerShape> {
        match &self.kind {
            ArchKind::PlainCnn => chain_layout(&[16; 9]),
            ArchKind::EncoderDecoder => encoder_decoder_layout(),
            ArchKind::Chain(widths) => chain_layout(widths),
        }
    }

    /// Parameters per cascade stage.
    pub fn stage_param_count(&self) -> usize {
        let layers = self.stage_layout();
        let last = layers.last().expect("layouts are never empty");
        last.b_off + last.out_ch
    }

    /// Total parameter count across all stages.
    pub fn param_count(&self) -> usize {
        self.cascade_stages * self.stage_param_count()
    }

    /// Check that a grid can be pushed through this architecture.
    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        if dims.is_empty() {
            return Err(Error::DimMismatch("empty grid".into()));
        }
        if self.kind == ArchKind::EncoderDecoder {
            let [nx, ny, nz] = dims.as_array();
            if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
                return Err(Error::DimMismatch(format!(
                    "encoder-decoder needs every dimension divisible by 2, got {:?}",
                    dims.as_array()
                )));
            }
        }
        Ok(())
    }
}

/// Where a parameter set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Freshly initialized, never trained.
    None,
    /// Trained over the whole cohort.
    Population,
    /// Refined on one subject's planning pair.
    Individualized,
    /// Refined on a later treatment fraction of one subject.
    Fractional,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::None => "none",
            Provenance::Population => "population",
            Provenance::Individualized => "individualized",
            Provenance::Fractional => "fractional",
        }
    }
}

/// A displacement-prediction network: architecture plus one flat parameter
/// blob (per-layer weights `[out][in][kz][ky][kx]` then biases `[out]`,
/// layers ascending, cascade stages ascending).
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    arch: ArchitectureSpec,
    params: Vec<T>,
    seed: u64,
    provenance: Provenance,
}

/// Per-stage forward state kept for the backward pass.
struct StageCache<T: Real> {
    /// Stage input: concat(warped moving, fixed).
    x: Tensor<T>,
    /// Post-activation output of every layer, in layer order.
    acts: Vec<Tensor<T>>,
    /// Encoder-decoder only: the concat(upsampled, skip) tensor.
    cat: Option<Tensor<T>>,
    /// This stage's predicted correction field u_k.
    u_stage: Tensor<T>,
    /// Accumulated field before this stage (None for stage 0).
    u_before: Option<Tensor<T>>,
}

impl<T: Real> Network<T> {
    /// Deterministic initialization: hidden-layer weights uniform in
    /// [-a, a] with a = sqrt(1 / fan_in), hidden biases zero, and the final
    /// field-producing layer all zero so the initial prediction is exactly
    /// the zero field.
    pub fn init(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch.stage_layout();
        let mut params = vec![T::ZERO; arch.param_count()];
        let per_stage = arch.stage_param_count();
        for stage in 0..arch.cascade_stages {
            let base = stage * per_stage;
            for layer in &layers {
                if !layer.lrelu {
                    continue; // final layer stays zero
                }
                let a = (1.0 / (layer.in_ch * KERNEL_VOLUME) as f64).sqrt();
                for w in &mut params[base + layer.w_off..base + layer.w_off + layer.weight_len()] {
                    *w = T::from_f64(rng.gen_range(-a..a));
                }
            }
        }
        Ok(Network { arch, params, seed, provenance: Provenance::None })
    }

    pub(crate) fn from_parts(
        arch: ArchitectureSpec,
        params: Vec<T>,
        seed: u64,
        provenance: Provenance,
    ) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimMismatch(format!(
                "parameter blob has {} values, architecture needs {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Network { arch, params, seed, provenance })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[T]) {
        assert_eq!(params.len(), self.params.len(), "parameter blob length mismatch");
        self.params.copy_from_slice(params);
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, p: Provenance) {
        self.provenance = p;
    }

    fn layer_weights<'a>(&'a self, stage: usize, layer: &LayerShape) -> (&'a [T], &'a [T]) {
        let base = stage * self.arch.stage_param_count();
        let w = &self.params[base + layer.w_off..base + layer.w_off + layer.weight_len()];
        let b = &self.params[base + layer.b_off..base + layer.b_off + layer.out_ch];
        (w, b)
    }

    /// One stage's layer stack on an already-concatenated input.
    fn stage_forward(&self, stage: usize, x: Tensor<T>, keep: bool) -> (Tensor<T>, Option<StageCache<T>>) {
        let layers = self.arch.stage_layout();
        let slope = T::from_f64(LEAKY_SLOPE);
        match self.arch.kind {
            ArchKind::EncoderDecoder => {
                let run = |i: usize, inp: &Tensor<T>| -> Tensor<T> {
                    let l = &layers[i];
                    let (w, b) = self.layer_weights(stage, l);
                    let mut out = ops::conv3d_forward(inp, w, b, l.out_ch, l.stride);
                    if l.lrelu {
                        ops::leaky_relu_forward(&mut out, slope);
                    }
                    out
                };
                let e0 = run(0, &x);
                let d1 = run(1, &e0);
                let b2 = run(2, &d1);
                let up = ops::upsample2x_forward(&b2, x.dims);
                let cat = Tensor::concat(&up, &e0);
                let d3 = run(3, &cat);
                let out = run(4, &d3);
                let cache = keep.then(|| StageCache {
                    x,
                    acts: vec![e0, d1, b2, d3, out.clone()],
                    cat: Some(cat),
                    u_stage: out.clone(),
                    u_before: None,
                });
                (out, cache)
            }
            _ => {
                let mut acts = Vec::with_capacity(layers.len());
                let mut h = x.clone();
                for l in &layers {
                    let (w, b) = self.layer_weights(stage, l);
                    let mut out = ops::conv3d_forward(&h, w, b, l.out_ch, l.stride);
                    if l.lrelu {
                        ops::leaky_relu_forward(&mut out, slope);
                    }
                    h = out;
                    if keep {
                        acts.push(h.clone());
                    }
                }
                let cache = keep.then(|| StageCache {
                    x,
                    acts,
                    cat: None,
                    u_stage: h.clone(),
                    u_before: None,
                });
                (h, cache)
            }
        }
    }

    /// Backward through one stage. Accumulates parameter gradients into the
    /// stage's slice of `grad` and returns the gradient with respect to the
    /// stage input when `want_dx` is set.
    fn stage_backward(
        &self,
        stage: usize,
        cache: &StageCache<T>,
        du: &Tensor<T>,
        grad: &mut [T],
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let layers = self.arch.stage_layout();
        let slope = T::from_f64(LEAKY_SLOPE);
        let base = stage * self.arch.stage_param_count();
        let store = |l: &LayerShape, dw: Vec<T>, db: Vec<T>, grad: &mut [T]| {
            for (g, v) in grad[base + l.w_off..].iter_mut().zip(&dw) {
                *g += *v;
            }
            for (g, v) in grad[base + l.b_off..].iter_mut().zip(&db) {
                *g += *v;
            }
        };
        match self.arch.kind {
            ArchKind::EncoderDecoder => {
                let (e0, d1, b2, d3) = (&cache.acts[0], &cache.acts[1], &cache.acts[2], &cache.acts[3]);
                let cat = cache.cat.as_ref().expect("encoder-decoder cache holds cat");
                let half = b2.dims;

                let (w4, _) = self.layer_weights(stage, &layers[4]);
                let (dd3, dw, db) = ops::conv3d_backward(d3, w4, du, 1, true);
                store(&layers[4], dw, db, grad);
                let mut dd3 = dd3.expect("dinput requested");
                ops::leaky_relu_backward(d3, &mut dd3, slope);

                let (w3, _) = self.layer_weights(stage, &layers[3]);
                let (dcat, dw, db) = ops::conv3d_backward(cat, w3, &dd3, 1, true);
                store(&layers[3], dw, db, grad);
                let (dup, de0_skip) = dcat.expect("dinput requested").split(16);

                let mut db2 = ops::upsample2x_backward(&dup, half);
                ops::leaky_relu_backward(b2, &mut db2, slope);
                let (w2, _) = self.layer_weights(stage, &layers[2]);
                let (dd1, dw, db) = ops::conv3d_backward(d1, w2, &db2, 1, true);
                store(&layers[2], dw, db, grad);
                let mut dd1 = dd1.expect("dinput requested");
                ops::leaky_relu_backward(d1, &mut dd1, slope);

                let (w1, _) = self.layer_weights(stage, &layers[1]);
                let (de0_conv, dw, db) = ops::conv3d_backward(e0, w1, &dd1, 2, true);
                store(&layers[1], dw, db, grad);
                let mut de0 = de0_conv.expect("dinput requested");
                for (g, s) in de0.data.iter_mut().zip(&de0_skip.data) {
                    *g += *s;
                }
                ops::leaky_relu_backward(e0, &mut de0, slope);

                let (w0, _) = self.layer_weights(stage, &layers[0]);
                let (dx, dw, db) = ops::conv3d_backward(&cache.x, w0, &de0, 1, want_dx);
                store(&layers[0], dw, db, grad);
                dx
            }
            _ => {
                let mut d = du.clone();
                for (i, l) in layers.iter().enumerate().rev() {
                    if l.lrelu {
                        ops::leaky_relu_backward(&cache.acts[i], &mut d, slope);
                    }
                    let inp = if i == 0 { &cache.x } else { &cache.acts[i - 1] };
                    let (w, _) = self.layer_weights(stage, l);
                    let want = i > 0 || want_dx;
                    let (dinp, dw, db) = ops::conv3d_backward(inp, w, &d, l.stride, want);
                    store(l, dw, db, grad);
                    match dinp {
                        Some(next) => d = next,
                        None => return None,
                    }
                }
                Some(d)
            }
        }
    }

    /// Cascade forward on tensors. Returns the accumulated field and, when
    /// `keep` is set, the per-stage caches needed for the backward pass.
    fn forward_tensors(
        &self,
        moving: &Tensor<T>,
        fixed: &Tensor<T>,
        keep: bool,
    ) -> (Tensor<T>, Vec<StageCache<T>>) {
        let stages = self.arch.cascade_stages;
        let mut caches = Vec::with_capacity(if keep { stages } else { 0 });
        let mut u_total: Option<Tensor<T>> = None;
        for k in 0..stages {
            let warped = match &u_total {
                None => moving.clone(),
                Some(u) => ops::warp_forward(moving, u),
            };
            let x = Tensor::concat(&warped, fixed);
            let (u_k, cache) = self.stage_forward(k, x, keep);
            let u_before = u_total.take();
            let u_new = match &u_before {
                None => u_k.clone(),
                Some(prev) => ops::compose_forward(prev, &u_k),
            };
            if let Some(mut c) = cache {
                c.u_stage = u_k;
                c.u_before = u_before;
                caches.push(c);
            }
            u_total = Some(u_new);
        }
        (u_total.expect("cascade_stages >= 1"), caches)
    }

    fn check_pair(&self, moving: &Volume, fixed: &Volume) -> Result<()> {
        if moving.dims() != fixed.dims() {
            return Err(Error::DimMismatch(format!(
                "moving grid {:?} vs fixed grid {:?}",
                moving.dims().as_array(),
                fixed.dims().as_array()
            )));
        }
        self.arch.check_dims(moving.dims())
    }

    /// Predict the displacement field for a (moving, fixed) pair.
    pub fn forward(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        self.check_pair(moving, fixed)?;
        let mv = Tensor::<T>::from_volume(moving);
        let fx = Tensor::<T>::from_volume(fixed);
        let (u, _) = self.forward_tensors(&mv, &fx, false);
        Ok(DisplacementField::from_tensor(&u))
    }

    /// Total loss `sim(fixed, warp(moving, u)) + lambda * smoothness(u)` and
    /// its gradient with respect to every parameter. A non-finite loss is a
    /// divergence error; the caller aborts the run.
    pub fn loss_and_gradients(
        &self,
        moving: &Volume,
        fixed: &Volume,
        cfg: &LossConfig,
    ) -> Result<(f64, Vec<T>)> {
        self.check_pair(moving, fixed)?;
        cfg.validate()?;
        let mv = Tensor::<T>::from_volume(moving);
        let fx = Tensor::<T>::from_volume(fixed);
        self.loss_and_gradients_tensors(&mv, &fx, cfg)
    }

    pub(crate) fn loss_and_gradients_tensors(
        &self,
        mv: &Tensor<T>,
        fx: &Tensor<T>,
        cfg: &LossConfig,
    ) -> Result<(f64, Vec<T>)> {
        let lambda = T::from_f64(cfg.lambda);
        let (u_final, caches) = self.forward_tensors(mv, fx, true);
        let warped = ops::warp_forward(mv, &u_final);
        let sim = loss::sim_forward(&warped, fx, cfg);
        let smooth = ops::smoothness_forward(&u_final);
        let total = sim + lambda * smooth;
        if !total.is_finite() {
            return Err(Error::Diverged {
                what: "loss".into(),
                context: format!(
                    "similarity {}, smoothness {}",
                    sim.to_f64(),
                    smooth.to_f64()
                ),
            });
        }

        let mut grad = vec![T::ZERO; self.params.len()];
        let dwarped = loss::sim_backward(&warped, fx, cfg, T::ONE);
        let (_, mut du_total) = ops::warp_backward(mv, &u_final, &dwarped);
        if cfg.lambda != 0.0 {
            let dsmooth = ops::smoothness_backward(&u_final, lambda);
            for (g, s) in du_total.data.iter_mut().zip(&dsmooth.data) {
                *g += *s;
            }
        }

        for k in (0..self.arch.cascade_stages).rev() {
            let cache = &caches[k];
            let (du_prev, du_k) = match &cache.u_before {
                None => (None, du_total),
                Some(prev) => {
                    let (dprev, dk) = ops::compose_backward(prev, &cache.u_stage, &du_total);
                    (Some(dprev), dk)
                }
            };
            let dx = self.stage_backward(k, cache, &du_k, &mut grad, k > 0);
            du_total = match du_prev {
                None => break,
                Some(mut dprev) => {
                    let dx = dx.expect("dx requested for k > 0");
                    let (dwarped_in, _dfixed) = dx.split(1);
                    let prev = cache.u_before.as_ref().expect("k > 0 has a predecessor field");
                    let (_, du_warp) = ops::warp_backward(mv, prev, &dwarped_in);
                    for (g, s) in dprev.data.iter_mut().zip(&du_warp.data) {
                        *g += *s;
                    }
                    dprev
                }
            };
        }
        Ok((total.to_f64(), grad))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: `<name>.ckpt.json` manifest + `<name>.ckpt.raw` f32le blob.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct LayerHeader {
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    activation: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    cascade_stages: usize,
    layers: Vec<LayerHeader>,
    seed: u64,
    provenance: Provenance,
    blob_len_bytes: usize,
    data: String,
}

fn layer_headers(arch: &ArchitectureSpec) -> Vec<LayerHeader> {
    arch.stage_layout()
        .iter()
        .map(|l| LayerHeader {
            in_ch: l.in_ch,
            out_ch: l.out_ch,
            stride: l.stride,
            activation: if l.lrelu { "leaky_relu".into() } else { "linear".into() },
        })
        .collect()
}

impl Network<f32> {
    /// Write the `<name>.ckpt.json` + `<name>.ckpt.raw` pair. Round-trips
    /// bit-exactly through [`Network::load`].
    pub fn save(&self, json_path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            kind: self.arch.kind.name().into(),
            cascade_stages: self.arch.cascade_stages,
            layers: layer_headers(&self.arch),
            seed: self.seed,
            provenance: self.provenance,
            blob_len_bytes: self.params.len() * 4,
            data: fileio::payload_name_for(json_path)?,
        };
        fileio::write_pair(json_path, &header, &fileio::f32s_to_le_bytes(&self.params))
    }

    /// Load a checkpoint pair, validating the architecture descriptor, blob
    /// length, and value finiteness.
    pub fn load(json_path: &Path) -> Result<Network<f32>> {
        let header: CheckpointHeader = fileio::read_header(json_path)?;
        let arch = match header.kind.as_str() {
            "plain-cnn" => ArchitectureSpec::plain_cnn(header.cascade_stages),
            "encoder-decoder" => ArchitectureSpec::encoder_decoder(header.cascade_stages),
            "chain" => {
                if header.layers.is_empty() {
                    return Err(Error::format(json_path, "chain checkpoint lists no layers"));
                }
                let widths = header.layers[..header.layers.len() - 1]
                    .iter()
                    .map(|l| l.out_ch)
                    .collect();
                ArchitectureSpec::custom_chain(widths, header.cascade_stages)
            }
            other => {
                return Err(Error::format(json_path, format!("unknown network kind {other:?}")));
            }
        };
        arch.validate().map_err(|e| Error::format(json_path, e.to_string()))?;
        if layer_headers(&arch) != header.layers {
            return Err(Error::format(
                json_path,
                format!("layer table does not match a {} network", header.kind),
            ));
        }
        let expected_bytes = arch.param_count() * 4;
        if header.blob_len_bytes != expected_bytes {
            return Err(Error::format(
                json_path,
                format!(
                    "blob_len_bytes {} does not match architecture ({} expected)",
                    header.blob_len_bytes, expected_bytes
                ),
            ));
        }
        let bytes = fileio::read_payload(json_path, &header.data, expected_bytes)?;
        let params = fileio::le_bytes_to_f32s(&bytes);
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::format(json_path, "parameter blob contains non-finite values"));
        }
        Network::from_parts(arch, params, header.seed, header.provenance)
            .map_err(|e| Error::format(json_path, e.to_string()))
    }
}
