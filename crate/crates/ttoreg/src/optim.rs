//! Adam optimization, the plateau-based convergence rule, and population
//! training over a cohort of image pairs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::network::{ArchitectureSpec, Network, Provenance};
use crate::ops::Tensor;
use crate::real::Real;
use crate::volume::Volume;

/// Salt mixed into the training seed for the epoch-shuffling stream so it
/// stays independent of the parameter-initialization stream.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    2e-4
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Invalid(format!("epsilon must be finite and > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-run Adam state: first/second moment per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    settings: OptimizerSettings,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(param_count: usize, settings: OptimizerSettings) -> Self {
        OptimizerState {
            settings,
            m: vec![T::ZERO; param_count],
            v: vec![T::ZERO; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, in place. A non-finite gradient
/// aborts before touching any state.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient blob length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state length mismatch");
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::Diverged {
            what: "gradient".into(),
            context: format!("optimizer step {}", state.step + 1),
        });
    }
    state.step += 1;
    let s = &state.settings;
    let b1 = T::from_f64(s.beta1);
    let b2 = T::from_f64(s.beta2);
    let one_m_b1 = T::from_f64(1.0 - s.beta1);
    let one_m_b2 = T::from_f64(1.0 - s.beta2);
    let corr1 = T::from_f64(1.0 - s.beta1.powi(state.step as i32));
    let corr2 = T::from_f64(1.0 - s.beta2.powi(state.step as i32));
    let lr = T::from_f64(s.lr);
    let eps = T::from_f64(s.epsilon);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + one_m_b1 * g;
        state.v[i] = b2 * state.v[i] + one_m_b2 * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plateau-based stopping rule: converged once `patience` consecutive
/// iterations fail to improve the running best loss by at least `min_delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRule {
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub max_iters: usize,
}

fn default_min_delta() -> f64 {
    0.005
}

fn default_patience() -> usize {
    50
}

impl ConvergenceRule {
    /// Default cap for cold-started optimization.
    pub fn scratch() -> Self {
        ConvergenceRule { min_delta: default_min_delta(), patience: default_patience(), max_iters: 2000 }
    }

    /// Default cap for warm-started optimization.
    pub fn warm() -> Self {
        ConvergenceRule { min_delta: default_min_delta(), patience: default_patience(), max_iters: 500 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_delta > 0.0) || !self.min_delta.is_finite() {
            return Err(Error::Invalid(format!("min_delta must be finite and > 0, got {}", self.min_delta)));
        }
        if self.patience == 0 {
            return Err(Error::Invalid("patience must be >= 1".into()));
        }
        if self.max_iters < self.patience {
            return Err(Error::Invalid(format!(
                "max_iters {} must be >= patience {}",
                self.max_iters, self.patience
            )));
        }
        Ok(())
    }
}

/// Outcome of applying a [`ConvergenceRule`] to a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvergenceVerdict {
    /// The plateau criterion fired.
    pub converged: bool,
    /// The trace hit the hard iteration cap without converging.
    pub capped: bool,
    /// 1-based trace position at which optimization stops (trace length if
    /// neither criterion fired).
    pub stop_iteration: usize,
}

/// Apply the plateau rule to a loss trace.
///
/// The first entry seeds the running best. Each later entry counts as "no
/// decrease" when it fails to undercut the best by at least `min_delta`;
/// `patience` consecutive no-decrease entries mean convergence. The verdict
/// for a trace prefix never changes when more entries are appended past the
/// stopping point.
pub fn check_convergence(trace: &[f64], rule: &ConvergenceRule) -> ConvergenceVerdict {
    assert!(!trace.is_empty(), "convergence check needs a nonempty trace");
    let mut best = trace[0];
    let mut streak = 0usize;
    for (t, &l) in trace.iter().enumerate().skip(1) {
        let no_decrease = l >= best || (l - best).abs() < rule.min_delta;
        if no_decrease {
            streak += 1;
        } else {
            streak = 0;
        }
        if l < best {
            best = l;
        }
        if streak >= rule.patience {
            return ConvergenceVerdict { converged: true, capped: false, stop_iteration: t + 1 };
        }
        if t + 1 >= rule.max_iters {
            return ConvergenceVerdict { converged: false, capped: true, stop_iteration: t + 1 };
        }
    }
    ConvergenceVerdict {
        converged: false,
        capped: trace.len() >= rule.max_iters,
        stop_iteration: trace.len(),
    }
}

/// One point of an optimization trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    /// 1-based iteration (or epoch, for population training).
    pub iteration: usize,
    pub loss: f64,
    /// Wall-clock milliseconds since the run started, cumulative.
    pub wall_ms: f64,
}

/// Write a trace as `iteration,loss,wall_ms` CSV.
pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut text = String::from("iteration,loss,wall_ms\n");
    for p in trace {
        text.push_str(&format!("{},{},{}\n", p.iteration, p.loss, p.wall_ms));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A labeled training pair.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub label: String,
    pub moving: Volume,
    pub fixed: Volume,
}

/// Train a population model: `epochs` passes over the cohort, one Adam step
/// per pair ("batch size of one") in a freshly shuffled order each epoch.
/// Returns the trained network (provenance `population`) and the per-epoch
/// mean-loss trace.
pub fn train_population(
    pairs: &[TrainingPair],
    arch: ArchitectureSpec,
    loss_cfg: &LossConfig,
    opt: &OptimizerSettings,
    epochs: usize,
    seed: u64,
) -> Result<(Network<f32>, Vec<TracePoint>)> {
    if pairs.is_empty() {
        return Err(Error::Invalid("training cohort is empty".into()));
    }
    loss_cfg.validate()?;
    opt.validate()?;
    let dims = pairs[0].moving.dims();
    for p in pairs {
        if p.moving.dims() != dims || p.fixed.dims() != dims {
            return Err(Error::DimMismatch(format!(
                "pair {} grid differs from the cohort grid {:?}",
                p.label,
                dims.as_array()
            )));
        }
    }
    arch.check_dims(dims)?;

    let mut net = Network::<f32>::init(arch, seed)?;
    let tensors: Vec<(Tensor<f32>, Tensor<f32>)> = pairs
        .iter()
        .map(|p| (Tensor::from_volume(&p.moving), Tensor::from_volume(&p.fixed)))
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let mut state = OptimizerState::new(net.params().len(), *opt);
    let mut trace = Vec::with_capacity(epochs);
    let started = Instant::now();

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let (mv, fx) = &tensors[idx];
            let mut step = || -> Result<f64> {
                let (loss, grads) = net.loss_and_gradients_tensors(mv, fx, loss_cfg)?;
                adam_step(net.params_mut(), &grads, &mut state)?;
                Ok(loss)
            };
            match step() {
                Ok(loss) => loss_sum += loss,
                Err(Error::Diverged { what, context }) => {
                    return Err(Error::Diverged {
                        what,
                        context: format!("epoch {epoch}, pair {}: {context}", pairs[idx].label),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        trace.push(TracePoint {
            iteration: epoch,
            loss: loss_sum / pairs.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    net.set_provenance(Provenance::Population);
    Ok((net, trace))
}
