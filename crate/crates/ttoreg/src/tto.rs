//! Test-time optimization: refine a registration model on a single image
//! pair at inference time.
//!
//! Three modes cover the comparison matrix: `scratch` optimizes a freshly
//! initialized network, `inter` warm-starts from a population model to
//! individualize it for a new subject, and `intra` warm-starts from that
//! subject's previous-fraction result. A run repeats loss evaluation and one
//! Adam step until the plateau rule fires, the iteration cap is reached, or
//! the loss turns non-finite; divergence preserves the partial trace instead
//! of erasing the run.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, DisplacementField};
use crate::loss::LossConfig;
use crate::network::{ArchitectureSpec, Network, Provenance};
use crate::optim::{
    adam_step, check_convergence, write_trace_csv, ConvergenceRule, OptimizerSettings,
    OptimizerState, TracePoint,
};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtoMode {
    /// Optimize a freshly initialized network.
    Scratch,
    /// Warm-start from the population model (new subject).
    Inter,
    /// Warm-start from the subject's previous-fraction result.
    Intra,
}

impl TtoMode {
    pub fn name(self) -> &'static str {
        match self {
            TtoMode::Scratch => "scratch",
            TtoMode::Inter => "inter",
            TtoMode::Intra => "intra",
        }
    }

    pub fn parse(s: &str) -> Result<TtoMode> {
        match s {
            "scratch" => Ok(TtoMode::Scratch),
            "inter" => Ok(TtoMode::Inter),
            "intra" => Ok(TtoMode::Intra),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?}; expected scratch, inter, or intra"
            ))),
        }
    }
}

/// Starting point of a run: an existing checkpoint or a fresh initialization.
pub enum TtoStart<'a> {
    Warm(&'a Network<f32>),
    Fresh { arch: &'a ArchitectureSpec, seed: u64 },
}

const PURPOSE_SCRATCH: u64 = 0x5343_5241_5443_4800;

/// Initialization seed for the `run_index`-th scratch run of a batch, so
/// scratch-vs-warm comparisons differ only in the starting parameter blob.
pub fn scratch_seed(base: u64, run_index: u64) -> u64 {
    crate::synthetic::derive_seed(base, PURPOSE_SCRATCH, run_index, 0)
}

/// Complete record of one test-time optimization run.
#[derive(Debug, Clone)]
pub struct TtoRun {
    pub mode: TtoMode,
    /// Provenance of the starting checkpoint (`None` for scratch).
    pub start_provenance: Provenance,
    /// Loss before each step, in iteration order.
    pub trace: Vec<TracePoint>,
    /// Optimization iterations performed; always equals `trace.len()`.
    pub iterations: usize,
    /// Wall-clock of the loss+step loop only, excluding I/O.
    pub wall_ms: f64,
    pub converged: bool,
    pub capped: bool,
    /// The loss turned non-finite; `trace` holds the iterations completed
    /// before the abort.
    pub diverged: bool,
    /// Best loss seen along the trace, and the 1-based iteration that
    /// produced it. `None` when the first evaluation already diverged.
    pub best_loss: Option<f64>,
    pub best_iteration: Option<usize>,
    /// Parameter snapshot with the best (not last) loss.
    pub result: Network<f32>,
    pub final_field: DisplacementField,
}

/// The serializable subset of a run record (`run.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TtoMode,
    pub start_provenance: Provenance,
    pub result_provenance: Provenance,
    pub iterations: usize,
    pub wall_ms: f64,
    pub converged: bool,
    pub capped: bool,
    pub diverged: bool,
    pub initial_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub best_iteration: Option<usize>,
}

impl TtoRun {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            mode: self.mode,
            start_provenance: self.start_provenance,
            result_provenance: self.result.provenance(),
            iterations: self.iterations,
            wall_ms: self.wall_ms,
            converged: self.converged,
            capped: self.capped,
            diverged: self.diverged,
            initial_loss: self.trace.first().map(|p| p.loss),
            best_loss: self.best_loss,
            best_iteration: self.best_iteration,
        }
    }
}

/// Check that the starting checkpoint matches the requested mode and return
/// the working network plus the recorded start provenance.
fn resolve_start(start: TtoStart, mode: TtoMode) -> Result<(Network<f32>, Provenance)> {
    match (mode, start) {
        (TtoMode::Scratch, TtoStart::Fresh { arch, seed }) => {
            Ok((Network::init(arch.clone(), seed)?, Provenance::None))
        }
        (TtoMode::Scratch, TtoStart::Warm(_)) => Err(Error::Invalid(
            "scratch mode requires a fresh start, not a warm checkpoint".into(),
        )),
        (_, TtoStart::Fresh { .. }) => Err(Error::Invalid(format!(
            "{} mode requires a warm-start checkpoint",
            mode.name()
        ))),
        (TtoMode::Inter, TtoStart::Warm(net)) => {
            if net.provenance() != Provenance::Population {
                return Err(Error::Invalid(format!(
                    "inter mode expects a population checkpoint, got {}",
                    net.provenance().name()
                )));
            }
            Ok((net.clone(), net.provenance()))
        }
        (TtoMode::Intra, TtoStart::Warm(net)) => {
            if !matches!(net.provenance(), Provenance::Individualized | Provenance::Fractional) {
                return Err(Error::Invalid(format!(
                    "intra mode expects an individualized or fractional checkpoint, got {}",
                    net.provenance().name()
                )));
            }
            Ok((net.clone(), net.provenance()))
        }
    }
}

/// Optimize one model on one image pair. The start checkpoint is never
/// mutated; the returned model is the best-loss parameter snapshot, tagged
/// `individualized` (scratch/inter) or `fractional` (intra).
pub fn tto_run(
    start: TtoStart,
    mode: TtoMode,
    moving: &Volume,
    fixed: &Volume,
    loss_cfg: &LossConfig,
    opt: &OptimizerSettings,
    rule: &ConvergenceRule,
) -> Result<TtoRun> {
    loss_cfg.validate()?;
    opt.validate()?;
    rule.validate()?;
    let (mut net, start_provenance) = resolve_start(start, mode)?;
    let start_params = net.params().to_vec();
    let mut state = OptimizerState::<f32>::new(start_params.len(), opt.clone());

    let mut trace: Vec<TracePoint> = Vec::new();
    let mut losses: Vec<f64> = Vec::new();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut converged = false;
    let mut capped = false;
    let mut diverged = false;
    let timer = Instant::now();
    for t in 1..=rule.max_iters {
        let (loss, grads) = match net.loss_and_gradients(moving, fixed, loss_cfg) {
            Ok(pair) => pair,
            Err(Error::Diverged { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        trace.push(TracePoint { iteration: t, loss, wall_ms: timer.elapsed().as_secs_f64() * 1e3 });
        losses.push(loss);
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, t, net.params().to_vec()));
        }
        match adam_step(net.params_mut(), &grads, &mut state) {
            Ok(()) => {}
            Err(Error::Diverged { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        let verdict = check_convergence(&losses, rule);
        if verdict.converged {
            converged = true;
            break;
        }
        if verdict.capped {
            capped = true;
            break;
        }
    }
    let wall_ms = timer.elapsed().as_secs_f64() * 1e3;
    if !converged && !diverged && trace.len() >= rule.max_iters {
        capped = true;
    }

    let result_provenance = match mode {
        TtoMode::Scratch | TtoMode::Inter => Provenance::Individualized,
        TtoMode::Intra => Provenance::Fractional,
    };
    let mut result = net;
    match &best {
        Some((_, _, params)) => result.set_params(params),
        None => result.set_params(&start_params),
    }
    result.set_provenance(result_provenance);
    let final_field = result.forward(moving, fixed)?;

    Ok(TtoRun {
        mode,
        start_provenance,
        iterations: trace.len(),
        trace,
        wall_ms,
        converged,
        capped,
        diverged,
        best_loss: best.as_ref().map(|(l, _, _)| *l),
        best_iteration: best.as_ref().map(|(_, t, _)| *t),
        result,
        final_field,
    })
}

/// Run a subject's fraction chain: fraction 1 individualizes the population
/// model (inter mode); each later fraction refines the previous fraction's
/// result (intra mode). The chain halts at the first diverged run, returning
/// the runs completed up to and including it.
pub fn run_fraction_sequence(
    population: &Network<f32>,
    pairs: &[(&Volume, &Volume)],
    loss_cfg: &LossConfig,
    opt: &OptimizerSettings,
    rule: &ConvergenceRule,
) -> Result<Vec<TtoRun>> {
    if pairs.is_empty() {
        return Err(Error::Invalid("fraction sequence needs at least one image pair".into()));
    }
    if population.provenance() != Provenance::Population {
        return Err(Error::Invalid(format!(
            "fraction sequence starts from a population checkpoint, got {}",
            population.provenance().name()
        )));
    }
    let mut runs: Vec<TtoRun> = Vec::with_capacity(pairs.len());
    for (k, (moving, fixed)) in pairs.iter().enumerate() {
        let run = if k == 0 {
            tto_run(TtoStart::Warm(population), TtoMode::Inter, moving, fixed, loss_cfg, opt, rule)?
        } else {
            let prev = &runs[k - 1].result;
            tto_run(TtoStart::Warm(prev), TtoMode::Intra, moving, fixed, loss_cfg, opt, rule)?
        };
        let stop = run.diverged;
        runs.push(run);
        if stop {
            break;
        }
    }
    Ok(runs)
}

/// Persist one run: `run.json`, `trace.csv`, the result checkpoint pair, and
/// the final displacement field.
pub fn write_run_dir(run: &TtoRun, dir: &Path, spacing_mm: [f32; 3]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&run.summary())
        .map_err(|e| Error::format(&path, format!("run encode: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_trace_csv(&dir.join("trace.csv"), &run.trace)?;
    run.result.save(&dir.join("checkpoint.json"))?;
    field::save_field(&run.final_field, spacing_mm, &dir.join("final_field.json"))
}
