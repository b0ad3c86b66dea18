//! Command-line front end: run configuration (TOML file plus flag
//! overrides), the `synth` / `train` / `tto` / `eval` / `report` / `bench`
//! commands, and deterministic fan-out of per-subject runs across workers.
//!
//! Every command is reproducible given the same config and seed: outputs are
//! placed only under the configured output directory, and all randomness
//! flows from the single master seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field;
use crate::loss::LossConfig;
use crate::metrics::{self, registration_scores, ScoreSummary, SubjectScore};
use crate::network::{ArchitectureSpec, Network, Provenance};
use crate::optim::{train_population, ConvergenceRule, OptimizerSettings, TrainingPair};
use crate::report::{
    axial_slice, bar_chart, histogram, hstack, overlay_contour, save_png, upscale,
    write_histogram_csv, CONTOUR_PREDICTED, CONTOUR_TRUTH,
};
use crate::synthetic::{self, CohortSpec, Subject};
use crate::tto::{self, tto_run, RunSummary, TtoMode, TtoRun, TtoStart};
use crate::volume::StructureSet;

/// Network family selection as written in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// "plain-cnn", "encoder-decoder", or "chain".
    pub kind: String,
    /// Hidden widths for the "chain" family; ignored by the other kinds.
    pub widths: Vec<usize>,
    pub cascade_stages: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { kind: "encoder-decoder".into(), widths: vec![8, 8], cascade_stages: 1 }
    }
}

impl ArchConfig {
    pub fn to_spec(&self) -> Result<ArchitectureSpec> {
        let spec = match self.kind.as_str() {
            "plain-cnn" => ArchitectureSpec::plain_cnn(self.cascade_stages),
            "encoder-decoder" => ArchitectureSpec::encoder_decoder(self.cascade_stages),
            "chain" => ArchitectureSpec::custom_chain(self.widths.clone(), self.cascade_stages),
            other => {
                return Err(Error::Invalid(format!(
                    "unknown architecture kind {other:?} (expected plain-cnn, encoder-decoder, or chain)"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Full run configuration. Serialized as TOML; every field has a default so
/// a partial (or empty) config file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Experiment identifier stamped into summaries.
    pub experiment: String,
    /// Root directory that receives all outputs.
    pub out: PathBuf,
    /// Cohort directory; defaults to `<out>/cohort` when unset.
    pub cohort_dir: Option<PathBuf>,
    /// Master seed; also drives the cohort when the `--seed` flag is used.
    pub seed: u64,
    /// Worker threads for independent per-subject runs.
    pub workers: usize,
    /// Population-training epochs.
    pub epochs: usize,
    /// Iteration cap for cold-start (scratch) runs; warm runs use
    /// `convergence.max_iters`.
    pub scratch_max_iters: usize,
    pub cohort: CohortSpec,
    pub architecture: ArchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerSettings,
    pub convergence: ConvergenceRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "desk".into(),
            out: PathBuf::from("out"),
            cohort_dir: None,
            seed: 42,
            workers: 1,
            epochs: 8,
            scratch_max_iters: 2000,
            cohort: CohortSpec::default(),
            architecture: ArchConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerSettings::default(),
            convergence: ConvergenceRule::warm(),
        }
    }
}

impl RunConfig {
    /// Cohort directory after applying the `<out>/cohort` default.
    pub fn cohort_path(&self) -> PathBuf {
        self.cohort_dir.clone().unwrap_or_else(|| self.out.join("cohort"))
    }

    /// Convergence rule used for cold-start runs: same thresholds, higher cap.
    pub fn scratch_rule(&self) -> ConvergenceRule {
        ConvergenceRule { max_iters: self.scratch_max_iters, ..self.convergence }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::Invalid("experiment id must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Invalid("workers must be >= 1".into()));
        }
        self.cohort.validate()?;
        self.architecture.to_spec()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.convergence.validate()?;
        self.scratch_rule().validate()?;
        Ok(())
    }
}

/// Parse a TOML config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, format!("config parse: {e}")))
}

/// Write a config as TOML (used to stamp the effective config next to
/// outputs).
pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::format(path, format!("config encode: {e}")))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flags shared by every command. Flags override config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// TOML config file; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides both the run seed and the cohort seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; overrides the config file.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl CommonFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.cohort.seed = seed;
        }
        if let Some(workers) = self.workers {
            cfg.workers = workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TtoFlags {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Optimization mode: scratch, inter, or intra.
    #[arg(long)]
    pub mode: String,
    /// Warm-start source: population checkpoint file (inter) or the output
    /// directory of a previous per-subject run (intra).
    #[arg(long)]
    pub start: Option<PathBuf>,
    /// Learning-rate override for this invocation.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Run tree produced by the tto command.
    #[arg(long)]
    pub runs: PathBuf,
    /// Baseline for the comparison columns: a population checkpoint file, or
    /// a directory of per-subject runs holding each subject's starting model.
    #[arg(long)]
    pub population: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportFlags {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Run tree produced by the tto command.
    #[arg(long)]
    pub runs: PathBuf,
}

#[derive(Debug, Parser)]
#[command(
    name = "ttoreg",
    version,
    about = "Deformable registration: population training with per-subject and per-fraction refinement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic cohort on disk.
    Synth(CommonFlags),
    /// Train the population model on training subjects' first fractions.
    Train(CommonFlags),
    /// Optimize per test subject (scratch, inter, or intra mode).
    Tto(TtoFlags),
    /// Score run outputs against ground-truth fraction masks.
    Eval(EvalFlags),
    /// Render montages, histograms, and a run summary.
    Report(ReportFlags),
    /// Run the three scripted experiments with pass/fail assertions.
    Bench(CommonFlags),
}

/// Entry point used by the binary: parses `std::env` arguments.
pub fn run() -> Result<()> {
    run_with(std::env::args_os())
}

/// Parse the given arguments and execute the selected command.
pub fn run_with<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Invalid(format!("argument parse: {e}"))),
    };
    match cli.cmd {
        Cmd::Synth(flags) => {
            let cfg = flags.resolve()?;
            cmd_synth(&cfg).map(|_| ())
        }
        Cmd::Train(flags) => {
            let cfg = flags.resolve()?;
            cmd_train(&cfg).map(|_| ())
        }
        Cmd::Tto(flags) => {
            let mut cfg = flags.common.resolve()?;
            if let Some(lr) = flags.lr {
                cfg.optimizer.lr = lr;
                cfg.optimizer.validate()?;
            }
            let mode = TtoMode::parse(&flags.mode)?;
            cmd_tto(&cfg, mode, flags.start.as_deref()).map(|_| ())
        }
        Cmd::Eval(flags) => {
            let cfg = flags.common.resolve()?;
            cmd_eval(&cfg, &flags.runs, flags.population.as_deref())
        }
        Cmd::Report(flags) => {
            let cfg = flags.common.resolve()?;
            cmd_report(&cfg, &flags.runs)
        }
        Cmd::Bench(flags) => {
            let cfg = flags.resolve()?;
            crate::benchmark::cmd_bench(&cfg)
        }
    }
}

/// Schedule `n` independent jobs over up to `workers` threads. Results land
/// at their job index, so the output order never depends on scheduling.
pub fn run_parallel<T, F>(n: usize, workers: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = job(i);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    let slots = slots.into_inner().unwrap();
    slots.into_iter().map(|slot| slot.expect("every job index filled")).collect()
}

/// Generate the configured cohort and write it transactionally: the tree is
/// built under a `.partial` sibling and renamed into place only when
/// complete, so a failure never leaves a half-written cohort.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dst = cfg.cohort_path();
    let cohort = synthetic::generate_cohort(&cfg.cohort)?;
    let name = dst
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("cohort path {} has no directory name", dst.display())))?;
    let parent = match dst.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = parent.join(format!("{name}.partial"));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    if let Err(e) = synthetic::write_cohort(&cohort, &staging) {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dst.exists() {
        std::fs::remove_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
    }
    std::fs::rename(&staging, &dst).map_err(|e| Error::io(&dst, e))?;
    println!(
        "wrote cohort: {} subjects ({} train, {} test) at {}",
        cohort.subjects.len(),
        cohort.training().count(),
        cohort.test().count(),
        dst.display()
    );
    Ok(dst)
}

/// Train the population model on every training subject's planning image
/// paired with its first fraction. Writes `train/checkpoint.json` (+ raw
/// payload) and the per-epoch loss trace `train/epochs.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let cohort = synthetic::load_cohort(&cfg.cohort_path())?;
    let pairs: Vec<TrainingPair> = cohort
        .training()
        .map(|s| {
            if s.fractions.is_empty() {
                return Err(Error::Invalid(format!("subject {} has no fractions", s.id)));
            }
            Ok(TrainingPair {
                label: s.id.clone(),
                moving: s.planning.clone(),
                fixed: s.fractions[0].image.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let arch = cfg.architecture.to_spec()?;
    let (net, epoch_trace) =
        train_population(&pairs, arch, &cfg.loss, &cfg.optimizer, cfg.epochs, cfg.seed)?;
    let dir = cfg.out.join("train");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = dir.join("checkpoint.json");
    net.save(&ckpt)?;
    crate::optim::write_trace_csv(&dir.join("epochs.csv"), &epoch_trace)?;
    save_config(cfg, &dir.join("config.toml"))?;
    println!(
        "trained population model: {} pairs x {} epochs -> {}",
        pairs.len(),
        cfg.epochs,
        ckpt.display()
    );
    Ok(ckpt)
}

/// One row of the tto summary CSV.
struct TtoRow {
    subject: String,
    fraction: usize,
    mode: TtoMode,
    status: String,
    summary: Option<RunSummary>,
    final_loss: Option<f64>,
}

fn opt_num<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_tto_summary(path: &Path, rows: &[TtoRow]) -> Result<()> {
    let mut text = String::from(
        "subject,fraction,mode,status,iterations,wall_ms,initial_loss,final_loss,best_loss,converged,capped,diverged\n",
    );
    for row in rows {
        let s = row.summary.as_ref();
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.subject,
            row.fraction,
            row.mode.name(),
            row.status,
            opt_num(s.map(|s| s.iterations)),
            opt_num(s.map(|s| s.wall_ms)),
            opt_num(s.and_then(|s| s.initial_loss)),
            opt_num(row.final_loss),
            opt_num(s.and_then(|s| s.best_loss)),
            opt_num(s.map(|s| s.converged)),
            opt_num(s.map(|s| s.capped)),
            opt_num(s.map(|s| s.diverged)),
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The per-fraction runs produced for one subject, or the failure that
/// stopped them.
type SubjectRuns = Result<Vec<(usize, TtoRun)>>;

fn subject_runs(
    cfg: &RunConfig,
    mode: TtoMode,
    subject: &Subject,
    subject_index: usize,
    population: Option<&Network<f32>>,
    start_dir: Option<&Path>,
) -> SubjectRuns {
    if subject.fractions.is_empty() {
        return Err(Error::Invalid(format!("subject {} has no fractions", subject.id)));
    }
    match mode {
        TtoMode::Scratch | TtoMode::Inter => {
            let fixed = &subject.fractions[0].image;
            let run = match mode {
                TtoMode::Scratch => {
                    let arch = cfg.architecture.to_spec()?;
                    let start = TtoStart::Fresh {
                        arch: &arch,
                        seed: tto::scratch_seed(cfg.seed, subject_index as u64),
                    };
                    tto_run(
                        start,
                        mode,
                        &subject.planning,
                        fixed,
                        &cfg.loss,
                        &cfg.optimizer,
                        &cfg.scratch_rule(),
                    )?
                }
                TtoMode::Inter => {
                    let net = population.expect("population checkpoint resolved for inter mode");
                    tto_run(
                        TtoStart::Warm(net),
                        mode,
                        &subject.planning,
                        fixed,
                        &cfg.loss,
                        &cfg.optimizer,
                        &cfg.convergence,
                    )?
                }
                TtoMode::Intra => unreachable!(),
            };
            Ok(vec![(1, run)])
        }
        TtoMode::Intra => {
            if subject.fractions.len() < 2 {
                return Err(Error::Invalid(format!(
                    "subject {}: intra mode needs at least 2 fractions, cohort has {}",
                    subject.id,
                    subject.fractions.len()
                )));
            }
            let dir = start_dir.expect("start directory resolved for intra mode");
            let ckpt = dir.join(&subject.id).join("f1").join("checkpoint.json");
            let individualized = Network::load(&ckpt)?;
            let mut runs: Vec<(usize, TtoRun)> = Vec::new();
            for k in 2..=subject.fractions.len() {
                let run = {
                    let start = match runs.last() {
                        Some((_, prev)) => &prev.result,
                        None => &individualized,
                    };
                    tto_run(
                        TtoStart::Warm(start),
                        TtoMode::Intra,
                        &subject.planning,
                        &subject.fractions[k - 1].image,
                        &cfg.loss,
                        &cfg.optimizer,
                        &cfg.convergence,
                    )?
                };
                let diverged = run.diverged;
                runs.push((k, run));
                if diverged {
                    break;
                }
            }
            Ok(runs)
        }
    }
}

/// Run test-time optimization for every test subject and write the run tree
/// `<out>/tto_<mode>/<subject>/f<k>/` plus `summary.csv`. Per-subject
/// failures are isolated: they appear as `failed:<kind>` rows while the
/// remaining subjects complete normally.
pub fn cmd_tto(cfg: &RunConfig, mode: TtoMode, start: Option<&Path>) -> Result<PathBuf> {
    let cohort = synthetic::load_cohort(&cfg.cohort_path())?;
    let spacing = [1.0f32; 3];
    let population: Option<Network<f32>> = match (mode, start) {
        (TtoMode::Inter, Some(path)) => {
            let net = Network::load(path)?;
            if net.provenance() != Provenance::Population {
                return Err(Error::Invalid(format!(
                    "inter mode requires a population checkpoint, got provenance {}",
                    net.provenance().name()
                )));
            }
            Some(net)
        }
        (TtoMode::Inter, None) => {
            return Err(Error::Invalid("inter mode requires --start <population checkpoint>".into()))
        }
        (TtoMode::Intra, Some(path)) if path.is_dir() => None,
        (TtoMode::Intra, _) => {
            return Err(Error::Invalid(
                "intra mode requires --start <directory of per-subject runs>".into(),
            ))
        }
        (TtoMode::Scratch, Some(_)) => {
            return Err(Error::Invalid("scratch mode takes no --start checkpoint".into()))
        }
        (TtoMode::Scratch, None) => None,
    };
    let subjects: Vec<&Subject> = cohort.test().collect();
    if subjects.is_empty() {
        return Err(Error::Invalid("cohort has no test subjects".into()));
    }
    let outcomes: Vec<SubjectRuns> = run_parallel(subjects.len(), cfg.workers, |i| {
        subject_runs(cfg, mode, subjects[i], i, population.as_ref(), start)
    });

    let out_dir = cfg.out.join(format!("tto_{}", mode.name()));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut rows: Vec<TtoRow> = Vec::new();
    for (subject, outcome) in subjects.iter().zip(outcomes) {
        match outcome {
            Ok(runs) => {
                for (fraction, run) in runs {
                    let dir = out_dir.join(&subject.id).join(format!("f{fraction}"));
                    tto::write_run_dir(&run, &dir, spacing)?;
                    rows.push(TtoRow {
                        subject: subject.id.clone(),
                        fraction,
                        mode: run.mode,
                        status: "ok".into(),
                        final_loss: run.trace.last().map(|p| p.loss),
                        summary: Some(run.summary()),
                    });
                }
            }
            Err(e) => rows.push(TtoRow {
                subject: subject.id.clone(),
                fraction: 0,
                mode,
                status: format!("failed:{}", e.kind()),
                summary: None,
                final_loss: None,
            }),
        }
    }
    rows.sort_by(|a, b| (&a.subject, a.fraction).cmp(&(&b.subject, b.fraction)));
    write_tto_summary(&out_dir.join("summary.csv"), &rows)?;
    save_config(cfg, &out_dir.join("config.toml"))?;
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    println!(
        "tto {}: {} runs ok, {} failed -> {}",
        mode.name(),
        ok,
        rows.len() - ok,
        out_dir.display()
    );
    Ok(out_dir)
}

/// A run directory discovered under a tto output tree.
struct FoundRun {
    subject: String,
    fraction: usize,
    dir: PathBuf,
}

/// Collect `<runs>/<subject>/f<k>` directories containing a `run.json`,
/// sorted by subject then fraction.
fn find_runs(runs_dir: &Path) -> Result<Vec<FoundRun>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(runs_dir, e))?;
        let subject_dir = entry.path();
        if !subject_dir.is_dir() {
            continue;
        }
        let subject = entry.file_name().to_string_lossy().into_owned();
        let subs = std::fs::read_dir(&subject_dir).map_err(|e| Error::io(&subject_dir, e))?;
        for sub in subs {
            let sub = sub.map_err(|e| Error::io(&subject_dir, e))?;
            let name = sub.file_name().to_string_lossy().into_owned();
            let dir = sub.path();
            if !dir.is_dir() || !name.starts_with('f') {
                continue;
            }
            let Ok(fraction) = name[1..].parse::<usize>() else { continue };
            if dir.join("run.json").is_file() {
                found.push(FoundRun { subject: subject.clone(), fraction, dir });
            }
        }
    }
    found.sort_by(|a, b| (&a.subject, a.fraction).cmp(&(&b.subject, b.fraction)));
    Ok(found)
}

fn read_run_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("run decode: {e}")))
}

/// Per-run evaluation result feeding the subject table.
struct EvalRow {
    subject: String,
    fraction: usize,
    ood: bool,
    status: String,
    individualized: Option<ScoreSummary>,
    population: Option<ScoreSummary>,
}

fn push_scores(
    rows: &mut Vec<SubjectScore>,
    key: &str,
    scores: &[crate::metrics::StructureScore],
) {
    for s in scores {
        rows.push(SubjectScore { subject: key.into(), score: s.clone() });
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean over the defined entries of per-structure value pools.
#[derive(Default)]
struct Pool {
    ind_dsc: Vec<f64>,
    ind_hd: Vec<f64>,
    pop_dsc: Vec<f64>,
    pop_hd: Vec<f64>,
    n: usize,
}

/// Unrefined model whose predictions fill the comparison columns: either one
/// shared checkpoint (the population model) or, when evaluating per-fraction
/// refinements, each subject's own starting checkpoint.
enum Baseline {
    None,
    Shared(Box<Network<f32>>),
    PerSubject(PathBuf),
}

/// Score every discovered run: warp its subject's planning masks by the
/// stored final field and compare to the truth masks of the registered
/// fraction. With a baseline (a population checkpoint file, or a directory
/// of per-subject run dirs whose `f1` checkpoints are each subject's
/// starting model), the same pairs are also scored through the baseline's
/// predicted field, and the tables gain comparison and delta columns
/// (refined minus baseline, labeled `population_*`).
pub fn cmd_eval(cfg: &RunConfig, runs_dir: &Path, population: Option<&Path>) -> Result<()> {
    let cohort = synthetic::load_cohort(&cfg.cohort_path())?;
    let baseline = match population {
        None => Baseline::None,
        Some(path) if path.is_dir() => Baseline::PerSubject(path.to_path_buf()),
        Some(path) => Baseline::Shared(Box::new(Network::load(path)?)),
    };
    let found = find_runs(runs_dir)?;
    let eval_dir = runs_dir.join("eval");
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;

    let mut ind_rows: Vec<SubjectScore> = Vec::new();
    let mut pop_rows: Vec<SubjectScore> = Vec::new();
    let mut table: BTreeMap<String, Pool> = BTreeMap::new();
    let mut all = Pool::default();
    let mut subject_rows: Vec<EvalRow> = Vec::new();
    let mut seen: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();

    for run in &found {
        seen.insert(run.subject.clone());
        let Some(subject) = cohort.subjects.iter().find(|s| s.id == run.subject) else {
            subject_rows.push(EvalRow {
                subject: run.subject.clone(),
                fraction: run.fraction,
                ood: false,
                status: "unknown_subject".into(),
                individualized: None,
                population: None,
            });
            continue;
        };
        if run.fraction == 0 || run.fraction > subject.fractions.len() {
            subject_rows.push(EvalRow {
                subject: run.subject.clone(),
                fraction: run.fraction,
                ood: subject.ood,
                status: "unknown_fraction".into(),
                individualized: None,
                population: None,
            });
            continue;
        }
        let fraction = &subject.fractions[run.fraction - 1];
        let field_path = run.dir.join("final_field.json");
        let field = match field::load_field(&field_path) {
            Ok((f, _spacing)) => f,
            Err(_) => {
                subject_rows.push(EvalRow {
                    subject: run.subject.clone(),
                    fraction: run.fraction,
                    ood: subject.ood,
                    status: "missing_field".into(),
                    individualized: None,
                    population: None,
                });
                continue;
            }
        };
        let key = format!("{}/f{}", run.subject, run.fraction);
        let ind_scores = registration_scores(&subject.masks, &fraction.truth_masks, &field)?;
        push_scores(&mut ind_rows, &key, &ind_scores);
        let pop_field = match &baseline {
            Baseline::None => None,
            Baseline::Shared(net) => Some(net.forward(&subject.planning, &fraction.image)?),
            Baseline::PerSubject(root) => {
                let ckpt = root.join(&run.subject).join("f1").join("checkpoint.json");
                match Network::load(&ckpt) {
                    Ok(net) => Some(net.forward(&subject.planning, &fraction.image)?),
                    Err(_) => {
                        subject_rows.push(EvalRow {
                            subject: run.subject.clone(),
                            fraction: run.fraction,
                            ood: subject.ood,
                            status: "missing_baseline".into(),
                            individualized: Some(metrics::summarize(&ind_scores)),
                            population: None,
                        });
                        continue;
                    }
                }
            }
        };
        let pop_scores = match pop_field {
            Some(pop_field) => {
                let scores =
                    registration_scores(&subject.masks, &fraction.truth_masks, &pop_field)?;
                push_scores(&mut pop_rows, &key, &scores);
                Some(scores)
            }
            None => None,
        };
        for (i, s) in ind_scores.iter().enumerate() {
            let pool = table.entry(s.name.clone()).or_default();
            pool.n += 1;
            all.n += 1;
            if let Some(d) = s.dsc {
                pool.ind_dsc.push(d);
                all.ind_dsc.push(d);
            }
            if let Some(h) = s.hd95_mm {
                pool.ind_hd.push(h);
                all.ind_hd.push(h);
            }
            if let Some(p) = pop_scores.as_ref().map(|v| &v[i]) {
                if let Some(d) = p.dsc {
                    pool.pop_dsc.push(d);
                    all.pop_dsc.push(d);
                }
                if let Some(h) = p.hd95_mm {
                    pool.pop_hd.push(h);
                    all.pop_hd.push(h);
                }
            }
        }
        subject_rows.push(EvalRow {
            subject: run.subject.clone(),
            fraction: run.fraction,
            ood: subject.ood,
            status: "ok".into(),
            individualized: Some(metrics::summarize(&ind_scores)),
            population: pop_scores.as_deref().map(metrics::summarize),
        });
    }
    for subject in cohort.test() {
        if !seen.contains(&subject.id) {
            subject_rows.push(EvalRow {
                subject: subject.id.clone(),
                fraction: 0,
                ood: subject.ood,
                status: "missing_run".into(),
                individualized: None,
                population: None,
            });
        }
    }
    subject_rows.sort_by(|a, b| (&a.subject, a.fraction).cmp(&(&b.subject, b.fraction)));

    metrics::write_scores_csv(&eval_dir.join("scores_individualized.csv"), &ind_rows)?;
    if !matches!(baseline, Baseline::None) {
        metrics::write_scores_csv(&eval_dir.join("scores_population.csv"), &pop_rows)?;
    }

    let mut table_text = String::from(
        "structure,n,population_dsc,individualized_dsc,delta_dsc,population_hd95_mm,individualized_hd95_mm,delta_hd95_mm\n",
    );
    let mut table_row = |name: &str, pool: &Pool| {
        let ind_dsc = metrics::mean(&pool.ind_dsc);
        let ind_hd = metrics::mean(&pool.ind_hd);
        let pop_dsc = metrics::mean(&pool.pop_dsc);
        let pop_hd = metrics::mean(&pool.pop_hd);
        let delta = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        table_text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            name,
            pool.n,
            fmt_opt(pop_dsc),
            fmt_opt(ind_dsc),
            fmt_opt(delta(ind_dsc, pop_dsc)),
            fmt_opt(pop_hd),
            fmt_opt(ind_hd),
            fmt_opt(delta(ind_hd, pop_hd)),
        ));
    };
    for (name, pool) in &table {
        table_row(name, pool);
    }
    table_row("ALL", &all);
    let table_path = eval_dir.join("table.csv");
    std::fs::write(&table_path, table_text).map_err(|e| Error::io(&table_path, e))?;

    let mut subj_text = String::from(
        "subject,fraction,ood,status,dsc,hd95_mm,population_dsc,population_hd95_mm,delta_dsc,delta_hd95_mm\n",
    );
    for row in &subject_rows {
        let ind = row.individualized.as_ref();
        let pop = row.population.as_ref();
        let delta = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        let ind_dsc = ind.and_then(|s| s.mean_dsc);
        let ind_hd = ind.and_then(|s| s.mean_hd95_mm);
        let pop_dsc = pop.and_then(|s| s.mean_dsc);
        let pop_hd = pop.and_then(|s| s.mean_hd95_mm);
        subj_text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.subject,
            if row.fraction == 0 { String::new() } else { row.fraction.to_string() },
            row.ood,
            row.status,
            fmt_opt(ind_dsc),
            fmt_opt(ind_hd),
            fmt_opt(pop_dsc),
            fmt_opt(pop_hd),
            fmt_opt(delta(ind_dsc, pop_dsc)),
            fmt_opt(delta(ind_hd, pop_hd)),
        ));
    }
    let subj_path = eval_dir.join("subjects.csv");
    std::fs::write(&subj_path, subj_text).map_err(|e| Error::io(&subj_path, e))?;
    let scored = subject_rows.iter().filter(|r| r.status == "ok").count();
    println!(
        "evaluated {} runs ({} flagged) -> {}",
        scored,
        subject_rows.len() - scored,
        eval_dir.display()
    );
    Ok(())
}

/// Render one montage per discovered run (axial mid-slice: fixed image, truth
/// contours, truth + predicted contours), iteration and wall-time histograms,
/// and a single `summary.txt`. An empty run tree produces a valid zero-run
/// summary.
pub fn cmd_report(cfg: &RunConfig, runs_dir: &Path) -> Result<()> {
    let cohort = synthetic::load_cohort(&cfg.cohort_path())?;
    let found = if runs_dir.is_dir() { find_runs(runs_dir)? } else { Vec::new() };
    let report_dir = runs_dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;

    let mut iterations: Vec<f64> = Vec::new();
    let mut walls: Vec<f64> = Vec::new();
    let mut converged = 0usize;
    let mut capped = 0usize;
    let mut diverged = 0usize;
    let mut montages = 0usize;
    let mut skipped: Vec<String> = Vec::new();

    for run in &found {
        let summary = match read_run_summary(&run.dir) {
            Ok(s) => s,
            Err(_) => {
                skipped.push(format!("{}/f{}: unreadable run.json", run.subject, run.fraction));
                continue;
            }
        };
        iterations.push(summary.iterations as f64);
        walls.push(summary.wall_ms);
        converged += summary.converged as usize;
        capped += summary.capped as usize;
        diverged += summary.diverged as usize;

        let Some(subject) = cohort.subjects.iter().find(|s| s.id == run.subject) else {
            skipped.push(format!("{}/f{}: subject not in cohort", run.subject, run.fraction));
            continue;
        };
        if run.fraction == 0 || run.fraction > subject.fractions.len() {
            skipped.push(format!("{}/f{}: fraction not in cohort", run.subject, run.fraction));
            continue;
        }
        let fraction = &subject.fractions[run.fraction - 1];
        let field = match field::load_field(&run.dir.join("final_field.json")) {
            Ok((f, _)) => f,
            Err(_) => {
                skipped.push(format!("{}/f{}: missing final field", run.subject, run.fraction));
                continue;
            }
        };
        let predicted: StructureSet = StructureSet::new(
            subject
                .masks
                .structures
                .iter()
                .map(|(name, m)| Ok((name.clone(), field::warp_mask(m, &field)?)))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let z = fraction.image.dims().nz / 2;
        let base = axial_slice(&fraction.image, z);
        let mut truth_panel = base.clone();
        for (_, mask) in &fraction.truth_masks.structures {
            overlay_contour(&mut truth_panel, mask, z, CONTOUR_TRUTH);
        }
        let mut both_panel = truth_panel.clone();
        for (_, mask) in &predicted.structures {
            overlay_contour(&mut both_panel, mask, z, CONTOUR_PREDICTED);
        }
        let montage = upscale(&hstack(&[base, truth_panel, both_panel], 2), 4);
        save_png(
            &montage,
            &report_dir.join(format!("montage_{}_f{}.png", run.subject, run.fraction)),
        )?;
        montages += 1;
    }

    let iter_hist = histogram(&iterations, 10);
    let wall_hist = histogram(&walls, 10);
    write_histogram_csv(&report_dir.join("histogram_iterations.csv"), &iter_hist)?;
    write_histogram_csv(&report_dir.join("histogram_wall_ms.csv"), &wall_hist)?;
    save_png(&bar_chart(&iter_hist, 320, 200), &report_dir.join("histogram_iterations.png"))?;
    save_png(&bar_chart(&wall_hist, 320, 200), &report_dir.join("histogram_wall_ms.png"))?;

    let stat = |values: &[f64]| -> String {
        match (metrics::median(values), metrics::mean(values)) {
            (Some(med), Some(mean)) => format!("median {med:.1}, mean {mean:.1}"),
            _ => "-".into(),
        }
    };
    let mut text = String::new();
    text.push_str(&format!("runs: {}\n", iterations.len()));
    text.push_str(&format!("converged: {converged}  capped: {capped}  diverged: {diverged}\n"));
    text.push_str(&format!("iterations: {}\n", stat(&iterations)));
    text.push_str(&format!("wall_ms: {}\n", stat(&walls)));
    text.push_str(&format!("montages: {montages}\n"));
    if skipped.is_empty() {
        text.push_str("skipped: none\n");
    } else {
        for s in &skipped {
            text.push_str(&format!("skipped: {s}\n"));
        }
    }
    let summary_path = report_dir.join("summary.txt");
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    println!("report: {} montages, {} runs -> {}", montages, iterations.len(), report_dir.display());
    Ok(())
}
