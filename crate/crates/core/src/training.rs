//! The two-phase training protocol and the plain CL baseline loop.
//!
//! Per task, the flashback variant (FL) runs a short phase 1 from the stable
//! parameters to capture the new task, extracts the plastic base from that
//! primary model, resets to the stable parameters (re-seeding new-class rows
//! and the fresh module identically to phase 1), and trains phase 2 under
//! both the stability and plasticity terms. The CL baseline trains the same
//! task once under the stability term alone, drawing its shuffles from the
//! same streams as phase 2; with `alpha_p = 0` and `E2 = E_CL` the two
//! trajectories are bit-identical.

use crate::error::{Error, Result};
use crate::hosts::{HostConfig, HostState};
use crate::knowledge::{extract_plastic, PlasticKnowledge};
use crate::metrics::AccuracyMatrix;
use crate::model::{ArchSpec, ModelParams};
use crate::rngutil::{epoch_seed, stream_rng, subseed, Stream};
use crate::tasks::{Task, TaskStream};

/// Train in plain CL style or with the two-phase flashback protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Cl,
    Fl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Cl => "CL",
            Mode::Fl => "FL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CL" | "cl" => Ok(Mode::Cl),
            "FL" | "fl" => Ok(Mode::Fl),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

/// Flashback hyperparameters. The training budget rule expects
/// `e1 + e2 == epochs_cl` of the host; violations run but are flagged by
/// the audit.
#[derive(Clone, Debug)]
pub struct FlConfig {
    /// Phase-1 epochs (may be zero).
    pub e1: usize,
    /// Phase-2 epochs (at least one).
    pub e2: usize,
    /// Plasticity weight.
    pub alpha_p: f64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            e1: 5,
            e2: 25,
            alpha_p: 0.3,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e2 == 0 {
            return Err(Error::InvalidArgument("phase-2 epochs must be >= 1".into()));
        }
        if self.alpha_p < 0.0 {
            return Err(Error::InvalidArgument("alpha_p must be >= 0".into()));
        }
        Ok(())
    }

    pub fn respects_budget(&self, epochs_cl: usize) -> bool {
        self.e1 + self.e2 == epochs_cl
    }
}

/// Per-task training trace: epoch counts, per-epoch mean losses and the
/// knowledge units held while training the task.
#[derive(Clone, Debug, Default)]
pub struct TaskTrace {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub loss_phase1: Vec<f64>,
    pub loss_phase2: Vec<f64>,
    pub units_stable: usize,
    pub units_plastic: usize,
}

impl TaskTrace {
    pub fn epochs_total(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }

    pub fn units_total(&self) -> usize {
        self.units_stable + self.units_plastic
    }
}

/// Everything one sequential run produces.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub traces: Vec<TaskTrace>,
    pub matrix_ci: AccuracyMatrix,
    pub matrix_ti: AccuracyMatrix,
    /// Random-init TI accuracy per task (forward-transfer baseline),
    /// 0-based over tasks.
    pub fwt_baseline_ti: Vec<f64>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Train one task in the plain CL style: `epochs_cl` epochs of minibatch
/// SGD on the phase-1 objective, then the end-of-task knowledge update.
pub fn train_task_cl(
    state: &mut HostState,
    incoming: Option<&ModelParams>,
    task: &Task,
    arch: &ArchSpec,
    task_index: usize,
    run_seed: u64,
) -> Result<(ModelParams, TaskTrace)> {
    let epochs = state.config.epochs_cl;
    if epochs == 0 {
        return Err(Error::InvalidArgument("CL training needs >= 1 epoch".into()));
    }
    let init_seed = subseed(run_seed, Stream::Init, task_index);
    let mut model = state.begin_task(incoming, task, arch, init_seed)?;
    let stable = state.stable.clone();
    let units_stable = stable.as_ref().map(|s| s.memory_units()).unwrap_or(0);

    let mut trace = TaskTrace {
        units_stable,
        ..TaskTrace::default()
    };
    let mut memory_rng = stream_rng(run_seed, Stream::MemoryPhase2, task_index);
    for epoch in 0..epochs {
        let losses = state.epoch_step(
            &mut model,
            &task.train,
            stable.as_ref(),
            None,
            state.config.alpha_s,
            0.0,
            epoch_seed(run_seed, Stream::ShufflePhase2, task_index, epoch),
            &mut memory_rng,
        )?;
        trace.loss_phase2.push(mean(&losses));
    }
    trace.epochs_phase2 = epochs;

    state.end_task(&model, task, subseed(run_seed, Stream::Reservoir, task_index))?;
    Ok((model, trace))
}

/// Train one task with the flashback protocol: phase 1 from the stable
/// parameters, plastic extraction, reset, phase 2 under both bases.
pub fn train_task_fl(
    state: &mut HostState,
    incoming: Option<&ModelParams>,
    task: &Task,
    arch: &ArchSpec,
    task_index: usize,
    cfg: &FlConfig,
    run_seed: u64,
) -> Result<(ModelParams, TaskTrace)> {
    cfg.validate()?;
    let init_seed = subseed(run_seed, Stream::Init, task_index);
    // The prepared start model doubles as the flashback target: phase 2
    // restarts from this exact parameter vector.
    let start = state.begin_task(incoming, task, arch, init_seed)?;
    let stable = state.stable.clone();
    let alpha_s = state.config.alpha_s;

    let mut trace = TaskTrace {
        units_stable: stable.as_ref().map(|s| s.memory_units()).unwrap_or(0),
        ..TaskTrace::default()
    };

    // Phase 1: rapid acquisition on its own shuffle/memory streams.
    let mut primary = start.clone();
    let mut memory_rng = stream_rng(run_seed, Stream::MemoryPhase1, task_index);
    for epoch in 0..cfg.e1 {
        let losses = state.epoch_step(
            &mut primary,
            &task.train,
            stable.as_ref(),
            None,
            alpha_s,
            0.0,
            epoch_seed(run_seed, Stream::ShufflePhase1, task_index, epoch),
            &mut memory_rng,
        )?;
        trace.loss_phase1.push(mean(&losses));
    }
    trace.epochs_phase1 = cfg.e1;

    // Plastic extraction from the primary model.
    let plastic: Option<PlasticKnowledge> = extract_plastic(
        state.config.category,
        &primary,
        stable.as_ref(),
        Some(&task.train),
        state.config.fisher_mode,
    )?;
    trace.units_plastic = plastic.as_ref().map(|p| p.memory_units()).unwrap_or(0);

    // Flashback: restart from the prepared start model (stable parameters
    // plus identically re-seeded new rows / module).
    let mut model = start;
    let mut memory_rng = stream_rng(run_seed, Stream::MemoryPhase2, task_index);
    for epoch in 0..cfg.e2 {
        let losses = state.epoch_step(
            &mut model,
            &task.train,
            stable.as_ref(),
            plastic.as_ref().filter(|_| cfg.alpha_p != 0.0),
            alpha_s,
            cfg.alpha_p,
            epoch_seed(run_seed, Stream::ShufflePhase2, task_index, epoch),
            &mut memory_rng,
        )?;
        trace.loss_phase2.push(mean(&losses));
    }
    trace.epochs_phase2 = cfg.e2;

    state.end_task(&model, task, subseed(run_seed, Stream::Reservoir, task_index))?;
    Ok((model, trace))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class-incremental accuracy: argmax over every class seen so far.
pub fn ci_accuracy(model: &ModelParams, samples: &[crate::tasks::Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyData("ci evaluation".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let o = model.logits(&s.x)?;
        if argmax(&o) == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Task-incremental accuracy: argmax restricted to the task's own classes.
pub fn ti_accuracy(
    model: &ModelParams,
    samples: &[crate::tasks::Sample],
    classes: &[usize],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyData("ti evaluation".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let o = model.logits(&s.x)?;
        let mut best = classes[0];
        for &c in classes {
            if c < o.len() && o[c] > o[best] {
                best = c;
            }
        }
        if best == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Run a whole stream sequentially, evaluating the accuracy matrices after
/// every task in both regimes, plus the pre-training band and random-init
/// baselines that feed forward transfer (TI regime).
pub fn run_stream(
    mode: Mode,
    host_cfg: &HostConfig,
    fl_cfg: Option<&FlConfig>,
    stream: &TaskStream,
    arch: &ArchSpec,
    run_seed: u64,
) -> Result<RunRecord> {
    let t_count = stream.task_count();
    let mut state = HostState::new(host_cfg.clone())?;
    let mut matrix_ci = AccuracyMatrix::new(t_count);
    let mut matrix_ti = AccuracyMatrix::new(t_count);

    // Forward-transfer baseline: a fresh model from the same init stream,
    // with a head over every class, scored per task in the TI regime.
    let fresh = ModelParams::seeded(
        arch,
        stream.total_classes(),
        subseed(run_seed, Stream::Init, 0),
    );
    let mut fwt_baseline_ti = Vec::with_capacity(t_count);
    for (j, task) in stream.tasks.iter().enumerate() {
        let acc = ti_accuracy(&fresh, &task.test, &task.classes)?;
        fwt_baseline_ti.push(acc);
        matrix_ti.set(0, j + 1, acc)?;
    }

    let mut model: Option<ModelParams> = None;
    let mut traces = Vec::with_capacity(t_count);
    for (t, task) in stream.tasks.iter().enumerate() {
        // Score the upcoming task before training it (TI pre-band).
        if let Some(m) = &model {
            let pre = ti_accuracy(m, &task.test, &task.classes)?;
            matrix_ti.set(t, t + 1, pre)?;
        }
        let (trained, trace) = match mode {
            Mode::Cl => train_task_cl(&mut state, model.as_ref(), task, arch, t, run_seed)?,
            Mode::Fl => {
                let cfg = fl_cfg.ok_or_else(|| {
                    Error::InvalidArgument("FL mode needs a flashback config".into())
                })?;
                train_task_fl(&mut state, model.as_ref(), task, arch, t, cfg, run_seed)?
            }
        };
        traces.push(trace);
        for (j, past) in stream.tasks.iter().take(t + 1).enumerate() {
            matrix_ci.set(t + 1, j + 1, ci_accuracy(&trained, &past.test)?)?;
            matrix_ti.set(
                t + 1,
                j + 1,
                ti_accuracy(&trained, &past.test, &past.classes)?,
            )?;
        }
        model = Some(trained);
    }

    Ok(RunRecord {
        mode,
        seed: run_seed,
        traces,
        matrix_ci,
        matrix_ti,
        fwt_baseline_ti,
    })
}

/// One budget-audit finding.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetViolation {
    pub task: usize,
    pub detail: String,
}

/// Training/memory budget audit of a completed run.
#[derive(Clone, Debug)]
pub struct BudgetReport {
    pub pass: bool,
    pub epochs_per_task: Vec<usize>,
    pub units_per_task: Vec<usize>,
    pub violations: Vec<BudgetViolation>,
}

/// Check the training and memory budget of a record: an FL run must spend
/// exactly `e1 + e2` epochs per task with `e1 + e2 == E_CL`, and hold twice
/// the CL knowledge units (one stable plus one plastic base) on every task
/// where the host has a stable base, i.e. every task after the first.
pub fn budget_audit(
    record: &RunRecord,
    host_cfg: &HostConfig,
    fl_cfg: Option<&FlConfig>,
) -> BudgetReport {
    let mut violations = Vec::new();
    let epochs_per_task: Vec<usize> = record.traces.iter().map(|t| t.epochs_total()).collect();
    let units_per_task: Vec<usize> = record.traces.iter().map(|t| t.units_total()).collect();

    for (i, trace) in record.traces.iter().enumerate() {
        match record.mode {
            Mode::Cl => {
                if trace.epochs_total() != host_cfg.epochs_cl {
                    violations.push(BudgetViolation {
                        task: i,
                        detail: format!(
                            "CL epochs {} != configured {}",
                            trace.epochs_total(),
                            host_cfg.epochs_cl
                        ),
                    });
                }
                if i >= 1 && trace.units_total() != 1 {
                    violations.push(BudgetViolation {
                        task: i,
                        detail: format!("CL knowledge units {} != 1", trace.units_total()),
                    });
                }
            }
            Mode::Fl => {
                let cfg = match fl_cfg {
                    Some(c) => c,
                    None => {
                        violations.push(BudgetViolation {
                            task: i,
                            detail: "FL record audited without an FL config".into(),
                        });
                        continue;
                    }
                };
                if trace.epochs_total() != cfg.e1 + cfg.e2 {
                    violations.push(BudgetViolation {
                        task: i,
                        detail: format!(
                            "FL epochs {} != e1 + e2 = {}",
                            trace.epochs_total(),
                            cfg.e1 + cfg.e2
                        ),
                    });
                }
                if !cfg.respects_budget(host_cfg.epochs_cl) {
                    violations.push(BudgetViolation {
                        task: i,
                        detail: format!(
                            "budget e1 + e2 = {} != E_CL = {}",
                            cfg.e1 + cfg.e2,
                            host_cfg.epochs_cl
                        ),
                    });
                }
                // From the second task on, both bases must be held: twice
                // the single unit a CL run carries.
                if i >= 1 && trace.units_total() != 2 {
                    violations.push(BudgetViolation {
                        task: i,
                        detail: format!("FL knowledge units {} != 2", trace.units_total()),
                    });
                }
            }
        }
    }
    BudgetReport {
        pass: violations.is_empty(),
        epochs_per_task,
        units_per_task,
        violations,
    }
}
