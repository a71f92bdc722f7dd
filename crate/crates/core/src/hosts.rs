//! The four host continual-learning strategies at toy fidelity, each
//! exposing begin-task / epoch-step / end-task hooks that the two-phase
//! protocol plugs into.
//!
//! * distill — keeps the previous model and aligns current outputs to it;
//! * replay — keeps a reservoir of past samples with recorded responses;
//! * reg — keeps the previous parameters and a running Fisher importance;
//! * dyn — freezes the previous extractor and trains an added module, with
//!   KL alignment to the stable model's predictions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::knowledge::{
    estimate_fisher, online_fisher_update, snapshot_stable, Category, FisherMode, MemoryBuffer,
    PlasticKnowledge, StableKnowledge,
};
use crate::losses::{
    phase1_objective, phase2_objective, AlignmentSpace, LossOptions, MemoryExample, StepBatch,
};
use crate::model::{expand_extractor, widen_classifier, ArchSpec, ModelParams, ModuleSpec};
use crate::rngutil;
use crate::tasks::{batches, Sample, Task};

/// Host hyperparameters. Fields irrelevant to a category are ignored.
#[derive(Clone, Debug)]
pub struct HostConfig {
    pub category: Category,
    pub alpha_s: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training epochs per task in the plain CL setting.
    pub epochs_cl: usize,
    /// Replay buffer capacity.
    pub buffer_capacity: usize,
    /// Running-Fisher decay (reg).
    pub gamma: f64,
    /// Optional per-task Fisher weights (reg); task i's newly estimated
    /// Fisher is scaled by `lambda[i]` before entering the running average.
    pub lambda_weights: Option<Vec<f64>>,
    /// Softmax temperature for the dyn KL terms.
    pub tau: f64,
    /// Expansion module layout (dyn).
    pub module_spec: ModuleSpec,
    /// Whether distill/replay alignment compares logits or embeddings.
    pub alignment: AlignmentSpace,
    pub fisher_mode: FisherMode,
}

impl HostConfig {
    pub fn new(category: Category) -> Self {
        HostConfig {
            category,
            alpha_s: 1.0,
            learning_rate: 0.01,
            batch_size: 32,
            epochs_cl: 30,
            buffer_capacity: 200,
            gamma: 0.9,
            lambda_weights: None,
            tau: 2.0,
            module_spec: ModuleSpec::default(),
            alignment: AlignmentSpace::Logits,
            fisher_mode: FisherMode::Diag,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            tau: self.tau,
            alignment: self.alignment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_s < 0.0 {
            return Err(Error::InvalidArgument("alpha_s must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.epochs_cl == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidArgument("gamma must be in (0, 1)".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidArgument("tau must be > 0".into()));
        }
        Ok(())
    }
}

/// Mutable host state across a task stream.
#[derive(Clone, Debug)]
pub struct HostState {
    pub config: HostConfig,
    pub completed_tasks: usize,
    pub seen_classes: usize,
    pub stable: Option<StableKnowledge>,
    pub buffer: MemoryBuffer,
}

impl HostState {
    pub fn new(config: HostConfig) -> Result<Self> {
        config.validate()?;
        let buffer = MemoryBuffer::new(config.buffer_capacity);
        Ok(HostState {
            config,
            completed_tasks: 0,
            seen_classes: 0,
            stable: None,
            buffer,
        })
    }

    /// Prepare the trainable model for a task: extend the classifier over
    /// the new classes and, for the dyn host, freeze the current extractor
    /// under a fresh module. All init draws are keyed to `init_seed`, so
    /// repeating the call reproduces the same start model bit for bit.
    pub fn begin_task(
        &self,
        incoming: Option<&ModelParams>,
        task: &Task,
        arch: &ArchSpec,
        init_seed: u64,
    ) -> Result<ModelParams> {
        let k = task.classes.len();
        if task.classes.iter().any(|&c| c < self.seen_classes) {
            return Err(Error::InvalidArgument(format!(
                "task classes {:?} overlap the {} already seen",
                task.classes, self.seen_classes
            )));
        }
        let expected: Vec<usize> = (self.seen_classes..self.seen_classes + k).collect();
        if task.classes != expected {
            return Err(Error::InvalidArgument(format!(
                "task classes {:?} are not the next {k} ids after {}",
                task.classes, self.seen_classes
            )));
        }
        let model = match incoming {
            None => ModelParams::seeded(arch, k, init_seed),
            Some(prev) => match self.config.category {
                Category::Dyn => {
                    let extractor = expand_extractor(
                        &prev.extractor,
                        &self.config.module_spec,
                        rngutil::derive(init_seed, 1),
                    )?;
                    let widened = widen_classifier(
                        &prev.classifier,
                        self.config.module_spec.out_dim,
                        rngutil::derive(init_seed, 2),
                    )?;
                    let tmp = ModelParams {
                        extractor,
                        classifier: widened,
                    };
                    tmp.extend_classifier(self.seen_classes + k, init_seed)?
                }
                _ => prev.extend_classifier(self.seen_classes + k, init_seed)?,
            },
        };
        Ok(model)
    }

    /// Replay memory minibatch for one step: uniform draws (with
    /// replacement) from the frozen stable pack, joined with the plastic
    /// pack's responses by item index.
    fn draw_memory(
        &self,
        stable: Option<&StableKnowledge>,
        plastic: Option<&PlasticKnowledge>,
        rng: &mut ChaCha8Rng,
    ) -> Vec<MemoryExample> {
        if self.config.category != Category::Replay {
            return Vec::new();
        }
        let items = match stable {
            Some(StableKnowledge::ReplayPack { items }) if !items.is_empty() => items,
            _ => return Vec::new(),
        };
        let (plogits, pembeds) = match plastic {
            Some(PlasticKnowledge::ReplayPack { logits, embeddings }) => {
                (Some(logits), Some(embeddings))
            }
            _ => (None, None),
        };
        (0..self.config.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..items.len());
                let item = &items[idx];
                MemoryExample {
                    x: item.sample.x.clone(),
                    y: item.sample.y,
                    stable_logits: item.stable_logits.clone(),
                    stable_embedding: item.stable_embedding.clone(),
                    primary_logits: plogits.map(|l| l[idx].clone()),
                    primary_embedding: pembeds.map(|e| e[idx].clone()),
                }
            })
            .collect()
    }

    /// One epoch of minibatch SGD on the phase objective; with a plastic
    /// base present the phase-2 objective is used, otherwise phase 1.
    /// Returns the per-step loss values.
    #[allow(clippy::too_many_arguments)]
    pub fn epoch_step(
        &self,
        model: &mut ModelParams,
        task_train: &[Sample],
        stable: Option<&StableKnowledge>,
        plastic: Option<&PlasticKnowledge>,
        alpha_s: f64,
        alpha_p: f64,
        epoch_seed: u64,
        memory_rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let opts = self.config.loss_options();
        let mut losses = Vec::new();
        for task_batch in batches(task_train, self.config.batch_size, epoch_seed) {
            let memory = self.draw_memory(stable, plastic, memory_rng);
            let batch = StepBatch {
                task: task_batch,
                memory,
            };
            let term = match plastic {
                Some(p) => {
                    phase2_objective(model, &batch, stable, Some(p), alpha_s, alpha_p, &opts)?
                }
                None => phase1_objective(model, &batch, stable, alpha_s, &opts)?,
            };
            let grads = term.gradient()?;
            model.apply_gradient_step(&grads, self.config.learning_rate)?;
            losses.push(term.value());
        }
        Ok(losses)
    }

    /// Close out a task: refresh the stable base from the trained model
    /// (snapshot / reservoir + response recording / Fisher recursion /
    /// extractor fold) and advance the task counter.
    pub fn end_task(
        &mut self,
        model: &ModelParams,
        task: &Task,
        reservoir_seed: u64,
    ) -> Result<()> {
        let stable = match self.config.category {
            Category::Distill => snapshot_stable(Category::Distill, model, None, None)?,
            Category::Replay => {
                let mut rng = rand::SeedableRng::seed_from_u64(reservoir_seed);
                for s in &task.train {
                    self.buffer.reservoir_insert(s.clone(), &mut rng);
                }
                snapshot_stable(Category::Replay, model, Some(&mut self.buffer), None)?
            }
            Category::Reg => {
                let fresh = estimate_fisher(model, &task.train, self.config.fisher_mode)?;
                let lambda = self
                    .config
                    .lambda_weights
                    .as_ref()
                    .and_then(|w| w.get(self.completed_tasks).copied())
                    .unwrap_or(1.0);
                let fresh = fresh.scale(lambda);
                let updated = match &self.stable {
                    Some(StableKnowledge::RegPack { fisher, .. }) => {
                        let padded = fisher.pad_to(fresh.dim())?;
                        online_fisher_update(&padded, &fresh, self.config.gamma)?
                    }
                    _ => fresh,
                };
                snapshot_stable(Category::Reg, model, None, Some(updated))?
            }
            Category::Dyn => snapshot_stable(Category::Dyn, model, None, None)?,
        };
        self.stable = Some(stable);
        self.completed_tasks += 1;
        self.seen_classes += task.classes.len();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::FisherMatrix;
    use crate::tasks::{generate_synthetic, SyntheticSpec};
    use rand::SeedableRng;

    fn tiny_stream(tasks: usize) -> crate::tasks::TaskStream {
        generate_synthetic(&SyntheticSpec {
            tasks,
            classes_per_task: 2,
            input_dim: 6,
            train_per_class: 12,
            test_per_class: 6,
            separation: 4.0,
            seed: 42,
        })
        .unwrap()
    }

    fn tiny_config(category: Category) -> HostConfig {
        HostConfig {
            batch_size: 8,
            epochs_cl: 3,
            buffer_capacity: 20,
            ..HostConfig::new(category)
        }
    }

    fn arch() -> ArchSpec {
        ArchSpec {
            input_dim: 6,
            hidden: vec![8],
            embed_dim: 4,
        }
    }

    /// Train one task start to finish in CL style, for test setup.
    fn run_cl_task(
        state: &mut HostState,
        incoming: Option<&ModelParams>,
        task: &Task,
        seed: u64,
    ) -> ModelParams {
        let mut model = state.begin_task(incoming, task, &arch(), seed).unwrap();
        let s = state.stable.clone();
        let mut mem_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for epoch in 0..state.config.epochs_cl {
            state
                .epoch_step(
                    &mut model,
                    &task.train,
                    s.as_ref(),
                    None,
                    state.config.alpha_s,
                    0.0,
                    seed.wrapping_add(epoch as u64),
                    &mut mem_rng,
                )
                .unwrap();
        }
        state.end_task(&model, task, seed ^ 0x55).unwrap();
        model
    }

    #[test]
    fn first_task_has_no_stable_base() {
        let stream = tiny_stream(1);
        let state = HostState::new(tiny_config(Category::Distill)).unwrap();
        let model = state
            .begin_task(None, &stream.tasks[0], &arch(), 7)
            .unwrap();
        assert!(state.stable.is_none());
        assert_eq!(model.classes(), 2);
    }

    #[test]
    fn class_overlap_is_rejected() {
        let stream = tiny_stream(1);
        let mut state = HostState::new(tiny_config(Category::Distill)).unwrap();
        let model = run_cl_task(&mut state, None, &stream.tasks[0], 3);
        assert!(state
            .begin_task(Some(&model), &stream.tasks[0], &arch(), 3)
            .is_err());
    }

    #[test]
    fn dyn_second_task_trains_module_and_head_only() {
        let stream = tiny_stream(2);
        let mut state = HostState::new(tiny_config(Category::Dyn)).unwrap();
        let first = run_cl_task(&mut state, None, &stream.tasks[0], 11);
        let second = state
            .begin_task(Some(&first), &stream.tasks[1], &arch(), 12)
            .unwrap();
        let names = second.trainable_names();
        assert!(names.iter().all(|n| n == "psi" || n.starts_with("nu")));

        // Base stays frozen through training.
        let base_before = match &second.extractor {
            crate::model::Extractor::Expanded { base, .. } => base.flat(),
            _ => panic!("expected expansion"),
        };
        let mut model = second;
        let s = state.stable.clone();
        let mut mem_rng = ChaCha8Rng::seed_from_u64(0);
        for epoch in 0..10 {
            state
                .epoch_step(&mut model, &stream.tasks[1].train, s.as_ref(), None, 1.0, 0.0, epoch, &mut mem_rng)
                .unwrap();
        }
        let base_after = match &model.extractor {
            crate::model::Extractor::Expanded { base, .. } => base.flat(),
            _ => unreachable!(),
        };
        assert_eq!(base_before, base_after);
    }

    #[test]
    fn replay_second_task_sees_recorded_logits() {
        let stream = tiny_stream(2);
        let mut state = HostState::new(tiny_config(Category::Replay)).unwrap();
        let first = run_cl_task(&mut state, None, &stream.tasks[0], 5);
        assert!(!state.buffer.is_empty());
        match state.stable.as_ref().unwrap() {
            StableKnowledge::ReplayPack { items } => {
                assert!(!items.is_empty());
                for item in items {
                    assert_eq!(item.stable_logits.len(), first.classes());
                }
            }
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn first_task_with_zero_alpha_matches_plain_sgd() {
        let stream = tiny_stream(1);
        let task = &stream.tasks[0];
        let mut cfg = tiny_config(Category::Distill);
        cfg.alpha_s = 0.0;
        let state = HostState::new(cfg).unwrap();
        let mut model = state.begin_task(None, task, &arch(), 21).unwrap();
        let mut mem_rng = ChaCha8Rng::seed_from_u64(0);
        state
            .epoch_step(&mut model, &task.train, None, None, 0.0, 0.0, 77, &mut mem_rng)
            .unwrap();

        // Plain SGD on the task loss, same shuffle seed.
        let mut manual = state.begin_task(None, task, &arch(), 21).unwrap();
        for batch in batches(&task.train, state.config.batch_size, 77) {
            let term = crate::losses::task_loss(&manual, &StepBatch::from_task(&batch)).unwrap();
            let grads = term.gradient().unwrap();
            manual
                .apply_gradient_step(&grads, state.config.learning_rate)
                .unwrap();
        }
        assert_eq!(model.flatten(), manual.flatten());
    }

    #[test]
    fn losses_stay_finite_across_a_run() {
        let stream = tiny_stream(3);
        let mut state = HostState::new(tiny_config(Category::Replay)).unwrap();
        let mut model: Option<ModelParams> = None;
        for (t, task) in stream.tasks.iter().enumerate() {
            let mut m = state
                .begin_task(model.as_ref(), task, &arch(), t as u64)
                .unwrap();
            let s = state.stable.clone();
            let mut mem_rng = ChaCha8Rng::seed_from_u64(t as u64);
            for epoch in 0..state.config.epochs_cl {
                let losses = state
                    .epoch_step(
                        &mut m,
                        &task.train,
                        s.as_ref(),
                        None,
                        1.0,
                        0.0,
                        (t * 100 + epoch) as u64,
                        &mut mem_rng,
                    )
                    .unwrap();
                assert!(losses.iter().all(|v| v.is_finite()));
            }
            state.end_task(&m, task, t as u64).unwrap();
            model = Some(m);
        }
    }

    #[test]
    fn reg_pull_strengthens_with_alpha() {
        // One step size for all three weights, small enough that even
        // alpha = 1e6 stays in the stable region of the quadratic pull.
        let stream = tiny_stream(2);
        let drift = |alpha: f64| -> f64 {
            let mut cfg = tiny_config(Category::Reg);
            cfg.alpha_s = alpha;
            cfg.epochs_cl = 5;
            cfg.learning_rate = 1e-7;
            let mut state = HostState::new(cfg).unwrap();
            let first = run_cl_task(&mut state, None, &stream.tasks[0], 9);
            let theta_s = first.flatten();
            let second = run_cl_task(&mut state, Some(&first), &stream.tasks[1], 10);
            let theta = second.flatten();
            theta_s
                .iter()
                .zip(&theta)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let weak = drift(0.1);
        let mid = drift(10.0);
        let strong = drift(1e6);
        assert!(weak >= mid && mid >= strong, "{weak} >= {mid} >= {strong}");
        assert!(
            strong < weak,
            "drift with alpha=1e6 ({strong}) should undercut alpha=0.1 ({weak})"
        );
    }

    #[test]
    fn distill_end_task_snapshots_final_model() {
        let stream = tiny_stream(1);
        let mut state = HostState::new(tiny_config(Category::Distill)).unwrap();
        let model = run_cl_task(&mut state, None, &stream.tasks[0], 31);
        match state.stable.as_ref().unwrap() {
            StableKnowledge::DistillSnapshot { snapshot } => {
                assert_eq!(snapshot.params().flatten(), model.flatten());
            }
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn reg_second_task_runs_the_fisher_recursion() {
        let stream = tiny_stream(2);
        let mut state = HostState::new(tiny_config(Category::Reg)).unwrap();
        let first = run_cl_task(&mut state, None, &stream.tasks[0], 13);
        let f1 = match state.stable.as_ref().unwrap() {
            StableKnowledge::RegPack { fisher, .. } => fisher.clone(),
            _ => panic!("wrong variant"),
        };
        let second = run_cl_task(&mut state, Some(&first), &stream.tasks[1], 14);
        let f2_fresh = estimate_fisher(&second, &stream.tasks[1].train, FisherMode::Diag).unwrap();
        let expected = online_fisher_update(
            &f1.pad_to(f2_fresh.dim()).unwrap(),
            &f2_fresh,
            state.config.gamma,
        )
        .unwrap();
        match state.stable.as_ref().unwrap() {
            StableKnowledge::RegPack { fisher, theta } => {
                assert_eq!(theta, &second.flatten());
                match (fisher, &expected) {
                    (FisherMatrix::Diag(a), FisherMatrix::Diag(b)) => {
                        for (u, v) in a.iter().zip(b) {
                            assert_eq!(u, v);
                        }
                    }
                    _ => panic!("wrong mode"),
                }
            }
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn dyn_end_task_folds_the_expansion() {
        let stream = tiny_stream(3);
        let mut state = HostState::new(tiny_config(Category::Dyn)).unwrap();
        let m1 = run_cl_task(&mut state, None, &stream.tasks[0], 1);
        let d1 = m1.embed_dim();
        let m2 = run_cl_task(&mut state, Some(&m1), &stream.tasks[1], 2);
        assert_eq!(m2.embed_dim(), d1 + state.config.module_spec.out_dim);
        let m3 = run_cl_task(&mut state, Some(&m2), &stream.tasks[2], 3);
        assert_eq!(m3.embed_dim(), d1 + 2 * state.config.module_spec.out_dim);
        // The frozen base of task 3 is the whole task-2 extractor.
        match &m3.extractor {
            crate::model::Extractor::Expanded { base, .. } => {
                assert_eq!(base.flat(), m2.extractor.flat());
            }
            _ => panic!("expected expansion"),
        }
    }
}
