//! Objective terms: task cross-entropy, per-category stability and
//! plasticity losses, and the phase-1 / phase-2 training objectives.
//!
//! Every term is built into one tape over the model's trainable leaves, with
//! forward nodes shared between terms, so a phase objective differentiates
//! as a whole. Reference outputs (stable or primary responses) enter as
//! constants and never carry gradient.
//!
//! Comparisons against a recorded response mask to the overlapping logit
//! prefix: a target recorded at `C_old` classes is compared against the
//! first `C_old` coordinates of the current output, while targets recorded
//! at the full current width compare unmasked. Parameter-space comparisons
//! do the analogous masking on the flattened prefix.

use crate::autodiff::{Bindings, GradientMap, Graph, NodeId};
use crate::error::{Error, Result};
use crate::knowledge::{Category, FisherMatrix, PlasticKnowledge, StableKnowledge};
use crate::model::{Extractor, ModelNodes, ModelParams};
use crate::tasks::Sample;
use crate::tensor::Tensor;

/// Whether distill/replay alignment compares logits or embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AlignmentSpace {
    #[default]
    Logits,
    Embeddings,
}

/// Loss construction knobs shared by hosts and the theory suite.
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    /// Softmax temperature for the dynamic-architecture KL terms.
    pub tau: f64,
    pub alignment: AlignmentSpace,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            tau: 2.0,
            alignment: AlignmentSpace::Logits,
        }
    }
}

/// One replay example drawn for a step, with its recorded responses.
#[derive(Clone, Debug)]
pub struct MemoryExample {
    pub x: Vec<f64>,
    pub y: usize,
    pub stable_logits: Vec<f64>,
    pub stable_embedding: Vec<f64>,
    pub primary_logits: Option<Vec<f64>>,
    pub primary_embedding: Option<Vec<f64>>,
}

/// The samples one SGD step sees: a task minibatch, plus a memory minibatch
/// for the replay host (empty otherwise).
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub task: Vec<Sample>,
    pub memory: Vec<MemoryExample>,
}

impl StepBatch {
    pub fn from_task(task: &[Sample]) -> Self {
        StepBatch {
            task: task.to_vec(),
            memory: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Task,
    Stability,
    Plasticity,
    Phase1,
    Phase2,
}

/// Per-component values of a built objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub task: Option<f64>,
    pub stability: Option<f64>,
    pub plasticity: Option<f64>,
}

/// A scalar loss with the graph that produced it, ready to differentiate.
pub struct LossTerm {
    pub kind: LossKind,
    pub category: Option<Category>,
    pub parts: LossParts,
    value: f64,
    graph: Graph,
    bindings: Bindings,
    wrt: Vec<String>,
}

impl LossTerm {
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Gradient with respect to every trainable leaf.
    pub fn gradient(&self) -> Result<GradientMap> {
        self.graph.gradient(&self.bindings, &self.wrt)
    }
}

fn softmax_temp(v: &[f64], tau: f64) -> Vec<f64> {
    let inv = 1.0 / tau;
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * inv));
    let e: Vec<f64> = v.iter().map(|&u| (u * inv - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&u| u / z).collect()
}

/// Input entry inside a builder: graph nodes for one sample.
struct Entry {
    x: NodeId,
    features: Option<NodeId>,
    logits: Option<NodeId>,
}

struct Builder<'m> {
    graph: Graph,
    nodes: ModelNodes,
    model: &'m ModelParams,
    /// Task entries first, memory entries after.
    entries: Vec<Entry>,
}

impl<'m> Builder<'m> {
    fn new(model: &'m ModelParams, batch: &StepBatch) -> Result<Self> {
        let mut graph = Graph::new();
        let nodes = model.graph_nodes(&mut graph)?;
        let mut entries = Vec::with_capacity(batch.task.len() + batch.memory.len());
        for s in &batch.task {
            let x = graph.constant(Tensor::vector(s.x.clone()));
            entries.push(Entry { x, features: None, logits: None });
        }
        for m in &batch.memory {
            let x = graph.constant(Tensor::vector(m.x.clone()));
            entries.push(Entry { x, features: None, logits: None });
        }
        Ok(Builder {
            graph,
            nodes,
            model,
            entries,
        })
    }

    fn features_of(&mut self, i: usize) -> Result<NodeId> {
        if let Some(z) = self.entries[i].features {
            return Ok(z);
        }
        let x = self.entries[i].x;
        let z = self.nodes.features(&mut self.graph, x)?;
        self.entries[i].features = Some(z);
        Ok(z)
    }

    fn logits_of(&mut self, i: usize) -> Result<NodeId> {
        if let Some(o) = self.entries[i].logits {
            return Ok(o);
        }
        let z = self.features_of(i)?;
        let o = self.nodes.logits_from_features(&mut self.graph, z)?;
        self.entries[i].logits = Some(o);
        Ok(o)
    }

    fn mean_of(&mut self, scalars: Vec<NodeId>) -> Result<NodeId> {
        // concat needs rank-1 operands; scalars flatten to length-1 vectors
        let mut parts = Vec::with_capacity(scalars.len());
        for s in scalars {
            parts.push(self.graph.flatten(s));
        }
        let v = self.graph.concat(&parts)?;
        Ok(self.graph.mean(v))
    }

    /// Mean softmax cross-entropy at temperature 1 over the given entries.
    fn cross_entropy(&mut self, labels: &[(usize, usize)]) -> Result<NodeId> {
        let classes = self.model.classes();
        let mut scalars = Vec::with_capacity(labels.len());
        for &(i, y) in labels {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let o = self.logits_of(i)?;
            let sm = self.graph.softmax(o, 1.0)?;
            let lg = self.graph.log(sm);
            let mut onehot = vec![0.0; classes];
            onehot[y] = 1.0;
            let t = self.graph.constant(Tensor::vector(onehot));
            let picked = self.graph.mul(lg, t)?;
            let tot = self.graph.sum(picked);
            scalars.push(self.graph.scale(tot, -1.0));
        }
        self.mean_of(scalars)
    }

    /// Mean `1/2 || current[..k] - target ||^2` over `(entry, target)` pairs,
    /// in logit or embedding space; `k` is each target's recorded width.
    fn alignment(
        &mut self,
        pairs: &[(usize, Vec<f64>)],
        space: AlignmentSpace,
    ) -> Result<NodeId> {
        let mut scalars = Vec::with_capacity(pairs.len());
        for (i, target) in pairs {
            let current = match space {
                AlignmentSpace::Logits => self.logits_of(*i)?,
                AlignmentSpace::Embeddings => self.features_of(*i)?,
            };
            let width = self.graph.shape_of(current)[0];
            if target.len() > width {
                return Err(Error::ShapeMismatch {
                    node: "alignment".into(),
                    detail: format!("target width {} exceeds current {width}", target.len()),
                });
            }
            let masked = if target.len() < width {
                self.graph.slice(current, 0, target.len())?
            } else {
                current
            };
            let t = self.graph.constant(Tensor::vector(target.clone()));
            let d = self.graph.sub(masked, t)?;
            let sq = self.graph.squared_norm(d);
            scalars.push(self.graph.scale(sq, 0.5));
        }
        self.mean_of(scalars)
    }

    /// Mean `-target^T log softmax(current[..k] / tau)` over pairs; the
    /// targets are probability vectors and carry no gradient.
    fn kl_alignment(&mut self, pairs: &[(usize, Vec<f64>)], tau: f64) -> Result<NodeId> {
        let mut scalars = Vec::with_capacity(pairs.len());
        for (i, target) in pairs {
            let current = self.logits_of(*i)?;
            let width = self.graph.shape_of(current)[0];
            if target.len() > width {
                return Err(Error::ShapeMismatch {
                    node: "kl_alignment".into(),
                    detail: format!("target width {} exceeds current {width}", target.len()),
                });
            }
            let masked = if target.len() < width {
                self.graph.slice(current, 0, target.len())?
            } else {
                current
            };
            let sm = self.graph.softmax(masked, tau)?;
            let lg = self.graph.log(sm);
            let t = self.graph.constant(Tensor::vector(target.clone()));
            let picked = self.graph.mul(lg, t)?;
            let tot = self.graph.sum(picked);
            scalars.push(self.graph.scale(tot, -1.0));
        }
        self.mean_of(scalars)
    }

    /// `1/2 (theta - theta_ref)^T F (theta - theta_ref)` over the flattened
    /// trainable parameters, masked to the prefix the reference covers.
    fn quadratic_penalty(&mut self, theta_ref: &[f64], fisher: &FisherMatrix) -> Result<NodeId> {
        let total: usize = self
            .model
            .named_trainable()
            .iter()
            .map(|(_, t)| t.len())
            .sum();
        if theta_ref.len() > total {
            return Err(Error::InvalidArgument(format!(
                "reference parameter vector has {} entries, model has {total}",
                theta_ref.len()
            )));
        }
        if fisher.dim() != theta_ref.len() {
            return Err(Error::VariantMismatch {
                expected: format!("fisher dim {}", theta_ref.len()),
                got: format!("fisher dim {}", fisher.dim()),
            });
        }
        let mask = theta_ref.len();
        // Per-leaf covered segments, flattened and sliced as needed.
        let mut diffs: Vec<(NodeId, usize)> = Vec::new(); // (diff node, offset)
        let mut offset = 0usize;
        let leaves: Vec<(String, Vec<usize>, usize)> = self
            .model
            .named_trainable()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.len()))
            .collect();
        for (name, shape, len) in leaves {
            if offset >= mask {
                break;
            }
            let covered = (mask - offset).min(len);
            let leaf = self.graph.leaf(&name, shape)?;
            let flat = self.graph.flatten(leaf);
            let sliced = if covered < len {
                self.graph.slice(flat, 0, covered)?
            } else {
                flat
            };
            let refseg = self
                .graph
                .constant(Tensor::vector(theta_ref[offset..offset + covered].to_vec()));
            let d = self.graph.sub(sliced, refseg)?;
            diffs.push((d, offset));
            offset += len;
        }
        let qf = match fisher {
            FisherMatrix::Diag(fd) => {
                let mut acc: Option<NodeId> = None;
                for (d, off) in &diffs {
                    let n = self.graph.shape_of(*d)[0];
                    let w = self
                        .graph
                        .constant(Tensor::vector(fd[*off..*off + n].to_vec()));
                    let wd = self.graph.mul(*d, w)?;
                    let term = self.graph.mul(wd, *d)?;
                    let s = self.graph.sum(term);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => self.graph.add(a, s)?,
                    });
                }
                acc.expect("at least one parameter leaf")
            }
            FisherMatrix::Full { dim, data } => {
                let parts: Vec<NodeId> = diffs.iter().map(|(d, _)| *d).collect();
                let v = self.graph.concat(&parts)?;
                let f = self
                    .graph
                    .constant(Tensor::matrix(*dim, *dim, data.clone())?);
                let fv = self.graph.affine(f, v, None)?;
                let prod = self.graph.mul(v, fv)?;
                self.graph.sum(prod)
            }
        };
        Ok(self.graph.scale(qf, 0.5))
    }

    fn finish(
        mut self,
        out: NodeId,
        kind: LossKind,
        category: Option<Category>,
        parts: LossParts,
    ) -> Result<LossTerm> {
        self.graph.set_output(out);
        let bindings = self.model.bindings();
        let value = self
            .graph
            .evaluate(&bindings)?
            .as_scalar()
            .expect("loss output is scalar");
        Ok(LossTerm {
            kind,
            category,
            parts,
            value,
            graph: self.graph,
            bindings,
            wrt: self.model.trainable_names(),
        })
    }
}

fn task_labels(batch: &StepBatch) -> Vec<(usize, usize)> {
    batch
        .task
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.y))
        .chain(
            batch
                .memory
                .iter()
                .enumerate()
                .map(|(k, m)| (batch.task.len() + k, m.y)),
        )
        .collect()
}

/// Stability target pairs per category, as `(entry index, constant target)`.
fn stability_pairs(
    category: Category,
    stable: &StableKnowledge,
    batch: &StepBatch,
    opts: &LossOptions,
) -> Result<Vec<(usize, Vec<f64>)>> {
    match (category, stable) {
        (Category::Distill, StableKnowledge::DistillSnapshot { snapshot }) => batch
            .task
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = match opts.alignment {
                    AlignmentSpace::Logits => snapshot.params().logits(&s.x)?,
                    AlignmentSpace::Embeddings => snapshot.params().features(&s.x)?,
                };
                Ok((i, t))
            })
            .collect(),
        (Category::Replay, StableKnowledge::ReplayPack { .. }) => {
            if batch.memory.is_empty() {
                return Err(Error::EmptyMemory);
            }
            Ok(batch
                .memory
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let t = match opts.alignment {
                        AlignmentSpace::Logits => m.stable_logits.clone(),
                        AlignmentSpace::Embeddings => m.stable_embedding.clone(),
                    };
                    (batch.task.len() + k, t)
                })
                .collect())
        }
        (Category::Dyn, StableKnowledge::DynExtractor { extractor, classifier }) => {
            let stable_model = ModelParams {
                extractor: extractor.clone(),
                classifier: classifier.clone(),
            };
            batch
                .task
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let o = stable_model.logits(&s.x)?;
                    Ok((i, softmax_temp(&o, opts.tau)))
                })
                .collect()
        }
        (cat, s) => Err(Error::VariantMismatch {
            expected: cat.name().into(),
            got: s.category().name().into(),
        }),
    }
}

/// Plasticity target pairs per category.
fn plasticity_pairs(
    category: Category,
    model: &ModelParams,
    plastic: &PlasticKnowledge,
    batch: &StepBatch,
    opts: &LossOptions,
) -> Result<Vec<(usize, Vec<f64>)>> {
    match (category, plastic) {
        (Category::Distill, PlasticKnowledge::DistillSnapshot { snapshot }) => batch
            .task
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = match opts.alignment {
                    AlignmentSpace::Logits => snapshot.params().logits(&s.x)?,
                    AlignmentSpace::Embeddings => snapshot.params().features(&s.x)?,
                };
                Ok((i, t))
            })
            .collect(),
        (Category::Replay, PlasticKnowledge::ReplayPack { .. }) => {
            if batch.memory.is_empty() {
                return Err(Error::EmptyMemory);
            }
            batch
                .memory
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let t = match opts.alignment {
                        AlignmentSpace::Logits => m.primary_logits.clone(),
                        AlignmentSpace::Embeddings => m.primary_embedding.clone(),
                    };
                    let t = t.ok_or_else(|| {
                        Error::InvalidArgument(
                            "memory example lacks recorded primary responses".into(),
                        )
                    })?;
                    Ok((batch.task.len() + k, t))
                })
                .collect()
        }
        (Category::Dyn, PlasticKnowledge::DynModule { module, classifier }) => {
            let base = match &model.extractor {
                Extractor::Expanded { base, .. } => base.as_ref().clone(),
                Extractor::Plain(_) => {
                    return Err(Error::InvalidArgument(
                        "dyn plasticity needs an expanded extractor".into(),
                    ))
                }
            };
            let primary_model = ModelParams {
                extractor: Extractor::Expanded {
                    base: Box::new(base),
                    module: module.clone(),
                },
                classifier: classifier.clone(),
            };
            batch
                .task
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let o = primary_model.logits(&s.x)?;
                    Ok((i, softmax_temp(&o, opts.tau)))
                })
                .collect()
        }
        (cat, p) => Err(Error::VariantMismatch {
            expected: cat.name().into(),
            got: p.category().name().into(),
        }),
    }
}

/// Append the stability term for `category` to an existing builder.
fn stability_node(
    b: &mut Builder,
    category: Category,
    stable: &StableKnowledge,
    batch: &StepBatch,
    opts: &LossOptions,
) -> Result<NodeId> {
    match category {
        Category::Distill | Category::Replay => {
            let pairs = stability_pairs(category, stable, batch, opts)?;
            b.alignment(&pairs, opts.alignment)
        }
        Category::Reg => match stable {
            StableKnowledge::RegPack { theta, fisher } => b.quadratic_penalty(theta, fisher),
            s => Err(Error::VariantMismatch {
                expected: "reg".into(),
                got: s.category().name().into(),
            }),
        },
        Category::Dyn => {
            let pairs = stability_pairs(category, stable, batch, opts)?;
            b.kl_alignment(&pairs, opts.tau)
        }
    }
}

fn plasticity_node(
    b: &mut Builder,
    category: Category,
    plastic: &PlasticKnowledge,
    batch: &StepBatch,
    opts: &LossOptions,
) -> Result<NodeId> {
    match category {
        Category::Distill | Category::Replay => {
            let pairs = plasticity_pairs(category, b.model, plastic, batch, opts)?;
            b.alignment(&pairs, opts.alignment)
        }
        Category::Reg => match plastic {
            PlasticKnowledge::RegPack { theta, fisher } => b.quadratic_penalty(theta, fisher),
            p => Err(Error::VariantMismatch {
                expected: "reg".into(),
                got: p.category().name().into(),
            }),
        },
        Category::Dyn => {
            let pairs = plasticity_pairs(category, b.model, plastic, batch, opts)?;
            b.kl_alignment(&pairs, opts.tau)
        }
    }
}

/// Mean softmax cross-entropy (temperature 1) over the batch, task and
/// memory samples alike.
pub fn task_loss(model: &ModelParams, batch: &StepBatch) -> Result<LossTerm> {
    let mut b = Builder::new(model, batch)?;
    let labels = task_labels(batch);
    if labels.is_empty() {
        return Err(Error::EmptyData("task loss batch".into()));
    }
    let ce = b.cross_entropy(&labels)?;
    b.finish(ce, LossKind::Task, None, LossParts::default())
}

/// The per-category stability loss on its own.
pub fn stability_loss(
    category: Category,
    model: &ModelParams,
    stable: &StableKnowledge,
    batch: &StepBatch,
    opts: &LossOptions,
) -> Result<LossTerm> {
    let mut b = Builder::new(model, batch)?;
    let node = stability_node(&mut b, category, stable, batch, opts)?;
    b.finish(node, LossKind::Stability, Some(category), LossParts::default())
}

/// The per-category plasticity loss on its own.
pub fn plasticity_loss(
    category: Category,
    model: &ModelParams,
    plastic: &PlasticKnowledge,
    batch: &StepBatch,
    opts: &LossOptions,
) -> Result<LossTerm> {
    let mut b = Builder::new(model, batch)?;
    let node = plasticity_node(&mut b, category, plastic, batch, opts)?;
    b.finish(node, LossKind::Plasticity, Some(category), LossParts::default())
}

/// Phase-1 objective `L_c + alpha_s * L_s`. The stability term is absent on
/// the first task (no stable base) or when its weight is zero, in which case
/// the graph is exactly the task loss.
pub fn phase1_objective(
    model: &ModelParams,
    batch: &StepBatch,
    stable: Option<&StableKnowledge>,
    alpha_s: f64,
    opts: &LossOptions,
) -> Result<LossTerm> {
    phase_objective(model, batch, stable, None, alpha_s, 0.0, opts, LossKind::Phase1)
}

/// Phase-2 objective `L_c + alpha_s * L_s + alpha_p * L_p`. With
/// `alpha_p = 0` or no plastic base this builds the identical graph as
/// [`phase1_objective`].
#[allow(clippy::too_many_arguments)]
pub fn phase2_objective(
    model: &ModelParams,
    batch: &StepBatch,
    stable: Option<&StableKnowledge>,
    plastic: Option<&PlasticKnowledge>,
    alpha_s: f64,
    alpha_p: f64,
    opts: &LossOptions,
) -> Result<LossTerm> {
    phase_objective(model, batch, stable, plastic, alpha_s, alpha_p, opts, LossKind::Phase2)
}

#[allow(clippy::too_many_arguments)]
fn phase_objective(
    model: &ModelParams,
    batch: &StepBatch,
    stable: Option<&StableKnowledge>,
    plastic: Option<&PlasticKnowledge>,
    alpha_s: f64,
    alpha_p: f64,
    opts: &LossOptions,
    kind: LossKind,
) -> Result<LossTerm> {
    let mut b = Builder::new(model, batch)?;
    let labels = task_labels(batch);
    if labels.is_empty() {
        return Err(Error::EmptyData("objective batch".into()));
    }
    let ce = b.cross_entropy(&labels)?;
    let category = stable.map(|s| s.category()).or_else(|| plastic.map(|p| p.category()));

    let mut total = ce;
    if let Some(s) = stable {
        if alpha_s != 0.0 {
            let ls = stability_node(&mut b, s.category(), s, batch, opts)?;
            let scaled = b.graph.scale(ls, alpha_s);
            total = b.graph.add(total, scaled)?;
        }
    }
    if let Some(p) = plastic {
        if alpha_p != 0.0 {
            let lp = plasticity_node(&mut b, p.category(), p, batch, opts)?;
            let scaled = b.graph.scale(lp, alpha_p);
            total = b.graph.add(total, scaled)?;
        }
    }
    b.finish(total, kind, category, LossParts::default())
}

/// Appendix-style equivalence between the cosine embedding loss and the
/// half squared distance of l2-normalized vectors: returns
/// `(1 - <f_n, g_n>, 1/2 ||f_n - g_n||^2)`.
pub fn cosine_equivalence_check(f: &[f64], f_s: &[f64]) -> Result<(f64, f64)> {
    if f.len() != f_s.len() {
        return Err(Error::ShapeMismatch {
            node: "cosine_equivalence".into(),
            detail: format!("{} vs {}", f.len(), f_s.len()),
        });
    }
    let norm = |v: &[f64]| -> Result<Vec<f64>> {
        let n = v.iter().map(|&u| u * u).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm {
                node: "cosine_equivalence".into(),
            });
        }
        Ok(v.iter().map(|&u| u / n).collect())
    };
    let a = norm(f)?;
    let b = norm(f_s)?;
    let dot: f64 = a.iter().zip(&b).map(|(&u, &v)| u * v).sum();
    let sq: f64 = a.iter().zip(&b).map(|(&u, &v)| (u - v) * (u - v)).sum();
    Ok((1.0 - dot, 0.5 * sq))
}
