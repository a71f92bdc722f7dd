//! Stable and plastic knowledge bases, Fisher-information estimation and the
//! replay memory buffer.
//!
//! Each host category retains a different artifact from past tasks (the
//! stable base) and distills a shape-compatible artifact from the phase-1
//! primary model (the plastic base). Compatibility is what lets phase 2
//! regularize in both directions with symmetric terms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Mlp, ModelParams, ModelSnapshot, SnapshotRole};
use crate::tasks::Sample;
use crate::tensor::Tensor;

/// The four host strategy families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Distill,
    Replay,
    Reg,
    Dyn,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Distill => "distill",
            Category::Replay => "replay",
            Category::Reg => "reg",
            Category::Dyn => "dyn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "distill" => Ok(Category::Distill),
            "replay" => Ok(Category::Replay),
            "reg" => Ok(Category::Reg),
            "dyn" => Ok(Category::Dyn),
            other => Err(Error::InvalidArgument(format!("unknown category '{other}'"))),
        }
    }
}

/// Diagonal or dense positive-semidefinite importance matrix over the
/// trainable parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub enum FisherMatrix {
    Diag(Vec<f64>),
    /// Row-major `dim x dim`.
    Full { dim: usize, data: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherMode {
    Diag,
    Full,
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        match self {
            FisherMatrix::Diag(d) => d.len(),
            FisherMatrix::Full { dim, .. } => *dim,
        }
    }

    pub fn mode(&self) -> FisherMode {
        match self {
            FisherMatrix::Diag(_) => FisherMode::Diag,
            FisherMatrix::Full { .. } => FisherMode::Full,
        }
    }

    pub fn zeros(mode: FisherMode, dim: usize) -> Self {
        match mode {
            FisherMode::Diag => FisherMatrix::Diag(vec![0.0; dim]),
            FisherMode::Full => FisherMatrix::Full {
                dim,
                data: vec![0.0; dim * dim],
            },
        }
    }

    /// Zero-pad to a larger parameter count; new coordinates get zero
    /// importance. Used when the classifier gained rows since the matrix
    /// was estimated.
    pub fn pad_to(&self, dim: usize) -> Result<FisherMatrix> {
        if dim < self.dim() {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink fisher from {} to {dim}",
                self.dim()
            )));
        }
        Ok(match self {
            FisherMatrix::Diag(d) => {
                let mut out = d.clone();
                out.resize(dim, 0.0);
                FisherMatrix::Diag(out)
            }
            FisherMatrix::Full { dim: old, data } => {
                let mut out = vec![0.0; dim * dim];
                for r in 0..*old {
                    out[r * dim..r * dim + old].copy_from_slice(&data[r * old..(r + 1) * old]);
                }
                FisherMatrix::Full { dim, data: out }
            }
        })
    }

    /// `1/2 (v)^T F (v)` where `v` is already the parameter difference.
    pub fn half_quadratic(&self, v: &[f64]) -> f64 {
        match self {
            FisherMatrix::Diag(d) => {
                0.5 * d.iter().zip(v).map(|(&f, &x)| f * x * x).sum::<f64>()
            }
            FisherMatrix::Full { dim, data } => {
                let fv = crate::linalg::matvec(data, v, *dim);
                0.5 * v.iter().zip(&fv).map(|(&a, &b)| a * b).sum::<f64>()
            }
        }
    }

    pub fn scale(&self, s: f64) -> FisherMatrix {
        match self {
            FisherMatrix::Diag(d) => FisherMatrix::Diag(d.iter().map(|&v| s * v).collect()),
            FisherMatrix::Full { dim, data } => FisherMatrix::Full {
                dim: *dim,
                data: data.iter().map(|&v| s * v).collect(),
            },
        }
    }
}

/// `gamma * prev + new`, elementwise: the online running-average update for
/// the retained Fisher estimate.
pub fn online_fisher_update(
    prev: &FisherMatrix,
    new: &FisherMatrix,
    gamma: f64,
) -> Result<FisherMatrix> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be in (0, 1), got {gamma}"
        )));
    }
    match (prev, new) {
        (FisherMatrix::Diag(a), FisherMatrix::Diag(b)) if a.len() == b.len() => Ok(
            FisherMatrix::Diag(a.iter().zip(b).map(|(&p, &n)| gamma * p + n).collect()),
        ),
        (
            FisherMatrix::Full { dim: da, data: a },
            FisherMatrix::Full { dim: db, data: b },
        ) if da == db => Ok(FisherMatrix::Full {
            dim: *da,
            data: a.iter().zip(b).map(|(&p, &n)| gamma * p + n).collect(),
        }),
        _ => Err(Error::VariantMismatch {
            expected: format!("{:?}/{}", prev.mode(), prev.dim()),
            got: format!("{:?}/{}", new.mode(), new.dim()),
        }),
    }
}

/// Per-sample gradient of `log p(y | x; theta)` over the trainable
/// parameters, flattened in canonical order.
fn log_likelihood_gradient(model: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
    let classes = model.classes();
    if sample.y >= classes {
        return Err(Error::LabelOutOfRange {
            label: sample.y,
            classes,
        });
    }
    let mut g = Graph::new();
    let nodes = model.graph_nodes(&mut g)?;
    let x = g.constant(Tensor::vector(sample.x.clone()));
    let logits = nodes.logits(&mut g, x)?;
    let sm = g.softmax(logits, 1.0)?;
    let lg = g.log(sm);
    let mut onehot = vec![0.0; classes];
    onehot[sample.y] = 1.0;
    let t = g.constant(Tensor::vector(onehot));
    let picked = g.mul(lg, t)?;
    let out = g.sum(picked);
    g.set_output(out);

    let names = model.trainable_names();
    let grads = g.gradient(&model.bindings(), &names)?;
    let mut flat = Vec::new();
    for name in &names {
        flat.extend_from_slice(grads.get(name).expect("requested leaf").data());
    }
    Ok(flat)
}

/// Empirical Fisher over `data`: the mean of `g g^T` (full) or `g . g`
/// (diag), with `g` the log-likelihood gradient at the sample's own label.
pub fn estimate_fisher(
    model: &ModelParams,
    data: &[Sample],
    mode: FisherMode,
) -> Result<FisherMatrix> {
    if data.is_empty() {
        return Err(Error::EmptyData("fisher estimation".into()));
    }
    let dim: usize = model
        .named_trainable()
        .iter()
        .map(|(_, t)| t.len())
        .sum();
    let mut acc = FisherMatrix::zeros(mode, dim);
    for sample in data {
        let g = log_likelihood_gradient(model, sample)?;
        match &mut acc {
            FisherMatrix::Diag(d) => {
                for (slot, &gv) in d.iter_mut().zip(&g) {
                    *slot += gv * gv;
                }
            }
            FisherMatrix::Full { dim, data } => {
                for r in 0..*dim {
                    if g[r] == 0.0 {
                        continue;
                    }
                    for c in 0..*dim {
                        data[r * *dim + c] += g[r] * g[c];
                    }
                }
            }
        }
    }
    Ok(acc.scale(1.0 / data.len() as f64))
}

/// One stored replay example with the responses recorded for it.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryItem {
    pub sample: Sample,
    /// Stable-model logits, at the class count current when recorded.
    pub stable_logits: Vec<f64>,
    /// Stable-model embedding.
    pub stable_embedding: Vec<f64>,
}

/// Capacity-bounded reservoir of past samples.
#[derive(Clone, Debug, Default)]
pub struct MemoryBuffer {
    capacity: usize,
    items: Vec<MemoryItem>,
    seen: usize,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer {
            capacity,
            items: Vec::new(),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen_count(&self) -> usize {
        self.seen
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    /// Classic reservoir sampling over the insertion stream; the buffer
    /// never exceeds its capacity and after `N` insertions each survives
    /// with probability `capacity / N`.
    pub fn reservoir_insert(&mut self, sample: Sample, rng: &mut ChaCha8Rng) {
        self.seen += 1;
        let item = MemoryItem {
            sample,
            stable_logits: Vec::new(),
            stable_embedding: Vec::new(),
        };
        if self.items.len() < self.capacity {
            self.items.push(item);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let j = rng.random_range(0..self.seen);
        if j < self.capacity {
            self.items[j] = item;
        }
    }

    /// Re-record stable responses for every held item with the given model.
    pub fn record_stable_responses(&mut self, model: &ModelParams) -> Result<()> {
        for item in &mut self.items {
            item.stable_logits = model.logits(&item.sample.x)?;
            item.stable_embedding = model.features(&item.sample.x)?;
        }
        Ok(())
    }
}

/// What a host retains from past tasks.
#[derive(Clone, Debug)]
pub enum StableKnowledge {
    /// Distillation: the stable model itself.
    DistillSnapshot { snapshot: ModelSnapshot },
    /// Replay: memory samples with their stable logits and embeddings.
    ReplayPack { items: Vec<MemoryItem> },
    /// Parameter regularization: stable parameters and retained Fisher.
    RegPack {
        theta: Vec<f64>,
        fisher: FisherMatrix,
    },
    /// Dynamic architecture: the stable extractor, plus the stable
    /// classifier needed to evaluate the stable model's output.
    DynExtractor {
        extractor: crate::model::Extractor,
        classifier: Tensor,
    },
}

impl StableKnowledge {
    pub fn category(&self) -> Category {
        match self {
            StableKnowledge::DistillSnapshot { .. } => Category::Distill,
            StableKnowledge::ReplayPack { .. } => Category::Replay,
            StableKnowledge::RegPack { .. } => Category::Reg,
            StableKnowledge::DynExtractor { .. } => Category::Dyn,
        }
    }

    /// Knowledge memory units held by this base (one per category).
    pub fn memory_units(&self) -> usize {
        1
    }
}

/// What phase 1 distills from the new task, shape-compatible with the
/// stable base of the same category.
#[derive(Clone, Debug)]
pub enum PlasticKnowledge {
    DistillSnapshot { snapshot: ModelSnapshot },
    /// Primary responses for the same memory items as the stable pack,
    /// aligned by index.
    ReplayPack {
        logits: Vec<Vec<f64>>,
        embeddings: Vec<Vec<f64>>,
    },
    RegPack {
        theta: Vec<f64>,
        fisher: FisherMatrix,
    },
    /// The trained expansion module and primary classifier.
    DynModule { module: Mlp, classifier: Tensor },
}

impl PlasticKnowledge {
    pub fn category(&self) -> Category {
        match self {
            PlasticKnowledge::DistillSnapshot { .. } => Category::Distill,
            PlasticKnowledge::ReplayPack { .. } => Category::Replay,
            PlasticKnowledge::RegPack { .. } => Category::Reg,
            PlasticKnowledge::DynModule { .. } => Category::Dyn,
        }
    }

    pub fn memory_units(&self) -> usize {
        1
    }
}

/// Build the stable base from the model trained through the previous task.
///
/// Replay needs the memory buffer and stamps fresh stable responses onto
/// it; reg receives its already-updated retained Fisher.
pub fn snapshot_stable(
    category: Category,
    model: &ModelParams,
    buffer: Option<&mut MemoryBuffer>,
    fisher: Option<FisherMatrix>,
) -> Result<StableKnowledge> {
    match category {
        Category::Distill => Ok(StableKnowledge::DistillSnapshot {
            snapshot: ModelSnapshot::new(SnapshotRole::Stable, model),
        }),
        Category::Replay => {
            let buffer = buffer.ok_or(Error::MissingBuffer)?;
            buffer.record_stable_responses(model)?;
            Ok(StableKnowledge::ReplayPack {
                items: buffer.items().to_vec(),
            })
        }
        Category::Reg => {
            let fisher = fisher.ok_or_else(|| {
                Error::InvalidArgument("reg snapshot needs the retained fisher".into())
            })?;
            Ok(StableKnowledge::RegPack {
                theta: model.flatten(),
                fisher,
            })
        }
        Category::Dyn => Ok(StableKnowledge::DynExtractor {
            extractor: model.extractor.clone(),
            classifier: model.classifier.clone(),
        }),
    }
}

/// Extract the plastic base from the phase-1 primary model, matching the
/// variant of `stable`. Returns `None` where the category has nothing to
/// extract yet (replay with an empty memory, dyn before any expansion).
pub fn extract_plastic(
    category: Category,
    primary: &ModelParams,
    stable: Option<&StableKnowledge>,
    task_data: Option<&[Sample]>,
    fisher_mode: FisherMode,
) -> Result<Option<PlasticKnowledge>> {
    if let Some(s) = stable {
        if s.category() != category {
            return Err(Error::VariantMismatch {
                expected: category.name().into(),
                got: s.category().name().into(),
            });
        }
    }
    match category {
        Category::Distill => Ok(Some(PlasticKnowledge::DistillSnapshot {
            snapshot: ModelSnapshot::new(SnapshotRole::Primary, primary),
        })),
        Category::Replay => {
            let items = match stable {
                Some(StableKnowledge::ReplayPack { items }) if !items.is_empty() => items,
                _ => return Ok(None),
            };
            let mut logits = Vec::with_capacity(items.len());
            let mut embeddings = Vec::with_capacity(items.len());
            for item in items {
                logits.push(primary.logits(&item.sample.x)?);
                embeddings.push(primary.features(&item.sample.x)?);
            }
            Ok(Some(PlasticKnowledge::ReplayPack { logits, embeddings }))
        }
        Category::Reg => {
            let data = task_data.ok_or_else(|| {
                Error::InvalidArgument("reg plastic extraction needs task data".into())
            })?;
            let fisher = estimate_fisher(primary, data, fisher_mode)?;
            Ok(Some(PlasticKnowledge::RegPack {
                theta: primary.flatten(),
                fisher,
            }))
        }
        Category::Dyn => match &primary.extractor {
            crate::model::Extractor::Expanded { module, .. } => {
                Ok(Some(PlasticKnowledge::DynModule {
                    module: module.clone(),
                    classifier: primary.classifier.clone(),
                }))
            }
            crate::model::Extractor::Plain(_) => Ok(None),
        },
    }
}
