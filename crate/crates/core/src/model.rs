//! Model decomposition: feature extractor, linear classifier over the classes
//! seen so far, classifier growth across tasks, and extractor expansion for
//! the dynamic-architecture host.
//!
//! Parameters flatten to a canonical vector (extractor layers in order,
//! weights before biases, row-major, classifier rows last), so a model whose
//! classifier later gains rows embeds its old parameter vector as a prefix.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Init range for classifier rows, also used when re-seeding rows at the
/// phase-2 reset so both phases start from identical parameters.
pub const CLASSIFIER_INIT_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`, row-major.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = (self.out_dim(), self.in_dim());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut y = vec![0.0; m];
        for r in 0..m {
            let mut acc = 0.0;
            for c in 0..n {
                acc += w[r * n + c] * x[c];
            }
            acc += b[r];
            y[r] = match self.activation {
                Activation::Relu => acc.max(0.0),
                Activation::Linear => acc,
            };
        }
        y
    }
}

/// Plain fully connected stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Layer sizes `[in, h1, ..., out]`; hidden layers relu, last linear.
    pub fn seeded(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (l, win) in dims.windows(2).enumerate() {
            let (n, m) = (win[0], win[1]);
            let limit = (6.0 / (n + m) as f64).sqrt();
            let wdata: Vec<f64> = (0..m * n).map(|_| rng.random_range(-limit..limit)).collect();
            let activation = if l + 2 < dims.len() {
                Activation::Relu
            } else {
                Activation::Linear
            };
            layers.push(DenseLayer {
                weight: Tensor::matrix(m, n, wdata).expect("sized above"),
                bias: Tensor::vector(vec![0.0; m]),
                activation,
            });
        }
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Feature extractor: either a plain stack or a frozen base concatenated
/// with a trainable module. Nested expansion records the full growth
/// history; everything below the outermost module stays frozen.
#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    Plain(Mlp),
    Expanded {
        /// Not trainable; bytes must not change within a task.
        base: Box<Extractor>,
        /// The only trainable part of an expanded extractor.
        module: Mlp,
    },
}

impl Extractor {
    pub fn in_dim(&self) -> usize {
        match self {
            Extractor::Plain(m) => m.in_dim(),
            Extractor::Expanded { base, .. } => base.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Extractor::Plain(m) => m.out_dim(),
            Extractor::Expanded { base, module } => base.out_dim() + module.out_dim(),
        }
    }

    /// Embedding of `x`: expanded extractors concatenate base and module
    /// outputs in that order.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Extractor::Plain(m) => m.forward(x),
            Extractor::Expanded { base, module } => {
                let mut z = base.forward(x);
                z.extend(module.forward(x));
                z
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Extractor::Plain(m) => m.param_count(),
            Extractor::Expanded { base, module } => base.param_count() + module.param_count(),
        }
    }

    fn push_flat(&self, out: &mut Vec<f64>) {
        match self {
            Extractor::Plain(m) => {
                for l in &m.layers {
                    out.extend_from_slice(l.weight.data());
                    out.extend_from_slice(l.bias.data());
                }
            }
            Extractor::Expanded { base, module } => {
                base.push_flat(out);
                for l in &module.layers {
                    out.extend_from_slice(l.weight.data());
                    out.extend_from_slice(l.bias.data());
                }
            }
        }
    }

    fn fill_from_flat(&mut self, data: &[f64], pos: &mut usize) -> Result<()> {
        fn take(t: &mut Tensor, data: &[f64], pos: &mut usize) -> Result<()> {
            let n = t.len();
            if *pos + n > data.len() {
                return Err(Error::InvalidArgument("flat vector too short".into()));
            }
            t.data_mut().copy_from_slice(&data[*pos..*pos + n]);
            *pos += n;
            Ok(())
        }
        match self {
            Extractor::Plain(m) => {
                for l in &mut m.layers {
                    take(&mut l.weight, data, pos)?;
                    take(&mut l.bias, data, pos)?;
                }
            }
            Extractor::Expanded { base, module } => {
                base.fill_from_flat(data, pos)?;
                for l in &mut module.layers {
                    take(&mut l.weight, data, pos)?;
                    take(&mut l.bias, data, pos)?;
                }
            }
        }
        Ok(())
    }

    /// Canonical flat view, used for freeze-hash checks and checkpoints.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.push_flat(&mut out);
        out
    }
}

/// Architecture of a freshly initialized model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl ArchSpec {
    pub fn new(input_dim: usize) -> Self {
        ArchSpec {
            input_dim,
            hidden: vec![64, 64],
            embed_dim: 16,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }
}

/// Spec of the module attached by the dynamic-architecture host.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSpec {
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for ModuleSpec {
    fn default() -> Self {
        ModuleSpec {
            hidden: 32,
            out_dim: 16,
        }
    }
}

/// Full model: extractor plus a linear classifier (no bias) over the
/// classes seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extractor: Extractor,
    /// `[classes, embed_dim]`, row-major.
    pub classifier: Tensor,
}

impl ModelParams {
    pub fn seeded(arch: &ArchSpec, classes: usize, seed: u64) -> Self {
        let extractor = Extractor::Plain(Mlp::seeded(&arch.dims(), seed));
        let d = arch.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let data: Vec<f64> = (0..classes * d)
            .map(|_| rng.random_range(-CLASSIFIER_INIT_RANGE..CLASSIFIER_INIT_RANGE))
            .collect();
        ModelParams {
            extractor,
            classifier: Tensor::matrix(classes, d, data).expect("sized above"),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.classifier.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.extractor.param_count() + self.classifier.len()
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                node: "features".into(),
                detail: format!("input {} vs model {}", x.len(), self.input_dim()),
            });
        }
        Ok(self.extractor.forward(x))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.features(x)?;
        let (c, d) = (self.classes(), self.embed_dim());
        let w = self.classifier.data();
        let mut o = vec![0.0; c];
        for r in 0..c {
            let mut acc = 0.0;
            for k in 0..d {
                acc += w[r * d + k] * z[k];
            }
            o[r] = acc;
        }
        Ok(o)
    }

    /// Grow the classifier to `new_class_count` rows. Existing rows are
    /// copied bit for bit; new rows come from a seeded uniform init, so the
    /// same seed always produces the same rows.
    pub fn extend_classifier(&self, new_class_count: usize, seed: u64) -> Result<ModelParams> {
        let old = self.classes();
        if new_class_count <= old {
            return Err(Error::InvalidArgument(format!(
                "classifier must grow: {old} -> {new_class_count}"
            )));
        }
        let d = self.embed_dim();
        let mut data = self.classifier.data().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in old * d..new_class_count * d {
            data.push(rng.random_range(-CLASSIFIER_INIT_RANGE..CLASSIFIER_INIT_RANGE));
        }
        Ok(ModelParams {
            extractor: self.extractor.clone(),
            classifier: Tensor::matrix(new_class_count, d, data)?,
        })
    }

    /// Canonical flattened parameter vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.extractor.push_flat(&mut out);
        out.extend_from_slice(self.classifier.data());
        out
    }

    /// Inverse of [`flatten`](Self::flatten) against this model's structure.
    pub fn unflatten(&self, data: &[f64]) -> Result<ModelParams> {
        if data.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "flat vector has {} entries, model needs {}",
                data.len(),
                self.param_count()
            )));
        }
        let mut copy = self.clone();
        let mut pos = 0;
        copy.extractor.fill_from_flat(data, &mut pos)?;
        let n = copy.classifier.len();
        copy.classifier.data_mut().copy_from_slice(&data[pos..pos + n]);
        Ok(copy)
    }

    /// Trainable parameters as `(leaf name, tensor)` in a fixed order.
    /// For an expanded extractor only the outermost module and the
    /// classifier are trainable.
    pub fn named_trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.extractor {
            Extractor::Plain(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    out.push((format!("phi{i}.w"), &l.weight));
                    out.push((format!("phi{i}.b"), &l.bias));
                }
            }
            Extractor::Expanded { module, .. } => {
                for (i, l) in module.layers.iter().enumerate() {
                    out.push((format!("nu{i}.w"), &l.weight));
                    out.push((format!("nu{i}.b"), &l.bias));
                }
            }
        }
        out.push(("psi".to_string(), &self.classifier));
        out
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == "psi" {
            return Some(&mut self.classifier);
        }
        let (prefix, layers) = match &mut self.extractor {
            Extractor::Plain(m) => ("phi", &mut m.layers),
            Extractor::Expanded { module, .. } => ("nu", &mut module.layers),
        };
        let rest = name.strip_prefix(prefix)?;
        let (idx, field) = rest.split_once('.')?;
        let idx: usize = idx.parse().ok()?;
        let layer = layers.get_mut(idx)?;
        match field {
            "w" => Some(&mut layer.weight),
            "b" => Some(&mut layer.bias),
            _ => None,
        }
    }

    /// One SGD step: `theta <- theta - lr * grad` over the trainable set.
    pub fn apply_gradient_step(
        &mut self,
        grads: &crate::autodiff::GradientMap,
        lr: f64,
    ) -> Result<()> {
        let names: Vec<String> = self.named_trainable().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let g = match grads.get(&name) {
                Some(g) => g,
                None => continue,
            };
            let p = self
                .param_mut(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    node: format!("sgd '{name}'"),
                    detail: format!("grad {:?} vs param {:?}", g.shape(), p.shape()),
                });
            }
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}

enum ExtractorNodes {
    Chain(Vec<LayerNodes>),
    Expanded {
        base: Box<ExtractorNodes>,
        module: Vec<LayerNodes>,
    },
}

struct LayerNodes {
    w: NodeId,
    b: NodeId,
    activation: Activation,
}

/// Node handles for one model inside a graph. Trainable parameters enter as
/// leaves named like [`ModelParams::named_trainable`]; frozen parts are
/// baked in as constants, so no gradient can ever reach them.
pub struct ModelNodes {
    extractor: ExtractorNodes,
    classifier: NodeId,
}

fn mlp_nodes(
    g: &mut Graph,
    mlp: &Mlp,
    leaf_prefix: Option<&str>,
) -> Result<Vec<LayerNodes>> {
    let mut out = Vec::with_capacity(mlp.layers.len());
    for (i, layer) in mlp.layers.iter().enumerate() {
        let (w, b) = match leaf_prefix {
            Some(p) => (
                g.leaf(&format!("{p}{i}.w"), layer.weight.shape().to_vec())?,
                g.leaf(&format!("{p}{i}.b"), layer.bias.shape().to_vec())?,
            ),
            None => (g.constant(layer.weight.clone()), g.constant(layer.bias.clone())),
        };
        out.push(LayerNodes {
            w,
            b,
            activation: layer.activation,
        });
    }
    Ok(out)
}

fn frozen_extractor_nodes(g: &mut Graph, ext: &Extractor) -> Result<ExtractorNodes> {
    Ok(match ext {
        Extractor::Plain(m) => ExtractorNodes::Chain(mlp_nodes(g, m, None)?),
        Extractor::Expanded { base, module } => ExtractorNodes::Expanded {
            base: Box::new(frozen_extractor_nodes(g, base)?),
            module: mlp_nodes(g, module, None)?,
        },
    })
}

fn chain_forward(g: &mut Graph, layers: &[LayerNodes], x: NodeId) -> Result<NodeId> {
    let mut cur = x;
    for l in layers {
        cur = g.affine(l.w, cur, Some(l.b))?;
        if l.activation == Activation::Relu {
            cur = g.relu(cur);
        }
    }
    Ok(cur)
}

impl ExtractorNodes {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            ExtractorNodes::Chain(layers) => chain_forward(g, layers, x),
            ExtractorNodes::Expanded { base, module } => {
                let zb = base.forward(g, x)?;
                let zm = chain_forward(g, module, x)?;
                g.concat(&[zb, zm])
            }
        }
    }
}

impl ModelNodes {
    /// Embedding node for one input node.
    pub fn features(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.extractor.forward(g, x)
    }

    /// Logits node for one input node.
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z = self.features(g, x)?;
        g.affine(self.classifier, z, None)
    }

    /// Logits from a precomputed embedding node.
    pub fn logits_from_features(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        g.affine(self.classifier, z, None)
    }
}

impl ModelParams {
    /// Install this model's parameters into a graph.
    pub fn graph_nodes(&self, g: &mut Graph) -> Result<ModelNodes> {
        let extractor = match &self.extractor {
            Extractor::Plain(m) => ExtractorNodes::Chain(mlp_nodes(g, m, Some("phi"))?),
            Extractor::Expanded { base, module } => ExtractorNodes::Expanded {
                base: Box::new(frozen_extractor_nodes(g, base)?),
                module: mlp_nodes(g, module, Some("nu"))?,
            },
        };
        let classifier = g.leaf("psi", self.classifier.shape().to_vec())?;
        Ok(ModelNodes { extractor, classifier })
    }

    /// Leaf bindings for a graph built by [`graph_nodes`](Self::graph_nodes).
    pub fn bindings(&self) -> Bindings {
        self.named_trainable()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Names of the trainable leaves.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_trainable().into_iter().map(|(n, _)| n).collect()
    }

    /// Overwrite trainable parameters from a bindings map, by leaf name.
    pub fn bind_named(&mut self, bindings: &Bindings) -> Result<()> {
        for name in self.trainable_names() {
            if let Some(t) = bindings.get(&name) {
                let p = self.param_mut(&name).expect("trainable name resolves");
                if p.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        node: format!("bind '{name}'"),
                        detail: format!("{:?} vs {:?}", t.shape(), p.shape()),
                    });
                }
                p.data_mut().copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

/// Attach a fresh seeded module to a completed extractor. The old extractor
/// becomes the frozen base; its output dim and the module's add up.
pub fn expand_extractor(
    phi_s: &Extractor,
    spec: &ModuleSpec,
    seed: u64,
) -> Result<Extractor> {
    if spec.hidden == 0 || spec.out_dim == 0 {
        return Err(Error::InvalidArgument("module dims must be positive".into()));
    }
    let module = Mlp::seeded(&[phi_s.in_dim(), spec.hidden, spec.out_dim], seed);
    Ok(Extractor::Expanded {
        base: Box::new(phi_s.clone()),
        module,
    })
}

/// Widen a classifier from `[classes, d_old]` to `[classes, d_old + extra]`;
/// the added columns are seeded. Used when the extractor output grows.
pub fn widen_classifier(classifier: &Tensor, extra: usize, seed: u64) -> Result<Tensor> {
    let (c, d) = (classifier.shape()[0], classifier.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(c * (d + extra));
    for r in 0..c {
        data.extend_from_slice(&classifier.data()[r * d..(r + 1) * d]);
        for _ in 0..extra {
            data.push(rng.random_range(-CLASSIFIER_INIT_RANGE..CLASSIFIER_INIT_RANGE));
        }
    }
    Tensor::matrix(c, d + extra, data)
}

/// Snapshot role: stable (end of previous task) or primary (end of phase 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotRole {
    Stable,
    Primary,
}

/// Deep copy of a model, immutable after creation.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    role: SnapshotRole,
    params: ModelParams,
}

impl ModelSnapshot {
    pub fn new(role: SnapshotRole, params: &ModelParams) -> Self {
        ModelSnapshot {
            role,
            params: params.clone(),
        }
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_relu_model() -> ModelParams {
        let layer = DenseLayer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0, 0.0]),
            activation: Activation::Relu,
        };
        ModelParams {
            extractor: Extractor::Plain(Mlp { layers: vec![layer] }),
            classifier: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        }
    }

    #[test]
    fn identity_layer_passes_positive_input() {
        let m = identity_relu_model();
        assert_eq!(m.features(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative_input() {
        let m = identity_relu_model();
        assert_eq!(m.features(&[-1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_classifier_passes_embedding() {
        let m = identity_relu_model();
        assert_eq!(m.logits(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut m = identity_relu_model();
        m.classifier = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(m.logits(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn seeded_forward_matches_straight_line_oracle() {
        let arch = ArchSpec {
            input_dim: 3,
            hidden: vec![4],
            embed_dim: 2,
        };
        let m = ModelParams::seeded(&arch, 2, 0);
        let x = [0.3, -0.7, 1.1];

        // Independent re-computation layer by layer.
        let mlp = match &m.extractor {
            Extractor::Plain(p) => p,
            _ => unreachable!(),
        };
        let mut cur = x.to_vec();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let (mo, n) = (layer.out_dim(), layer.in_dim());
            let mut next = vec![0.0; mo];
            for r in 0..mo {
                let mut acc = layer.bias.data()[r];
                for c in 0..n {
                    acc += layer.weight.data()[r * n + c] * cur[c];
                }
                next[r] = if li + 1 < mlp.layers.len() { acc.max(0.0) } else { acc };
            }
            cur = next;
        }
        let got = m.features(&x).unwrap();
        for (a, b) in got.iter().zip(&cur) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composed_logits_equal_features_then_classifier() {
        let arch = ArchSpec::new(5);
        let m = ModelParams::seeded(&arch, 3, 9);
        let x: Vec<f64> = (0..5).map(|i| (i as f64) * 0.25 - 0.5).collect();
        let z = m.features(&x).unwrap();
        let d = m.embed_dim();
        let direct = m.logits(&x).unwrap();
        for r in 0..m.classes() {
            let manual: f64 = (0..d).map(|k| m.classifier.data()[r * d + k] * z[k]).sum();
            assert_eq!(direct[r], manual);
        }
    }

    #[test]
    fn extend_preserves_old_rows_bitwise() {
        let m = ModelParams::seeded(&ArchSpec::new(4), 2, 1);
        let bigger = m.extend_classifier(4, 77).unwrap();
        let d = m.embed_dim();
        assert_eq!(&bigger.classifier.data()[..2 * d], m.classifier.data());
        assert_eq!(bigger.classes(), 4);
    }

    #[test]
    fn extend_by_zero_is_rejected() {
        let m = ModelParams::seeded(&ArchSpec::new(4), 2, 1);
        assert!(m.extend_classifier(2, 0).is_err());
    }

    #[test]
    fn extend_is_deterministic_per_seed() {
        let m = ModelParams::seeded(&ArchSpec::new(4), 2, 1);
        let a = m.extend_classifier(5, 123).unwrap();
        let b = m.extend_classifier(5, 123).unwrap();
        assert_eq!(a.classifier.data(), b.classifier.data());
    }

    #[test]
    fn extension_never_perturbs_existing_logits() {
        let m = ModelParams::seeded(&ArchSpec::new(6), 2, 11);
        let bigger = m.extend_classifier(4, 5).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let old = m.logits(&x).unwrap();
        let new = bigger.logits(&x).unwrap();
        assert_eq!(&new[..2], old.as_slice());
    }

    #[test]
    fn expansion_concatenates_dims_and_outputs() {
        let m = ModelParams::seeded(
            &ArchSpec {
                input_dim: 3,
                hidden: vec![4],
                embed_dim: 2,
            },
            2,
            0,
        );
        let expanded = expand_extractor(
            &m.extractor,
            &ModuleSpec {
                hidden: 4,
                out_dim: 3,
            },
            42,
        )
        .unwrap();
        assert_eq!(expanded.out_dim(), 5);
        let x = [0.1, 0.2, 0.3];
        let joint = expanded.forward(&x);
        let (base_out, module_out) = match &expanded {
            Extractor::Expanded { base, module } => (base.forward(&x), module.forward(&x)),
            _ => unreachable!(),
        };
        for (k, v) in base_out.iter().chain(module_out.iter()).enumerate() {
            assert!((joint[k] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_roundtrip_is_identity() {
        let m = ModelParams::seeded(&ArchSpec::new(7), 4, 21);
        let flat = m.flatten();
        assert_eq!(flat.len(), m.param_count());
        let back = m.unflatten(&flat).unwrap();
        assert_eq!(back, m);
        assert!(m.unflatten(&flat[..flat.len() - 1]).is_err());
    }

    #[test]
    fn flatten_ordering_is_stable_across_runs() {
        let a = ModelParams::seeded(&ArchSpec::new(5), 3, 4).flatten();
        let b = ModelParams::seeded(&ArchSpec::new(5), 3, 4).flatten();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_forward_matches_straight_line_forward() {
        use crate::autodiff::Graph;
        let m = ModelParams::seeded(&ArchSpec::new(6), 3, 13);
        let mut g = Graph::new();
        let nodes = m.graph_nodes(&mut g).unwrap();
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let xn = g.constant(Tensor::vector(x.clone()));
        let o = nodes.logits(&mut g, xn).unwrap();
        g.set_output(o);
        let got = g.evaluate(&m.bindings()).unwrap();
        let expect = m.logits(&x).unwrap();
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expanded_graph_freezes_base() {
        use crate::autodiff::Graph;
        let m = ModelParams::seeded(&ArchSpec::new(4), 2, 3);
        let ext = expand_extractor(&m.extractor, &ModuleSpec::default(), 8).unwrap();
        let model = ModelParams {
            extractor: ext,
            classifier: widen_classifier(&m.classifier, 16, 9).unwrap(),
        };
        let mut g = Graph::new();
        let nodes = model.graph_nodes(&mut g).unwrap();
        let xn = g.constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]));
        let o = nodes.logits(&mut g, xn).unwrap();
        let sq = g.squared_norm(o);
        g.set_output(sq);
        let names: Vec<String> = g.leaf_names().cloned().collect();
        assert!(names.iter().all(|n| n == "psi" || n.starts_with("nu")));
        let grads = g.gradient(&model.bindings(), &names).unwrap();
        assert!(grads.get("psi").is_some());
        assert!(grads.get("nu0.w").is_some());
    }

    #[test]
    fn classifier_extension_keeps_flat_prefix() {
        let m = ModelParams::seeded(&ArchSpec::new(4), 2, 6);
        let bigger = m.extend_classifier(4, 9).unwrap();
        let small = m.flatten();
        let big = bigger.flatten();
        assert_eq!(&big[..small.len()], small.as_slice());
    }
}
