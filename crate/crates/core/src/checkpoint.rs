//! Versioned text checkpoints: architecture header plus the canonical
//! flattened parameter vector, with optional stable/plastic knowledge
//! sections in the same container.
//!
//! Floats are written in Rust's shortest round-trip form, so a load after a
//! save reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::knowledge::{FisherMatrix, PlasticKnowledge, StableKnowledge};
use crate::model::{Activation, DenseLayer, Extractor, Mlp, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &str = "flashback-checkpoint v1";

fn write_floats(out: &mut String, label: &str, data: &[f64]) {
    let _ = writeln!(out, "{label} {}", data.len());
    for v in data {
        let _ = writeln!(out, "{v}");
    }
}

fn write_extractor(out: &mut String, ext: &Extractor) {
    match ext {
        Extractor::Plain(m) => {
            let _ = writeln!(out, "extractor plain {}", m.layers.len());
            for l in &m.layers {
                let act = match l.activation {
                    Activation::Relu => "relu",
                    Activation::Linear => "linear",
                };
                let _ = writeln!(out, "layer {} {} {act}", l.in_dim(), l.out_dim());
            }
        }
        Extractor::Expanded { base, module } => {
            let _ = writeln!(out, "extractor expanded");
            write_extractor(out, base);
            let _ = writeln!(out, "module {}", module.layers.len());
            for l in &module.layers {
                let act = match l.activation {
                    Activation::Relu => "relu",
                    Activation::Linear => "linear",
                };
                let _ = writeln!(out, "layer {} {} {act}", l.in_dim(), l.out_dim());
            }
        }
    }
}

fn write_model_block(out: &mut String, model: &ModelParams) {
    let _ = writeln!(out, "model");
    write_extractor(out, &model.extractor);
    let _ = writeln!(
        out,
        "classifier {} {}",
        model.classes(),
        model.embed_dim()
    );
    write_floats(out, "params", &model.flatten());
}

fn write_fisher(out: &mut String, fisher: &FisherMatrix) {
    match fisher {
        FisherMatrix::Diag(d) => write_floats(out, "fisher diag", d),
        FisherMatrix::Full { dim, data } => {
            let _ = writeln!(out, "fisher full {dim}");
            for v in data {
                let _ = writeln!(out, "{v}");
            }
        }
    }
}

/// Serialize a model, optionally bundled with its knowledge bases.
pub fn bundle_string(
    model: &ModelParams,
    stable: Option<&StableKnowledge>,
    plastic: Option<&PlasticKnowledge>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    write_model_block(&mut out, model);
    if let Some(s) = stable {
        let _ = writeln!(out, "stable {}", s.category().name());
        match s {
            StableKnowledge::DistillSnapshot { snapshot } => {
                write_model_block(&mut out, snapshot.params())
            }
            StableKnowledge::ReplayPack { items } => {
                let _ = writeln!(out, "items {}", items.len());
                for it in items {
                    let _ = writeln!(out, "label {}", it.sample.y);
                    write_floats(&mut out, "x", &it.sample.x);
                    write_floats(&mut out, "logits", &it.stable_logits);
                    write_floats(&mut out, "embedding", &it.stable_embedding);
                }
            }
            StableKnowledge::RegPack { theta, fisher } => {
                write_floats(&mut out, "theta", theta);
                write_fisher(&mut out, fisher);
            }
            StableKnowledge::DynExtractor { extractor, classifier } => {
                write_extractor(&mut out, extractor);
                let _ = writeln!(
                    out,
                    "classifier {} {}",
                    classifier.shape()[0],
                    classifier.shape()[1]
                );
                write_floats(&mut out, "params", classifier.data());
            }
        }
    }
    if let Some(p) = plastic {
        let _ = writeln!(out, "plastic {}", p.category().name());
        match p {
            PlasticKnowledge::DistillSnapshot { snapshot } => {
                write_model_block(&mut out, snapshot.params())
            }
            PlasticKnowledge::ReplayPack { logits, embeddings } => {
                let _ = writeln!(out, "items {}", logits.len());
                for (o, z) in logits.iter().zip(embeddings) {
                    write_floats(&mut out, "logits", o);
                    write_floats(&mut out, "embedding", z);
                }
            }
            PlasticKnowledge::RegPack { theta, fisher } => {
                write_floats(&mut out, "theta", theta);
                write_fisher(&mut out, fisher);
            }
            PlasticKnowledge::DynModule { module, classifier } => {
                let _ = writeln!(out, "module {}", module.layers.len());
                for l in &module.layers {
                    let act = match l.activation {
                        Activation::Relu => "relu",
                        Activation::Linear => "linear",
                    };
                    let _ = writeln!(out, "layer {} {} {act}", l.in_dim(), l.out_dim());
                }
                let flat: Vec<f64> = module
                    .layers
                    .iter()
                    .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
                    .collect();
                write_floats(&mut out, "params", &flat);
                let _ = writeln!(
                    out,
                    "classifier {} {}",
                    classifier.shape()[0],
                    classifier.shape()[1]
                );
                write_floats(&mut out, "cparams", classifier.data());
            }
        }
    }
    out
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    lineno: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str, path: &str) -> Self {
        Reader {
            lines: text.lines().peekable(),
            lineno: 0,
            path: path.to_string(),
        }
    }

    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.lineno,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.lineno += 1;
        self.lines
            .next()
            .ok_or_else(|| Error::Parse {
                path: self.path.clone(),
                line: self.lineno,
                msg: "unexpected end of file".into(),
            })
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.lines.peek().copied()
    }

    fn expect_tag<'b>(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap_or("");
        if head != tag {
            return Err(self.bad(format!("expected '{tag}', got '{line}'")));
        }
        Ok(parts.collect())
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let line = self.next_line()?;
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| self.bad(format!("bad float '{line}'")))?;
            out.push(v);
        }
        Ok(out)
    }

    fn labeled_floats(&mut self, label: &str) -> Result<Vec<f64>> {
        let args = self.expect_tag(label)?;
        let n: usize = args
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.bad(format!("bad {label} count")))?;
        self.floats(n)
    }
}

fn parse_layers(r: &mut Reader, count: usize) -> Result<Vec<DenseLayer>> {
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let args = r.expect_tag("layer")?;
        if args.len() != 3 {
            return Err(r.bad("layer wants '<in> <out> <activation>'"));
        }
        let in_dim: usize = args[0].parse().map_err(|_| r.bad("bad layer in dim"))?;
        let out_dim: usize = args[1].parse().map_err(|_| r.bad("bad layer out dim"))?;
        let activation = match args[2] {
            "relu" => Activation::Relu,
            "linear" => Activation::Linear,
            other => return Err(r.bad(format!("unknown activation '{other}'"))),
        };
        layers.push(DenseLayer {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
            activation,
        });
    }
    Ok(layers)
}

fn parse_extractor(r: &mut Reader) -> Result<Extractor> {
    let args = r.expect_tag("extractor")?;
    match args.first().copied() {
        Some("plain") => {
            let count: usize = args
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| r.bad("bad plain layer count"))?;
            Ok(Extractor::Plain(Mlp {
                layers: parse_layers(r, count)?,
            }))
        }
        Some("expanded") => {
            let base = parse_extractor(r)?;
            let margs = r.expect_tag("module")?;
            let count: usize = margs
                .first()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| r.bad("bad module layer count"))?;
            Ok(Extractor::Expanded {
                base: Box::new(base),
                module: Mlp {
                    layers: parse_layers(r, count)?,
                },
            })
        }
        other => Err(r.bad(format!("unknown extractor kind {other:?}"))),
    }
}

fn parse_model_block(r: &mut Reader) -> Result<ModelParams> {
    r.expect_tag("model")?;
    let extractor = parse_extractor(r)?;
    let cargs = r.expect_tag("classifier")?;
    if cargs.len() != 2 {
        return Err(r.bad("classifier wants '<classes> <dim>'"));
    }
    let classes: usize = cargs[0].parse().map_err(|_| r.bad("bad class count"))?;
    let dim: usize = cargs[1].parse().map_err(|_| r.bad("bad classifier dim"))?;
    let skeleton = ModelParams {
        extractor,
        classifier: Tensor::zeros(vec![classes, dim]),
    };
    let params = r.labeled_floats("params")?;
    skeleton.unflatten(&params)
}

/// Parse a checkpoint produced by [`bundle_string`]. Knowledge sections are
/// returned when present.
pub fn parse_bundle(
    text: &str,
    path: &str,
) -> Result<(ModelParams, Option<StableKnowledge>, Option<PlasticKnowledge>)> {
    let mut r = Reader::new(text, path);
    let magic = r.next_line()?;
    if magic.trim() != MAGIC {
        return Err(r.bad(format!("expected '{MAGIC}'")));
    }
    let model = parse_model_block(&mut r)?;

    let mut stable = None;
    if matches!(r.peek(), Some(l) if l.starts_with("stable ")) {
        let args = r.expect_tag("stable")?;
        let category = args.first().copied().unwrap_or("");
        stable = Some(match category {
            "distill" => StableKnowledge::DistillSnapshot {
                snapshot: crate::model::ModelSnapshot::new(
                    crate::model::SnapshotRole::Stable,
                    &parse_model_block(&mut r)?,
                ),
            },
            "replay" => {
                let iargs = r.expect_tag("items")?;
                let count: usize = iargs
                    .first()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| r.bad("bad item count"))?;
                let mut items = Vec::with_capacity(count);
                for _ in 0..count {
                    let largs = r.expect_tag("label")?;
                    let y: usize = largs
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| r.bad("bad label"))?;
                    let x = r.labeled_floats("x")?;
                    let logits = r.labeled_floats("logits")?;
                    let embedding = r.labeled_floats("embedding")?;
                    items.push(crate::knowledge::MemoryItem {
                        sample: crate::tasks::Sample { x, y },
                        stable_logits: logits,
                        stable_embedding: embedding,
                    });
                }
                StableKnowledge::ReplayPack { items }
            }
            "reg" => {
                let theta = r.labeled_floats("theta")?;
                let fargs = r.expect_tag("fisher")?;
                let fisher = match fargs.first().copied() {
                    Some("diag") => {
                        let n: usize = fargs
                            .get(1)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| r.bad("bad diag count"))?;
                        FisherMatrix::Diag(r.floats(n)?)
                    }
                    Some("full") => {
                        let dim: usize = fargs
                            .get(1)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| r.bad("bad full dim"))?;
                        FisherMatrix::Full {
                            dim,
                            data: r.floats(dim * dim)?,
                        }
                    }
                    other => return Err(r.bad(format!("unknown fisher mode {other:?}"))),
                };
                StableKnowledge::RegPack { theta, fisher }
            }
            "dyn" => {
                let extractor = parse_extractor(&mut r)?;
                let cargs = r.expect_tag("classifier")?;
                let classes: usize =
                    cargs[0].parse().map_err(|_| r.bad("bad class count"))?;
                let dim: usize = cargs[1].parse().map_err(|_| r.bad("bad dim"))?;
                let data = r.labeled_floats("params")?;
                StableKnowledge::DynExtractor {
                    extractor,
                    classifier: Tensor::matrix(classes, dim, data)?,
                }
            }
            other => return Err(r.bad(format!("unknown stable category '{other}'"))),
        });
    }

    let mut plastic = None;
    if matches!(r.peek(), Some(l) if l.starts_with("plastic ")) {
        let args = r.expect_tag("plastic")?;
        let category = args.first().copied().unwrap_or("");
        plastic = Some(match category {
            "distill" => PlasticKnowledge::DistillSnapshot {
                snapshot: crate::model::ModelSnapshot::new(
                    crate::model::SnapshotRole::Primary,
                    &parse_model_block(&mut r)?,
                ),
            },
            "replay" => {
                let iargs = r.expect_tag("items")?;
                let count: usize = iargs
                    .first()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| r.bad("bad item count"))?;
                let mut logits = Vec::with_capacity(count);
                let mut embeddings = Vec::with_capacity(count);
                for _ in 0..count {
                    logits.push(r.labeled_floats("logits")?);
                    embeddings.push(r.labeled_floats("embedding")?);
                }
                PlasticKnowledge::ReplayPack { logits, embeddings }
            }
            "reg" => {
                let theta = r.labeled_floats("theta")?;
                let fargs = r.expect_tag("fisher")?;
                let fisher = match fargs.first().copied() {
                    Some("diag") => {
                        let n: usize = fargs
                            .get(1)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| r.bad("bad diag count"))?;
                        FisherMatrix::Diag(r.floats(n)?)
                    }
                    Some("full") => {
                        let dim: usize = fargs
                            .get(1)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| r.bad("bad full dim"))?;
                        FisherMatrix::Full {
                            dim,
                            data: r.floats(dim * dim)?,
                        }
                    }
                    other => return Err(r.bad(format!("unknown fisher mode {other:?}"))),
                };
                PlasticKnowledge::RegPack { theta, fisher }
            }
            "dyn" => {
                let margs = r.expect_tag("module")?;
                let count: usize = margs
                    .first()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| r.bad("bad module layer count"))?;
                let mut layers = parse_layers(&mut r, count)?;
                let flat = r.labeled_floats("params")?;
                let mut pos = 0usize;
                for l in &mut layers {
                    let wn = l.weight.len();
                    if pos + wn + l.bias.len() > flat.len() {
                        return Err(r.bad("module params too short"));
                    }
                    l.weight = Tensor::new(
                        l.weight.shape().to_vec(),
                        flat[pos..pos + wn].to_vec(),
                    )?;
                    pos += wn;
                    let bn = l.bias.len();
                    l.bias = Tensor::vector(flat[pos..pos + bn].to_vec());
                    pos += bn;
                }
                let cargs = r.expect_tag("classifier")?;
                let classes: usize =
                    cargs[0].parse().map_err(|_| r.bad("bad class count"))?;
                let dim: usize = cargs[1].parse().map_err(|_| r.bad("bad dim"))?;
                let data = r.labeled_floats("cparams")?;
                PlasticKnowledge::DynModule {
                    module: Mlp { layers },
                    classifier: Tensor::matrix(classes, dim, data)?,
                }
            }
            other => return Err(r.bad(format!("unknown plastic category '{other}'"))),
        });
    }

    Ok((model, stable, plastic))
}

/// Write a bundle to disk.
pub fn save_bundle(
    path: &Path,
    model: &ModelParams,
    stable: Option<&StableKnowledge>,
    plastic: Option<&PlasticKnowledge>,
) -> Result<()> {
    std::fs::write(path, bundle_string(model, stable, plastic))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a bundle from disk.
pub fn load_bundle(
    path: &Path,
) -> Result<(ModelParams, Option<StableKnowledge>, Option<PlasticKnowledge>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_bundle(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{snapshot_stable, Category, MemoryBuffer};
    use crate::model::{expand_extractor, widen_classifier, ArchSpec, ModuleSpec};
    use rand::SeedableRng;

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let m = ModelParams::seeded(&ArchSpec::new(5), 3, 17);
        let text = bundle_string(&m, None, None);
        let (back, s, p) = parse_bundle(&text, "test").unwrap();
        assert_eq!(back, m);
        assert!(s.is_none() && p.is_none());
    }

    #[test]
    fn expanded_model_roundtrip() {
        let base = ModelParams::seeded(&ArchSpec::new(4), 2, 3);
        let m = ModelParams {
            extractor: expand_extractor(&base.extractor, &ModuleSpec::default(), 9).unwrap(),
            classifier: widen_classifier(&base.classifier, 16, 5).unwrap(),
        };
        let text = bundle_string(&m, None, None);
        let (back, _, _) = parse_bundle(&text, "test").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn replay_bundle_roundtrip() {
        let m = ModelParams::seeded(&ArchSpec::new(4), 2, 3);
        let mut buf = MemoryBuffer::new(8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for i in 0..5 {
            buf.reservoir_insert(
                crate::tasks::Sample {
                    x: vec![i as f64, 0.5, -0.25, 1.0],
                    y: i % 2,
                },
                &mut rng,
            );
        }
        let s = snapshot_stable(Category::Replay, &m, Some(&mut buf), None).unwrap();
        let p = crate::knowledge::extract_plastic(
            Category::Replay,
            &m,
            Some(&s),
            None,
            crate::knowledge::FisherMode::Diag,
        )
        .unwrap()
        .unwrap();
        let text = bundle_string(&m, Some(&s), Some(&p));
        let (back, s2, p2) = parse_bundle(&text, "test").unwrap();
        assert_eq!(back, m);
        match (s, s2.unwrap()) {
            (
                StableKnowledge::ReplayPack { items: a },
                StableKnowledge::ReplayPack { items: b },
            ) => assert_eq!(a, b),
            _ => panic!("variant lost"),
        }
        match (p, p2.unwrap()) {
            (
                PlasticKnowledge::ReplayPack { logits: a, .. },
                PlasticKnowledge::ReplayPack { logits: b, .. },
            ) => assert_eq!(a, b),
            _ => panic!("variant lost"),
        }
    }

    #[test]
    fn reg_bundle_roundtrip() {
        let m = ModelParams::seeded(&ArchSpec::new(4), 2, 3);
        let s = StableKnowledge::RegPack {
            theta: m.flatten(),
            fisher: FisherMatrix::Diag(vec![0.25; m.param_count()]),
        };
        let text = bundle_string(&m, Some(&s), None);
        let (_, s2, _) = parse_bundle(&text, "test").unwrap();
        match (s, s2.unwrap()) {
            (
                StableKnowledge::RegPack { theta: a, fisher: fa },
                StableKnowledge::RegPack { theta: b, fisher: fb },
            ) => {
                assert_eq!(a, b);
                assert_eq!(fa, fb);
            }
            _ => panic!("variant lost"),
        }
    }

    #[test]
    fn truncated_input_reports_line() {
        let m = ModelParams::seeded(&ArchSpec::new(3), 2, 1);
        let text = bundle_string(&m, None, None);
        let cut: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            parse_bundle(&cut, "cut"),
            Err(Error::Parse { .. })
        ));
    }
}
