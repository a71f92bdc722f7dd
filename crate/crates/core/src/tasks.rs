//! Class-incremental task streams: synthetic Gaussian-blob benchmarks and a
//! small CSV loader. Streams are immutable once generated and are a pure
//! function of their spec.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One labeled example. Labels are global 0-based class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// One task: a disjoint class set with train and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Ordered sequence of tasks with pairwise disjoint class sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub input_dim: usize,
}

impl TaskStream {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }

    /// Classes seen up to and including task `t` (0-based).
    pub fn classes_through(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(|task| task.classes.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} appears in more than one task (task {i})"
                    )));
                }
            }
            for s in task.train.iter().chain(&task.test) {
                if !task.classes.contains(&s.y) {
                    return Err(Error::InvalidArgument(format!(
                        "label {} outside task {i}'s class set",
                        s.y
                    )));
                }
                if s.x.len() != self.input_dim {
                    return Err(Error::InvalidArgument(format!(
                        "sample width {} != input dim {}",
                        s.x.len(),
                        self.input_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Spec for the synthetic benchmark: `tasks` tasks of `classes_per_task`
/// isotropic unit-variance Gaussian blobs in `input_dim` dimensions, class
/// means on a seeded sphere of radius `separation`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 5,
            classes_per_task: 2,
            input_dim: 20,
            train_per_class: 100,
            test_per_class: 100,
            separation: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("input_dim", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.separation <= 0.0 {
            return Err(Error::InvalidArgument("separation must be > 0".into()));
        }
        Ok(())
    }
}

/// Deterministic synthetic class-incremental stream. Class `c` lives in
/// task `c / classes_per_task`; its samples are `mean_c + N(0, I)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.input_dim;
    let total = spec.tasks * spec.classes_per_task;

    let mut tasks = Vec::with_capacity(spec.tasks);
    let draw = |mean: &[f64], count: usize, y: usize, out: &mut Vec<Sample>, rng: &mut ChaCha8Rng| {
        for _ in 0..count {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(Sample { x, y });
        }
    };

    for t in 0..spec.tasks {
        let classes: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            debug_assert!(c < total);
            let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let mean: Vec<f64> = raw.iter().map(|v| v / norm * spec.separation).collect();
            draw(&mean, spec.train_per_class, c, &mut train, &mut rng);
            draw(&mean, spec.test_per_class, c, &mut test, &mut rng);
        }
        tasks.push(Task { classes, train, test });
    }
    let stream = TaskStream {
        tasks,
        input_dim: n,
    };
    stream.validate()?;
    Ok(stream)
}

fn parse_row(path: &str, lineno: usize, line: &str) -> Result<(usize, Vec<f64>)> {
    let mut fields = line.split(',').map(str::trim);
    let label_field = fields
        .next()
        .filter(|f| !f.is_empty())
        .ok_or_else(|| Error::Parse {
            path: path.into(),
            line: lineno,
            msg: "empty row".into(),
        })?;
    let label: usize = label_field.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line: lineno,
        msg: format!("bad label '{label_field}'"),
    })?;
    let mut x = Vec::new();
    for f in fields {
        let v: f64 = f.parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: lineno,
            msg: format!("bad feature '{f}'"),
        })?;
        x.push(v);
    }
    if x.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: lineno,
            msg: "row has no features".into(),
        });
    }
    Ok((label, x))
}

fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // Optional header: detected by a non-numeric first field.
        if i == 0 {
            let first = line.split(',').next().unwrap_or("").trim();
            if first.parse::<f64>().is_err() {
                continue;
            }
        }
        let (label, x) = parse_row(&name, i + 1, line)?;
        match width {
            None => width = Some(x.len()),
            Some(w) if w != x.len() => {
                return Err(Error::Parse {
                    path: name,
                    line: i + 1,
                    msg: format!("ragged row: {} features, expected {w}", x.len()),
                })
            }
            _ => {}
        }
        rows.push((label, x));
    }
    if rows.is_empty() {
        return Err(Error::EmptyData(name));
    }
    Ok(rows)
}

fn check_partition(partition: &[Vec<usize>]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for set in partition {
        for &c in set {
            if !seen.insert(c) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} appears in more than one partition element"
                )));
            }
        }
    }
    Ok(())
}

fn rows_to_tasks(
    path: &str,
    rows: Vec<(usize, Vec<f64>)>,
    partition: &[Vec<usize>],
    into_test: bool,
    tasks: &mut Vec<Task>,
) -> Result<()> {
    for (label, x) in rows {
        let t = partition
            .iter()
            .position(|set| set.contains(&label))
            .ok_or_else(|| Error::InvalidArgument(format!(
                "{path}: label {label} not covered by the partition"
            )))?;
        let sample = Sample { x, y: label };
        if into_test {
            tasks[t].test.push(sample);
        } else {
            tasks[t].train.push(sample);
        }
    }
    Ok(())
}

/// Load a `label, f1, ..., fn` CSV as a train-only stream ordered by the
/// partition. Header row optional. The partition's class sets must be
/// disjoint and cover every label in the file.
pub fn load_csv(path: &Path, partition: &[Vec<usize>]) -> Result<TaskStream> {
    load_csv_pair(path, None, partition)
}

/// Like [`load_csv`] but with a separate test-split file in the same format.
pub fn load_csv_pair(
    train_path: &Path,
    test_path: Option<&Path>,
    partition: &[Vec<usize>],
) -> Result<TaskStream> {
    check_partition(partition)?;
    let train_rows = read_rows(train_path)?;
    let input_dim = train_rows[0].1.len();
    let mut tasks: Vec<Task> = partition
        .iter()
        .map(|classes| Task {
            classes: classes.clone(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    rows_to_tasks(&train_path.display().to_string(), train_rows, partition, false, &mut tasks)?;
    if let Some(tp) = test_path {
        let test_rows = read_rows(tp)?;
        if test_rows[0].1.len() != input_dim {
            return Err(Error::InvalidArgument(format!(
                "test split width {} != train width {input_dim}",
                test_rows[0].1.len()
            )));
        }
        rows_to_tasks(&tp.display().to_string(), test_rows, partition, true, &mut tasks)?;
    }
    let stream = TaskStream { tasks, input_dim };
    stream.validate()?;
    Ok(stream)
}

fn write_rows(path: &Path, samples: impl Iterator<Item = Sample>) -> Result<()> {
    use std::io::Write;
    let name = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        for s in samples {
            write!(out, "{}", s.y)?;
            for v in &s.x {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    };
    emit().map_err(|e| Error::io(name, e))
}

/// Write the train and test splits of a stream as two CSV files.
pub fn write_csv_pair(stream: &TaskStream, train_path: &Path, test_path: &Path) -> Result<()> {
    write_rows(
        train_path,
        stream.tasks.iter().flat_map(|t| t.train.iter().cloned()),
    )?;
    write_rows(
        test_path,
        stream.tasks.iter().flat_map(|t| t.test.iter().cloned()),
    )
}

/// Seeded per-epoch minibatches: a shuffled pass over `samples`, last batch
/// possibly short.
pub fn batches(samples: &[Sample], batch_size: usize, epoch_seed: u64) -> Vec<Vec<Sample>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut index: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    // Fisher-Yates
    for i in (1..index.len()).rev() {
        let j = rng.random_range(0..=i);
        index.swap(i, j);
    }
    index
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| samples[i].clone()).collect())
        .collect()
}
