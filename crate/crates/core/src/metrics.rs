//! Stability/plasticity evaluation: accuracy matrices, AA/AIA/Forgetting,
//! backward/forward transfer, the stability-plasticity ratio, linear CKA and
//! a paired t-test.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Accuracies indexed `(t, j)`, 1-based: `A[t][j]` is the accuracy on task
/// `j` after training task `t`. Besides the lower triangle (`j <= t`) the
/// matrix may carry pre-training evaluations `A[t][t+1]` (task `t+1` scored
/// before training it) and a random-init baseline row at `t = 0`; both feed
/// forward transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: BTreeMap<(usize, usize), f64>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            cells: BTreeMap::new(),
        }
    }

    pub fn task_count(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, t: usize, j: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {acc} outside [0, 1]"
            )));
        }
        let valid = j >= 1 && j <= self.tasks && t <= self.tasks && (t == 0 || j <= t + 1);
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "cell ({t}, {j}) outside the occupancy for T = {}",
                self.tasks
            )));
        }
        self.cells.insert((t, j), acc);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.cells.get(&(t, j)).copied()
    }

    fn require(&self, t: usize, j: usize) -> Result<f64> {
        self.get(t, j)
            .ok_or_else(|| Error::InvalidArgument(format!("matrix cell ({t}, {j}) missing")))
    }

    /// All stored cells in deterministic order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.cells.iter().map(|(&(t, j), &a)| (t, j, a))
    }

    pub fn triangle_complete(&self) -> bool {
        (1..=self.tasks).all(|t| (1..=t).all(|j| self.cells.contains_key(&(t, j))))
    }
}

/// Mean accuracy over every task after the last one.
pub fn average_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    let t_count = a.task_count();
    let mut acc = 0.0;
    for j in 1..=t_count {
        acc += a.require(t_count, j)?;
    }
    Ok(acc / t_count as f64)
}

/// Mean over tasks of the running mean accuracy after each task.
pub fn average_incremental_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    let t_count = a.task_count();
    let mut outer = 0.0;
    for t in 1..=t_count {
        let mut inner = 0.0;
        for j in 1..=t {
            inner += a.require(t, j)?;
        }
        outer += inner / t as f64;
    }
    Ok(outer / t_count as f64)
}

/// Mean drop from each old task's best recorded accuracy to its final one.
/// Not applicable for a single task.
pub fn forgetting(a: &AccuracyMatrix) -> Result<Option<f64>> {
    let t_count = a.task_count();
    if t_count < 2 {
        return Ok(None);
    }
    let mut acc = 0.0;
    for t in 1..t_count {
        let mut best = f64::NEG_INFINITY;
        for k in t..t_count {
            best = best.max(a.require(k, t)?);
        }
        acc += best - a.require(t_count, t)?;
    }
    Ok(Some(acc / (t_count - 1) as f64))
}

/// Mean change on old tasks between learning them and the end of the run.
pub fn backward_transfer(a: &AccuracyMatrix) -> Result<Option<f64>> {
    let t_count = a.task_count();
    if t_count < 2 {
        return Ok(None);
    }
    let mut acc = 0.0;
    for i in 1..t_count {
        acc += a.require(t_count, i)? - a.require(i, i)?;
    }
    Ok(Some(acc / (t_count - 1) as f64))
}

/// Mean advantage of pre-training evaluations over the random-init
/// baseline `b[i]` (0-based over tasks). Needs the `A[i-1][i]` band;
/// not applicable when absent.
pub fn forward_transfer(a: &AccuracyMatrix, baseline: &[f64]) -> Result<Option<f64>> {
    let t_count = a.task_count();
    if t_count < 2 || baseline.len() < t_count {
        return Ok(None);
    }
    let mut acc = 0.0;
    for i in 2..=t_count {
        match a.get(i - 1, i) {
            Some(pre) => acc += pre - baseline[i - 1],
            None => return Ok(None),
        }
    }
    Ok(Some(acc / (t_count - 1) as f64))
}

/// Stability-plasticity ratio: forgetting on old classes over accuracy on
/// the new classes, times 100. Undefined at zero new-class accuracy.
pub fn spr(forgetting_old: f64, acc_new: f64) -> Option<f64> {
    if acc_new == 0.0 {
        return None;
    }
    Some(forgetting_old / acc_new * 100.0)
}

/// SPR from a completed matrix: forgetting plus the last diagonal cell.
pub fn spr_from_matrix(a: &AccuracyMatrix) -> Result<Option<f64>> {
    let f = match forgetting(a)? {
        Some(f) => f,
        None => return Ok(None),
    };
    let acc_new = a.require(a.task_count(), a.task_count())?;
    Ok(spr(f, acc_new))
}

/// Linear centered kernel alignment between two feature matrices (rows are
/// samples). Invariant to orthogonal transforms and isotropic scaling;
/// not applicable when either input has zero variance.
pub fn linear_cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Option<f64>> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::InvalidArgument(format!(
            "cka needs matching row counts >= 2, got {} and {}",
            n,
            y.len()
        )));
    }
    let center = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let d = m[0].len();
        let mut mean = vec![0.0; d];
        for row in m {
            for (k, &v) in row.iter().enumerate() {
                mean[k] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        m.iter()
            .map(|row| row.iter().zip(&mean).map(|(&v, &mu)| v - mu).collect())
            .collect()
    };
    let xc = center(x);
    let yc = center(y);
    let cross_fro = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        // || A^T B ||_F^2
        let (da, db) = (a[0].len(), b[0].len());
        let mut acc = 0.0;
        for p in 0..da {
            for q in 0..db {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += a[r][p] * b[r][q];
                }
                acc += dot * dot;
            }
        }
        acc
    };
    let xx = cross_fro(&xc, &xc).sqrt();
    let yy = cross_fro(&yc, &yc).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(None);
    }
    Ok(Some(cross_fro(&xc, &yc) / (xx * yy)))
}

/// Paired t-test result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    /// Two-sided p-value from the t distribution with `n - 1` degrees of
    /// freedom.
    pub p: f64,
    pub n: usize,
}

/// Two-sided paired t-test of `a` against `b`. `None` marks the degenerate
/// zero-variance case.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<Option<PairedTTest>> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            n,
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(&u, &v)| u - v).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(None);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = (n - 1) as f64;
    let p = regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    Ok(Some(PairedTTest { t, p, n }))
}

/// Regularized incomplete beta `I_x(a, b)` via the Lentz continued
/// fraction. Drives the t-distribution tail probability.
fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp();
    // Symmetry keeps the continued fraction in its fast-converging region.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..200 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.323428777653_13,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984369578019572e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Everything the harness reports for one run and regime.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricReport {
    pub aa: f64,
    pub aia: f64,
    pub forgetting: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub spr: Option<f64>,
}

/// Compute the full report from a matrix, with an optional random-init
/// baseline for forward transfer.
pub fn report(a: &AccuracyMatrix, baseline: Option<&[f64]>) -> Result<MetricReport> {
    Ok(MetricReport {
        aa: average_accuracy(a)?,
        aia: average_incremental_accuracy(a)?,
        forgetting: forgetting(a)?,
        bwt: backward_transfer(a)?,
        fwt: match baseline {
            Some(b) => forward_transfer(a, b)?,
            None => None,
        },
        spr: spr_from_matrix(a)?,
    })
}

/// Serialize matrices (one per regime) into the interchange CSV: a `T`
/// header, a column header, then `t,j,acc,regime` rows.
pub fn matrix_csv_string(matrices: &[(&str, &AccuracyMatrix)]) -> String {
    let t = matrices.first().map(|(_, m)| m.task_count()).unwrap_or(0);
    let mut out = format!("T,{t}\nt,j,acc,regime\n");
    for (regime, m) in matrices {
        for (ti, j, acc) in m.cells() {
            out.push_str(&format!("{ti},{j},{acc},{regime}\n"));
        }
    }
    out
}

/// Parse the interchange CSV back into per-regime matrices, in first-seen
/// regime order.
pub fn parse_matrix_csv(text: &str) -> Result<Vec<(String, AccuracyMatrix)>> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: String| Error::Parse {
        path: "matrix csv".into(),
        line,
        msg,
    };
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(1, "empty matrix csv".into()))?;
    let t: usize = header
        .strip_prefix("T,")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(1, format!("expected 'T,<count>', got '{header}'")))?;
    let mut out: Vec<(String, AccuracyMatrix)> = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with("t,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let ti: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(i + 1, format!("bad t '{}'", fields[0])))?;
        let j: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| bad(i + 1, format!("bad j '{}'", fields[1])))?;
        let acc: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(i + 1, format!("bad acc '{}'", fields[2])))?;
        let regime = fields[3].trim().to_string();
        let entry = match out.iter_mut().find(|(r, _)| *r == regime) {
            Some((_, m)) => m,
            None => {
                out.push((regime, AccuracyMatrix::new(t)));
                &mut out.last_mut().expect("just pushed").1
            }
        };
        entry.set(ti, j, acc)?;
    }
    Ok(out)
}
