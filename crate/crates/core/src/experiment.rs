//! Config-driven experiment runs: schedules (seed, host, mode) jobs over a
//! bounded worker pool, writes per-run accuracy matrices, the aggregate
//! `results.csv`, paired t-tests and budget audits, and recomputes metrics
//! from stored matrices. All outputs are deterministically ordered, so a
//! repeated run reproduces every file byte for byte.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{BenchmarkSpec, ExperimentConfig, Regime};
use crate::error::{Error, Result};
use crate::hosts::HostConfig;
use crate::metrics::{
    matrix_csv_string, parse_matrix_csv, report, AccuracyMatrix, MetricReport, PairedTTest,
};
use crate::rngutil::{subseed, Stream};
use crate::tasks::{generate_synthetic, load_csv_pair, TaskStream};
use crate::training::{budget_audit, run_stream, BudgetReport, FlConfig, Mode, RunRecord};

/// Bounded worker pool over a fixed job list; results keep job order.
pub fn parallel_map<J, R, F>(jobs: Vec<J>, workers: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    let n = jobs.len();
    let workers = if workers == 0 {
        std::thread::available_parallelism()
            .map(|p| p.get())
            .unwrap_or(1)
            .min(8)
    } else {
        workers
    }
    .clamp(1, n.max(1));

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("pool lock").get_mut(i).map(|slot| *slot = Some(r));
            });
        }
    });
    results
        .into_inner()
        .expect("pool lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Build the task stream for one run seed: a pinned benchmark seed freezes
/// it across seeds, otherwise it derives from the run seed's task-gen
/// stream.
pub fn build_stream(benchmark: &BenchmarkSpec, run_seed: u64) -> Result<TaskStream> {
    match benchmark {
        BenchmarkSpec::Synthetic { spec, pinned_seed } => {
            let mut spec = spec.clone();
            spec.seed = pinned_seed.unwrap_or_else(|| subseed(run_seed, Stream::TaskGen, 0));
            generate_synthetic(&spec)
        }
        BenchmarkSpec::Csv {
            train,
            test,
            partition,
        } => load_csv_pair(train, test.as_deref(), partition),
    }
}

/// One scheduled run.
#[derive(Clone, Debug)]
pub struct Job {
    pub seed: u64,
    pub host: HostConfig,
    pub mode: Mode,
    pub fl: FlConfig,
}

/// A finished run with its audit.
pub struct RunOutcome {
    pub job: Job,
    pub record: RunRecord,
    pub budget: BudgetReport,
}

fn execute(job: &Job, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let stream = build_stream(&cfg.benchmark, job.seed)?;
    let arch = cfg.arch(stream.input_dim);
    let fl = match job.mode {
        Mode::Fl => Some(&job.fl),
        Mode::Cl => None,
    };
    let record = run_stream(job.mode, &job.host, fl, &stream, &arch, job.seed)?;
    let budget = budget_audit(&record, &job.host, fl);
    Ok(RunOutcome {
        job: job.clone(),
        record,
        budget,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "na".into(),
    }
}

/// One aggregate row of `results.csv`.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub seed: u64,
    pub host: String,
    pub mode: Mode,
    pub regime: Regime,
    pub report: MetricReport,
}

impl ResultRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.host,
            self.mode.name(),
            self.regime.name(),
            self.report.aa,
            self.report.aia,
            fmt_opt(self.report.forgetting),
            fmt_opt(self.report.bwt),
            fmt_opt(self.report.fwt),
            fmt_opt(self.report.spr),
        )
    }
}

fn rows_for(outcome: &RunOutcome, regimes: &[Regime]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &regime in regimes {
        let (matrix, baseline): (&AccuracyMatrix, Option<&[f64]>) = match regime {
            Regime::Ci => (&outcome.record.matrix_ci, None),
            Regime::Ti => (
                &outcome.record.matrix_ti,
                Some(&outcome.record.fwt_baseline_ti),
            ),
        };
        rows.push(ResultRow {
            seed: outcome.job.seed,
            host: outcome.job.host.category.name().to_string(),
            mode: outcome.record.mode,
            regime,
            report: report(matrix, baseline)?,
        });
    }
    Ok(rows)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

const RESULTS_HEADER: &str = "seed,host,mode,regime,AA,AIA,F,BWT,FWT,SPR";

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (
            &a.host,
            a.mode.name(),
            a.regime.name(),
            a.seed,
        )
            .cmp(&(&b.host, b.mode.name(), b.regime.name(), b.seed))
    });
}

fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Paired t-test rows per host and regime (FL against CL over shared seeds).
fn ttest_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("host,regime,metric,t,p,n\n");
    let mut hosts: Vec<&str> = rows.iter().map(|r| r.host.as_str()).collect();
    hosts.sort_unstable();
    hosts.dedup();
    for host in hosts {
        for regime in [Regime::Ci, Regime::Ti] {
            let pick = |mode: Mode| -> Vec<(u64, f64)> {
                let mut v: Vec<(u64, f64)> = rows
                    .iter()
                    .filter(|r| r.host == host && r.mode == mode && r.regime == regime)
                    .map(|r| (r.seed, r.report.aa))
                    .collect();
                v.sort_by_key(|&(s, _)| s);
                v
            };
            let cl = pick(Mode::Cl);
            let fl = pick(Mode::Fl);
            if cl.len() < 2 || cl.len() != fl.len() {
                continue;
            }
            if cl.iter().map(|&(s, _)| s).ne(fl.iter().map(|&(s, _)| s)) {
                continue;
            }
            let a: Vec<f64> = fl.iter().map(|&(_, v)| v).collect();
            let b: Vec<f64> = cl.iter().map(|&(_, v)| v).collect();
            match crate::metrics::paired_t_test(&a, &b) {
                Ok(Some(PairedTTest { t, p, n })) => {
                    out.push_str(&format!("{host},{},AA,{t},{p},{n}\n", regime.name()));
                }
                Ok(None) => {
                    out.push_str(&format!(
                        "{host},{},AA,na,na,{}\n",
                        regime.name(),
                        a.len()
                    ));
                }
                Err(_) => {}
            }
        }
    }
    out
}

fn budget_csv(outcomes: &[&RunOutcome]) -> String {
    let mut out = String::from("host,mode,seed,epochs_per_task,units_per_task,pass,violations\n");
    let mut sorted: Vec<&&RunOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| {
        (
            a.job.host.category.name(),
            a.job.mode.name(),
            a.job.seed,
        )
            .cmp(&(b.job.host.category.name(), b.job.mode.name(), b.job.seed))
    });
    for o in sorted {
        let epochs: Vec<String> = o.budget.epochs_per_task.iter().map(|e| e.to_string()).collect();
        let units: Vec<String> = o.budget.units_per_task.iter().map(|u| u.to_string()).collect();
        let violations: Vec<String> = o
            .budget
            .violations
            .iter()
            .map(|v| format!("task{}:{}", v.task, v.detail.replace(',', ";")))
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.job.host.category.name(),
            o.job.mode.name(),
            o.job.seed,
            epochs.join(" "),
            units.join(" "),
            o.budget.pass,
            violations.join(" | ")
        ));
    }
    out
}

/// Summary of a batch run.
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<(Job, String)>,
    pub outcomes: Vec<RunOutcome>,
    pub output_dir: PathBuf,
}

impl RunSummary {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Run every (seed, host, mode) combination of the config and write the
/// output files under `output_dir`: one matrix CSV per run, `results.csv`,
/// `ttest.csv`, `budget.csv`, optionally `plot_data.csv`, and
/// `failures.csv` when a run fails mid-flight.
pub fn cmd_run(cfg: &ExperimentConfig, emit_plot_data: bool) -> Result<RunSummary> {
    let mut jobs = Vec::new();
    for host in &cfg.hosts {
        for &mode in &cfg.modes {
            for &seed in &cfg.seeds {
                jobs.push(Job {
                    seed,
                    host: host.clone(),
                    mode,
                    fl: cfg.fl.clone(),
                });
            }
        }
    }

    let results = parallel_map(jobs, cfg.workers, |job| (job.clone(), execute(job, cfg)));

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (job, result) in results {
        match result {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => failures.push((job, e.to_string())),
        }
    }

    // Per-run matrix files.
    for o in &outcomes {
        let name = format!(
            "matrix_{}_{}_seed{}.csv",
            o.job.host.category.name(),
            o.job.mode.name(),
            o.job.seed
        );
        let mut parts: Vec<(&str, &AccuracyMatrix)> = Vec::new();
        if cfg.regimes.contains(&Regime::Ci) {
            parts.push(("CI", &o.record.matrix_ci));
        }
        if cfg.regimes.contains(&Regime::Ti) {
            parts.push(("TI", &o.record.matrix_ti));
        }
        write_file(&cfg.output_dir.join(name), &matrix_csv_string(&parts))?;
    }

    let mut rows = Vec::new();
    for o in &outcomes {
        rows.extend(rows_for(o, &cfg.regimes)?);
    }
    sort_rows(&mut rows);
    write_file(&cfg.output_dir.join("results.csv"), &results_csv(&rows))?;
    write_file(&cfg.output_dir.join("ttest.csv"), &ttest_csv(&rows))?;
    write_file(
        &cfg.output_dir.join("budget.csv"),
        &budget_csv(&outcomes.iter().collect::<Vec<_>>()),
    )?;

    if emit_plot_data {
        let mut out = String::from("seed,host,mode,regime,t,j,acc\n");
        let mut sorted: Vec<&RunOutcome> = outcomes.iter().collect();
        sorted.sort_by(|a, b| {
            (a.job.host.category.name(), a.job.mode.name(), a.job.seed).cmp(&(
                b.job.host.category.name(),
                b.job.mode.name(),
                b.job.seed,
            ))
        });
        for o in sorted {
            for (regime, matrix) in [("CI", &o.record.matrix_ci), ("TI", &o.record.matrix_ti)] {
                if !cfg.regimes.iter().any(|r| r.name() == regime) {
                    continue;
                }
                for (t, j, acc) in matrix.cells() {
                    out.push_str(&format!(
                        "{},{},{},{regime},{t},{j},{acc}\n",
                        o.job.seed,
                        o.job.host.category.name(),
                        o.job.mode.name()
                    ));
                }
            }
        }
        write_file(&cfg.output_dir.join("plot_data.csv"), &out)?;
    }

    if !failures.is_empty() {
        let mut out = String::from("seed,host,mode,error\n");
        for (job, msg) in &failures {
            out.push_str(&format!(
                "{},{},{},{}\n",
                job.seed,
                job.host.category.name(),
                job.mode.name(),
                msg.replace(',', ";")
            ));
        }
        write_file(&cfg.output_dir.join("failures.csv"), &out)?;
    }

    Ok(RunSummary {
        rows,
        failures,
        outcomes,
        output_dir: cfg.output_dir.clone(),
    })
}

/// Sweepable hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    AlphaP,
    E1,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha_p" => Ok(SweepParam::AlphaP),
            "e1" | "E1" => Ok(SweepParam::E1),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter '{other}' (expected alpha_p or e1)"
            ))),
        }
    }
}

/// Sweep summary: merged rows tagged with their sweep value.
pub struct SweepSummary {
    pub rows: Vec<(f64, ResultRow)>,
    pub failures: Vec<(f64, Job, String)>,
    pub budgets_pass: bool,
}

/// One `cmd_run` per sweep value, merged into `sweep.csv` with a
/// `sweep_value` column. An `alpha_p` value of zero runs the plain CL
/// baseline (the protocol's scenario 1); an `e1` sweep holds `e1 + e2`
/// fixed at the host budget.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepSummary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut merged = Vec::new();
    let mut failures = Vec::new();
    let mut budgets_pass = true;
    for &value in values {
        let mut sub = cfg.clone();
        sub.output_dir = cfg.output_dir.join(format!("sweep_{value}"));
        match param {
            SweepParam::AlphaP => {
                if value == 0.0 {
                    sub.modes = vec![Mode::Cl];
                } else {
                    sub.modes = vec![Mode::Fl];
                    sub.fl.alpha_p = value;
                }
            }
            SweepParam::E1 => {
                let e1 = value as usize;
                let epochs = sub.hosts[0].epochs_cl;
                if value < 0.0 || value.fract() != 0.0 || e1 + 1 > epochs {
                    return Err(Error::InvalidArgument(format!(
                        "e1 value {value} must be an integer in [0, {})",
                        epochs
                    )));
                }
                sub.modes = vec![Mode::Fl];
                sub.fl.e1 = e1;
                sub.fl.e2 = epochs - e1;
            }
        }
        let summary = cmd_run(&sub, false)?;
        for o in &summary.outcomes {
            if !o.budget.pass {
                budgets_pass = false;
            }
        }
        for row in summary.rows {
            merged.push((value, row));
        }
        for (job, msg) in summary.failures {
            failures.push((value, job, msg));
        }
    }
    merged.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                (
                    &a.1.host,
                    a.1.mode.name(),
                    a.1.regime.name(),
                    a.1.seed,
                )
                    .cmp(&(&b.1.host, b.1.mode.name(), b.1.regime.name(), b.1.seed))
            })
    });
    let mut out = format!("sweep_value,{RESULTS_HEADER}\n");
    for (value, row) in &merged {
        out.push_str(&format!("{value},{}\n", row.csv_line()));
    }
    write_file(&cfg.output_dir.join("sweep.csv"), &out)?;
    Ok(SweepSummary {
        rows: merged,
        failures,
        budgets_pass,
    })
}

/// Machine-readable metrics line for one regime.
pub fn machine_line(regime: &str, t: usize, r: &MetricReport) -> String {
    format!(
        "METRICS regime={regime} T={t} aa={} aia={} f={} bwt={} fwt={} spr={}",
        r.aa,
        r.aia,
        fmt_opt(r.forgetting),
        fmt_opt(r.bwt),
        fmt_opt(r.fwt),
        fmt_opt(r.spr),
    )
}

/// Parse a [`machine_line`] back into a report; the inverse is exercised by
/// the round-trip tests.
pub fn parse_machine_line(line: &str) -> Result<(String, MetricReport)> {
    let mut regime = String::new();
    let mut report = MetricReport::default();
    let bad = |msg: String| Error::InvalidArgument(msg);
    for field in line.split_whitespace().skip(1) {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("bad field '{field}'")))?;
        let opt = |v: &str| -> Result<Option<f64>> {
            if v == "na" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(format!("bad float '{v}'")))
            }
        };
        match key {
            "regime" => regime = value.to_string(),
            "T" => {}
            "aa" => report.aa = value.parse().map_err(|_| bad("bad aa".into()))?,
            "aia" => report.aia = value.parse().map_err(|_| bad("bad aia".into()))?,
            "f" => report.forgetting = opt(value)?,
            "bwt" => report.bwt = opt(value)?,
            "fwt" => report.fwt = opt(value)?,
            "spr" => report.spr = opt(value)?,
            other => return Err(bad(format!("unknown field '{other}'"))),
        }
    }
    Ok((regime, report))
}

/// Recompute every metric from a stored matrix CSV; returns the printable
/// report (one human block and one machine line per regime).
pub fn cmd_metrics(path: &Path) -> Result<String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let matrices = parse_matrix_csv(&text)?;
    if matrices.is_empty() {
        return Err(Error::EmptyData(path.display().to_string()));
    }
    let mut out = String::new();
    for (regime, matrix) in &matrices {
        // Baseline row (t = 0) feeds forward transfer when present.
        let baseline: Vec<f64> = (1..=matrix.task_count())
            .map(|j| matrix.get(0, j).unwrap_or(f64::NAN))
            .collect();
        let baseline_ok = baseline.iter().all(|v| v.is_finite());
        let r = report(matrix, baseline_ok.then_some(baseline.as_slice()))?;
        out.push_str(&format!(
            "regime {regime} (T = {})\n  AA  = {}\n  AIA = {}\n  F   = {}\n  BWT = {}\n  FWT = {}\n  SPR = {}\n",
            matrix.task_count(),
            r.aa,
            r.aia,
            fmt_opt(r.forgetting),
            fmt_opt(r.bwt),
            fmt_opt(r.fwt),
            fmt_opt(r.spr),
        ));
        out.push_str(&machine_line(regime, matrix.task_count(), &r));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let text = format!(
            "benchmark.tasks=2\nbenchmark.input_dim=6\nbenchmark.train_per_class=12\n\
             benchmark.test_per_class=6\nhosts=distill\nhost.batch_size=8\nhost.epochs=3\n\
             fl.e1=1\nfl.e2=2\nseeds=0\nmodes=CL,FL\nmodel.hidden=8\nmodel.embed_dim=4\n\
             output_dir={}\nworkers=2\n",
            dir.display()
        );
        parse_config(&text, "test").unwrap()
    }

    #[test]
    fn run_writes_expected_files() {
        let dir = std::env::temp_dir().join(format!("fl-exp-{}", std::process::id()));
        let cfg = tiny_config(&dir);
        let summary = cmd_run(&cfg, true).unwrap();
        assert!(summary.all_ok());
        assert!(dir.join("results.csv").exists());
        assert!(dir.join("ttest.csv").exists());
        assert!(dir.join("budget.csv").exists());
        assert!(dir.join("plot_data.csv").exists());
        assert!(dir.join("matrix_distill_CL_seed0.csv").exists());
        assert!(dir.join("matrix_distill_FL_seed0.csv").exists());
        let results = std::fs::read_to_string(dir.join("results.csv")).unwrap();
        // header + 2 modes x 2 regimes
        assert_eq!(results.lines().count(), 5);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let dir = std::env::temp_dir().join(format!("fl-det-{}", std::process::id()));
        let cfg = tiny_config(&dir);
        cmd_run(&cfg, false).unwrap();
        let first = std::fs::read_to_string(dir.join("results.csv")).unwrap();
        cmd_run(&cfg, false).unwrap();
        let second = std::fs::read_to_string(dir.join("results.csv")).unwrap();
        assert_eq!(first, second);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn metrics_roundtrip_from_stored_matrix() {
        let dir = std::env::temp_dir().join(format!("fl-met-{}", std::process::id()));
        let cfg = tiny_config(&dir);
        let summary = cmd_run(&cfg, false).unwrap();
        let text = cmd_metrics(&dir.join("matrix_distill_CL_seed0.csv")).unwrap();
        let machine: Vec<&str> = text
            .lines()
            .filter(|l| l.starts_with("METRICS"))
            .collect();
        assert_eq!(machine.len(), 2);
        let (regime, parsed) = parse_machine_line(machine[0]).unwrap();
        let row = summary
            .rows
            .iter()
            .find(|r| r.mode == Mode::Cl && r.regime.name() == regime)
            .unwrap();
        assert_eq!(parsed.aa, row.report.aa);
        assert_eq!(parsed.aia, row.report.aia);
        assert_eq!(parsed.forgetting, row.report.forgetting);
        assert_eq!(parsed.fwt, row.report.fwt);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sweep_tags_rows_and_runs_cl_at_zero() {
        let dir = std::env::temp_dir().join(format!("fl-sweep-{}", std::process::id()));
        let mut cfg = tiny_config(&dir);
        cfg.modes = vec![Mode::Fl];
        let summary = cmd_sweep(&cfg, SweepParam::AlphaP, &[0.0, 0.01]).unwrap();
        assert!(summary.failures.is_empty());
        let zero_rows: Vec<_> = summary.rows.iter().filter(|(v, _)| *v == 0.0).collect();
        assert!(zero_rows.iter().all(|(_, r)| r.mode == Mode::Cl));
        let nz: Vec<_> = summary.rows.iter().filter(|(v, _)| *v == 0.01).collect();
        assert!(nz.iter().all(|(_, r)| r.mode == Mode::Fl));
        assert!(dir.join("sweep.csv").exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn e1_sweep_respects_budget() {
        let dir = std::env::temp_dir().join(format!("fl-sweepe1-{}", std::process::id()));
        let mut cfg = tiny_config(&dir);
        cfg.modes = vec![Mode::Fl];
        let summary = cmd_sweep(&cfg, SweepParam::E1, &[0.0, 1.0, 2.0]).unwrap();
        assert!(summary.budgets_pass);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn parallel_map_keeps_job_order() {
        let jobs: Vec<usize> = (0..50).collect();
        let out = parallel_map(jobs, 4, |&j| j * 2);
        assert_eq!(out, (0..50).map(|j| j * 2).collect::<Vec<_>>());
    }
}
