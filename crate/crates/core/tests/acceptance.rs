//! Acceptance suite: one test per exit criterion, each printing a single
//! PASS line (visible with `cargo test --test acceptance -- --nocapture`).
//! Tolerances and thresholds are pinned in code; a failed criterion fails
//! its test.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flashback::autodiff::{finite_diff_gradient, Bindings, Graph};
use flashback::config::parse_config;
use flashback::experiment::{cmd_run, cmd_sweep, SweepParam};
use flashback::knowledge::Category;
use flashback::losses::cosine_equivalence_check;
use flashback::metrics;
use flashback::tensor::Tensor;
use flashback::theory;

fn pass(criterion: &str, detail: String) {
    println!("ACCEPTANCE {criterion} PASS: {detail}");
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("flashback-accept-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

/// Criterion 1: autodiff vs central finite differences on 50 random MLP
/// configurations with up to 500 parameters, max relative error <= 1e-5,
/// inside 10 seconds.
#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut biggest = 0usize;
    for case in 0..50 {
        // Random layer sizes, capped so P <= 500.
        let (input, hidden, classes) = loop {
            let input = rng.random_range(2..=10usize);
            let hidden = rng.random_range(4..=16usize);
            let classes = rng.random_range(2..=5usize);
            let p = hidden * (input + 1) + hidden * hidden + hidden + classes * hidden;
            if p <= 500 {
                break (input, hidden, classes);
            }
        };
        let dims = [input, hidden, hidden, classes];

        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cur = g.constant(Tensor::vector(x));
        for (l, win) in dims.windows(2).enumerate() {
            let (n, m) = (win[0], win[1]);
            let w = g.leaf(&format!("w{l}"), vec![m, n]).unwrap();
            let b = g.leaf(&format!("b{l}"), vec![m]).unwrap();
            bindings.insert(
                format!("w{l}"),
                Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(-0.7..0.7)).collect())
                    .unwrap(),
            );
            bindings.insert(
                format!("b{l}"),
                Tensor::vector((0..m).map(|_| rng.random_range(-0.2..0.2)).collect()),
            );
            cur = g.affine(w, cur, Some(b)).unwrap();
            if l + 2 < dims.len() {
                cur = g.relu(cur);
            }
        }
        let sm = g.softmax(cur, 1.0).unwrap();
        let lg = g.log(sm);
        let mut target: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = target.iter().sum();
        target.iter_mut().for_each(|v| *v /= z);
        let t = g.constant(Tensor::vector(target));
        let picked = g.mul(lg, t).unwrap();
        let tot = g.sum(picked);
        let loss = g.scale(tot, -1.0);
        g.set_output(loss);

        let p: usize = bindings.values().map(|t| t.len()).sum();
        biggest = biggest.max(p);
        let names: Vec<String> = g.leaf_names().cloned().collect();
        let grads = g.gradient(&bindings, &names).unwrap();
        let fd = finite_diff_gradient(
            |b| Ok(g.evaluate(b)?.as_scalar().unwrap()),
            &bindings,
            1e-6,
        )
        .unwrap();
        for name in &names {
            let a = grads.get(name).unwrap().data();
            let e = fd.get(name).unwrap().data();
            for k in 0..a.len() {
                let rel = (a[k] - e[k]).abs() / e[k].abs().max(1.0);
                worst = worst.max(rel);
                assert!(rel <= 1e-5, "case {case} leaf {name}[{k}]: rel err {rel}");
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "oracle took {elapsed:?}, budget 10 s"
    );
    pass(
        "criterion-01",
        format!(
            "50 configs (P up to {biggest}), max rel err {worst:.2e} <= 1e-5 in {elapsed:?}"
        ),
    );
}

/// Criterion 2: distillation and replay decomposition identities, 100
/// random cases each at P <= 64, max-abs <= 1e-9.
#[test]
fn criterion_02_theorem_1_and_2_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for category in [Category::Distill, Category::Replay] {
        for case in 0..100 {
            let alpha_s = 0.2 + 0.05 * (case % 10) as f64;
            let alpha_p = 0.05 + 0.07 * (case % 7) as f64;
            let d = theory::check_decomposition(category, alpha_s, alpha_p, 1.0, &mut rng)
                .unwrap();
            worst = worst.max(d);
            assert!(d <= 1e-9, "{category:?} case {case}: {d}");
        }
    }
    pass(
        "criterion-02",
        format!("200 cases, max discrepancy {worst:.2e} <= 1e-9"),
    );
}

/// Criterion 3: parameter-regularization decomposition, exact to 1e-12.
#[test]
fn criterion_03_theorem_3_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let alpha_s = 0.2 + 0.05 * (case % 10) as f64;
        let alpha_p = 0.05 + 0.07 * (case % 7) as f64;
        let d =
            theory::check_decomposition(Category::Reg, alpha_s, alpha_p, 1.0, &mut rng).unwrap();
        worst = worst.max(d);
        assert!(d <= 1e-12, "case {case}: {d}");
    }
    pass(
        "criterion-03",
        format!("100 cases, max discrepancy {worst:.2e} <= 1e-12"),
    );
}

/// Criterion 4: dynamic-architecture decomposition with tempered softmax
/// targets, 100 cases per temperature in {1, 2, 5}, max-abs <= 1e-9.
#[test]
fn criterion_04_theorem_4_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for tau in [1.0, 2.0, 5.0] {
        for case in 0..100 {
            let alpha_s = 0.2 + 0.05 * (case % 10) as f64;
            let alpha_p = 0.05 + 0.07 * (case % 7) as f64;
            let d = theory::check_decomposition(Category::Dyn, alpha_s, alpha_p, tau, &mut rng)
                .unwrap();
            worst = worst.max(d);
            assert!(d <= 1e-9, "tau {tau} case {case}: {d}");
        }
    }
    pass(
        "criterion-04",
        format!("300 cases over tau in {{1,2,5}}, max discrepancy {worst:.2e} <= 1e-9"),
    );
}

/// Criterion 5: SGD recursion (iterated vs unrolled) at k in {1, 5, 25}
/// <= 1e-8, and the zero-gradient fixed points at k = 500 <= 1e-6.
#[test]
fn criterion_05_sgd_recursion_and_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let quad = theory::QuadraticTask {
        a: {
            let g: Vec<f64> = (0..24 * 24).map(|_| rng.random_range(-0.4..0.4)).collect();
            let mut m = vec![0.0; 24 * 24];
            for r in 0..24 {
                for c in 0..24 {
                    m[r * 24 + c] = (0..24).map(|k| g[k * 24 + r] * g[k * 24 + c]).sum();
                }
            }
            m
        },
        b: (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        dim: 24,
    };
    let mut worst: f64 = 0.0;
    for task in [None, Some(&quad)] {
        let discs =
            theory::check_sgd_recursion(24, 0.05, 0.8, 0.5, &[1, 5, 25], task, &mut rng).unwrap();
        for (k, d) in discs {
            worst = worst.max(d);
            assert!(d <= 1e-8, "k={k}: {d}");
        }
    }
    let (fl, cl) = theory::check_fixed_point(16, 500, &mut rng).unwrap();
    assert!(fl <= 1e-6, "FL fixed point: {fl}");
    assert!(cl <= 1e-6, "CL fixed point: {cl}");
    pass(
        "criterion-05",
        format!(
            "recursion max {worst:.2e} <= 1e-8; fixed points fl {fl:.2e} / cl {cl:.2e} <= 1e-6"
        ),
    );
}

/// Criterion 6: cosine-vs-half-squared-distance equivalence on 1000 random
/// pairs, <= 1e-12.
#[test]
fn criterion_06_cosine_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(2..=16usize);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (lhs, rhs) = cosine_equivalence_check(&a, &b).unwrap();
        let diff = (lhs - rhs).abs();
        worst = worst.max(diff);
        assert!(diff <= 1e-12);
    }
    pass(
        "criterion-06",
        format!("1000 pairs, max |lhs - rhs| {worst:.2e} <= 1e-12"),
    );
}

fn base_config(dir: &PathBuf, extra: &str) -> String {
    format!("output_dir={}\n{extra}", dir.display())
}

/// Criterion 7: with alpha_p = 0 and E2 = E_CL, an FL batch reproduces the
/// CL batch exactly: results.csv byte-identical up to the mode token, and
/// every per-run accuracy matrix byte-identical. Default benchmark, all
/// four hosts, 3 seeds.
#[test]
fn criterion_07_degeneracy() {
    let dir_cl = scratch_dir("c7cl");
    let dir_fl = scratch_dir("c7fl");
    let cl_cfg = parse_config(
        &base_config(&dir_cl, "seeds=0,1,2\nmodes=CL\n"),
        "c7-cl",
    )
    .unwrap();
    let fl_cfg = parse_config(
        &base_config(
            &dir_fl,
            "seeds=0,1,2\nmodes=FL\nfl.alpha_p=0\nfl.e1=2\nfl.e2=30\n",
        ),
        "c7-fl",
    )
    .unwrap();
    let cl = cmd_run(&cl_cfg, false).unwrap();
    let fl = cmd_run(&fl_cfg, false).unwrap();
    assert!(cl.all_ok() && fl.all_ok());

    let cl_results = std::fs::read_to_string(dir_cl.join("results.csv")).unwrap();
    let fl_results = std::fs::read_to_string(dir_fl.join("results.csv")).unwrap();
    assert_eq!(
        cl_results,
        fl_results.replace(",FL,", ",CL,"),
        "results.csv must match byte for byte up to the mode token"
    );

    let mut matrices = 0usize;
    for host in ["distill", "replay", "reg", "dyn"] {
        for seed in 0..3 {
            let a = std::fs::read_to_string(
                dir_cl.join(format!("matrix_{host}_CL_seed{seed}.csv")),
            )
            .unwrap();
            let b = std::fs::read_to_string(
                dir_fl.join(format!("matrix_{host}_FL_seed{seed}.csv")),
            )
            .unwrap();
            assert_eq!(a, b, "{host} seed {seed}");
            matrices += 1;
        }
    }
    std::fs::remove_dir_all(&dir_cl).ok();
    std::fs::remove_dir_all(&dir_fl).ok();
    pass(
        "criterion-07",
        format!("{matrices} matrices and results.csv identical across CL and degenerate FL"),
    );
}

/// Criterion 8: every FL run spends exactly E1 + E2 = E_CL epochs per task
/// and holds twice the CL knowledge units, for all four hosts.
#[test]
fn criterion_08_budget_audit() {
    let dir = scratch_dir("c8");
    let cfg = parse_config(&base_config(&dir, "seeds=0\n"), "c8").unwrap();
    let summary = cmd_run(&cfg, false).unwrap();
    assert!(summary.all_ok());
    let mut audited = 0usize;
    for o in &summary.outcomes {
        assert!(
            o.budget.pass,
            "{} {} violations: {:?}",
            o.job.host.category.name(),
            o.record.mode.name(),
            o.budget.violations
        );
        for (t, trace) in o.record.traces.iter().enumerate() {
            match o.record.mode {
                flashback::training::Mode::Fl => {
                    assert_eq!(trace.epochs_total(), 5 + 25, "FL epochs at task {t}");
                    if t >= 1 {
                        assert_eq!(trace.units_total(), 2, "FL units at task {t}");
                    }
                }
                flashback::training::Mode::Cl => {
                    assert_eq!(trace.epochs_total(), 30, "CL epochs at task {t}");
                    if t >= 1 {
                        assert_eq!(trace.units_total(), 1, "CL units at task {t}");
                    }
                }
            }
        }
        audited += 1;
    }
    std::fs::remove_dir_all(&dir).ok();
    pass(
        "criterion-08",
        format!("{audited} runs: FL epochs = 5 + 25 = 30 = E_CL, FL units = 2 x CL units"),
    );
}

/// Criterion 9: directional reproduction on the default benchmark, 10
/// seeds, all four hosts: FL improves mean AA and mean SPR in the CI regime
/// on at least 3 of 4 hosts, with a positive paired t statistic, in under
/// five minutes.
#[test]
fn criterion_09_directional_reproduction() {
    let start = Instant::now();
    let dir = scratch_dir("c9");
    let cfg = parse_config(
        &base_config(&dir, "seeds=0,1,2,3,4,5,6,7,8,9\n"),
        "c9",
    )
    .unwrap();
    let summary = cmd_run(&cfg, false).unwrap();
    assert!(summary.all_ok(), "failures: {:?}", summary.failures);

    let mut winners = Vec::new();
    let mut lines = Vec::new();
    for host in ["distill", "replay", "reg", "dyn"] {
        let pick = |mode: &str| -> Vec<(u64, f64, Option<f64>)> {
            let mut v: Vec<(u64, f64, Option<f64>)> = summary
                .rows
                .iter()
                .filter(|r| {
                    r.host == host && r.regime.name() == "CI" && r.mode.name() == mode
                })
                .map(|r| (r.seed, r.report.aa, r.report.spr))
                .collect();
            v.sort_by_key(|&(s, _, _)| s);
            v
        };
        let cl = pick("CL");
        let fl = pick("FL");
        assert_eq!(cl.len(), 10);
        assert_eq!(fl.len(), 10);
        let aa_cl: Vec<f64> = cl.iter().map(|&(_, a, _)| a).collect();
        let aa_fl: Vec<f64> = fl.iter().map(|&(_, a, _)| a).collect();
        let spr_cl: Vec<f64> = cl.iter().filter_map(|&(_, _, s)| s).collect();
        let spr_fl: Vec<f64> = fl.iter().filter_map(|&(_, _, s)| s).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let aa_gain = mean(&aa_fl) - mean(&aa_cl);
        let spr_gain = mean(&spr_cl) - mean(&spr_fl);
        let t = metrics::paired_t_test(&aa_fl, &aa_cl)
            .unwrap()
            .map(|r| r.t)
            .unwrap_or(0.0);
        lines.push(format!(
            "{host}: dAA={aa_gain:+.4} t={t:+.2} dSPR={:+.2}",
            spr_gain
        ));
        if aa_gain >= 0.0 && spr_gain >= 0.0 && t > 0.0 {
            winners.push(host);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        winners.len() >= 3,
        "only {winners:?} improved; details: {lines:?}"
    );
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "experiment took {elapsed:?}, budget 5 min"
    );
    std::fs::remove_dir_all(&dir).ok();
    pass(
        "criterion-09",
        format!(
            "{}/4 hosts improved ({}) in {elapsed:?}",
            winners.len(),
            lines.join("; ")
        ),
    );
}

/// Criterion 10: the alpha_p ablation sweep is not monotone; the mean-AA
/// maximizer lies strictly inside {0, 0.001, 0.01, 0.1, 1} for at least one
/// host, averaged over 10 seeds. Run on the distillation host at the
/// ablation setting alpha_s = 0.2.
#[test]
fn criterion_10_alpha_p_sweep_shape() {
    let dir = scratch_dir("c10");
    let cfg = parse_config(
        &base_config(
            &dir,
            "seeds=0,1,2,3,4,5,6,7,8,9\nhosts=distill\nhost.alpha_s=0.2\nmodes=FL\n",
        ),
        "c10",
    )
    .unwrap();
    let values = [0.0, 0.001, 0.01, 0.1, 1.0];
    let summary = cmd_sweep(&cfg, SweepParam::AlphaP, &values).unwrap();
    assert!(summary.failures.is_empty());

    let mean_aa: Vec<f64> = values
        .iter()
        .map(|&v| {
            let aa: Vec<f64> = summary
                .rows
                .iter()
                .filter(|(value, r)| *value == v && r.regime.name() == "CI")
                .map(|(_, r)| r.report.aa)
                .collect();
            assert_eq!(aa.len(), 10, "value {v}");
            aa.iter().sum::<f64>() / aa.len() as f64
        })
        .collect();
    let argmax = (0..values.len())
        .max_by(|&a, &b| mean_aa[a].partial_cmp(&mean_aa[b]).unwrap())
        .unwrap();
    let monotone_up = mean_aa.windows(2).all(|w| w[1] >= w[0]);
    let monotone_down = mean_aa.windows(2).all(|w| w[1] <= w[0]);
    assert!(
        !monotone_up && !monotone_down,
        "sweep is monotone: {mean_aa:?}"
    );
    assert!(
        argmax != 0 && argmax != values.len() - 1,
        "maximizer at the boundary: {mean_aa:?}"
    );
    std::fs::remove_dir_all(&dir).ok();
    pass(
        "criterion-10",
        format!(
            "AA over alpha_p {values:?} = {:?}, interior max at {}",
            mean_aa
                .iter()
                .map(|v| (v * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            values[argmax]
        ),
    );
}

/// Criterion 11: the toy-matrix metric values, exactly.
#[test]
fn criterion_11_metric_unit_values() {
    // AA on A[2][1] = 0.5, A[2][2] = 0.7.
    let mut aa_m = metrics::AccuracyMatrix::new(2);
    aa_m.set(1, 1, 0.9).unwrap();
    aa_m.set(2, 1, 0.5).unwrap();
    aa_m.set(2, 2, 0.7).unwrap();
    assert_eq!(metrics::average_accuracy(&aa_m).unwrap(), 0.6);

    // AIA on A[1][1] = 0.9, A[2][1] = 0.7, A[2][2] = 0.8.
    let mut aia_m = metrics::AccuracyMatrix::new(2);
    aia_m.set(1, 1, 0.9).unwrap();
    aia_m.set(2, 1, 0.7).unwrap();
    aia_m.set(2, 2, 0.8).unwrap();
    assert_eq!(metrics::average_incremental_accuracy(&aia_m).unwrap(), 0.825);

    // Forgetting on the same matrix: 0.9 - 0.7 = 0.2.
    assert_eq!(metrics::forgetting(&aia_m).unwrap(), Some(0.2));

    // SPR at F = 20%, new-class accuracy 80%.
    assert_eq!(metrics::spr(0.2, 0.8), Some(25.0));

    pass(
        "criterion-11",
        "AA=0.6, AIA=0.825, F=0.2, SPR(0.2, 0.8)=25.0 exactly".to_string(),
    );
}

/// Criterion 12: CKA properties — identity, orthogonal and scale
/// invariance to 1e-10, symmetry to 1e-12.
#[test]
fn criterion_12_cka_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let n = 40;
    let d = 6;
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let self_sim = metrics::linear_cka(&x, &x).unwrap().unwrap();
    assert!((self_sim - 1.0).abs() <= 1e-10, "CKA(X,X) = {self_sim}");

    // Random orthogonal Q by Gram-Schmidt.
    let mut q: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| q[i][k] * q[j][k]).sum();
            for k in 0..d {
                q[i][k] -= dot * q[j][k];
            }
        }
        let norm: f64 = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in 0..d {
            q[i][k] /= norm;
        }
    }
    let xq: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            (0..d)
                .map(|j| (0..d).map(|k| row[k] * q[j][k]).sum())
                .collect()
        })
        .collect();
    let orth = metrics::linear_cka(&x, &xq).unwrap().unwrap();
    assert!((orth - 1.0).abs() <= 1e-10, "CKA(X, XQ) = {orth}");

    let scaled: Vec<Vec<f64>> = x
        .iter()
        .map(|row| row.iter().map(|&v| -3.25 * v).collect())
        .collect();
    let sc = metrics::linear_cka(&x, &scaled).unwrap().unwrap();
    assert!((sc - 1.0).abs() <= 1e-10, "CKA(X, cX) = {sc}");

    let y: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ab = metrics::linear_cka(&x, &y).unwrap().unwrap();
    let ba = metrics::linear_cka(&y, &x).unwrap().unwrap();
    assert!((ab - ba).abs() <= 1e-12, "symmetry: {ab} vs {ba}");

    pass(
        "criterion-12",
        format!("identity/orthogonal/scale within 1e-10, symmetry within 1e-12 (|d|={:.1e})", (ab - ba).abs()),
    );
}

/// Criterion 13: a fixed config produces byte-identical output files across
/// two invocations, and the theory suite reports identically.
#[test]
fn criterion_13_determinism() {
    let dir_a = scratch_dir("c13a");
    let dir_b = scratch_dir("c13b");
    let body = "seeds=0,1\nhosts=replay,dyn\nbenchmark.tasks=3\nbenchmark.train_per_class=20\n\
                benchmark.test_per_class=10\nhost.epochs=5\nfl.e1=1\nfl.e2=4\nworkers=4\n";
    let cfg_a = parse_config(&base_config(&dir_a, body), "c13a").unwrap();
    let cfg_b = parse_config(&base_config(&dir_b, body), "c13b").unwrap();
    cmd_run(&cfg_a, true).unwrap();
    cmd_run(&cfg_b, true).unwrap();

    let mut files: Vec<String> = std::fs::read_dir(&dir_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert!(files.contains(&"results.csv".to_string()));
    for name in &files {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between invocations");
    }

    let opts = theory::SuiteOptions {
        cases: 20,
        ..Default::default()
    };
    let r1 = theory::run_suite(&opts).unwrap();
    let r2 = theory::run_suite(&opts).unwrap();
    for (a, b) in r1.iter().zip(&r2) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.max_discrepancy.to_bits(), b.max_discrepancy.to_bits());
    }
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
    pass(
        "criterion-13",
        format!("{} output files byte-identical; theory reports bit-identical", files.len()),
    );
}
