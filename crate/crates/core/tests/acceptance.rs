//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run alone with `cargo test -p sepfit --test acceptance`. Pass criterion
//! numbers as arguments to run a subset, e.g. `-- 1 3 7`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use sepfit::bench::{
    argmin, basin_map, generate_synthetic, multifile_problem, scaling_bench, slice_scan, BasinSpec, MultiFileScenario,
    NoiseSpec, ScalingSpec, Scenario, SliceMode, Sweep,
};
use sepfit::covariance::{full_hessian_fd, inverse_block_check, shortcut_hessian, HessianBlocks};
use sepfit::linear::{build_normal_system, solve_qstar, ReducedProblem};
use sepfit::model::{chi_squared, DataSet, ExpSin, ParamSplit};
use sepfit::multifile::{multifile_fit, multifile_fit_classical};
use sepfit::optimizer::{lm_fit, lm_fit_traced, FitOptions, Mode};
use sepfit::shortcut::{fd_qstar_jacobian, shortcut_gradient, StepScheme};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn example1() -> DataSet {
    generate_synthetic(&Scenario::exp_sin()).unwrap()
}

fn optimum() -> ParamSplit {
    ParamSplit::new(&[20.0, 5.0], &[6.0, 1.0])
}

/// Full Hessian with small steps, used as the "δ → 0" reference.
fn reference_blocks(data: &DataSet) -> HessianBlocks {
    full_hessian_fd(&ExpSin, data, &optimum(), &StepScheme::relative(1e-5)).unwrap()
}

fn rel_inf(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax()
}

fn qstar_reproduction() -> Outcome {
    let data = example1();
    let r = solve_qstar(&ExpSin, &[19.0, 4.9], &data, 0.0).unwrap();
    let expected = [6.19664, 0.947731];
    let err = r
        .q_star
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        err <= 1e-3,
        format!("q* = ({:.6}, {:.6}), max error {err:.1e}", r.q_star[0], r.q_star[1]),
    )
}

fn slice_minima() -> Outcome {
    let data = example1();
    let p = [19.0, 4.9];
    let q_ref = solve_qstar(&ExpSin, &p, &data, 0.0).unwrap().q_star.as_slice().to_vec();
    let sweep = Sweep {
        index: 0,
        lo: 18.0,
        hi: 22.0,
        count: 400,
    };
    let frozen = slice_scan(&ExpSin, &data, &p, sweep, &SliceMode::Frozen { q_ref }).unwrap();
    let reopt = slice_scan(&ExpSin, &data, &p, sweep, &SliceMode::Reoptimized).unwrap();
    let fmin = argmin(&frozen).unwrap().value;
    let rmin = argmin(&reopt).unwrap().value;
    let dominated = frozen
        .iter()
        .zip(&reopt)
        .all(|(f, r)| r.chisq <= f.chisq * (1.0 + 1e-12));
    let pass = (fmin - 19.35).abs() <= 0.05 && (rmin - 19.85).abs() <= 0.05 && dominated;
    outcome(
        pass,
        format!(
            "frozen argmin {fmin:.4} (want 19.35), reoptimized argmin {rmin:.4} (want 19.85), dominance {dominated}"
        ),
    )
}

fn fit_recovery() -> Outcome {
    let data = example1();
    let r = lm_fit(&ExpSin, &data, &[19.0, 4.9], &FitOptions::default()).unwrap();
    let err = r
        .p_opt
        .iter()
        .zip([20.0, 5.0])
        .chain(r.q_opt.iter().zip([6.0, 1.0]))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        r.converged && err <= 1e-3 && r.accepted_steps <= 10,
        format!(
            "p = ({:.6}, {:.6}), q = ({:.6}, {:.6}), max error {err:.1e}, {} accepted steps, {:?}",
            r.p_opt[0], r.p_opt[1], r.q_opt[0], r.q_opt[1], r.accepted_steps, r.termination
        ),
    )
}

fn inverse_block() -> Outcome {
    let data = example1();
    let report = inverse_block_check(
        &ExpSin,
        &data,
        &optimum(),
        &[1e-2, 1e-3, 1e-4],
        &StepScheme::relative(1e-5),
    )
    .unwrap();
    let last = report.rows.last().unwrap().relative;
    let rels: Vec<String> = report.rows.iter().map(|r| format!("{:.1e}", r.relative)).collect();
    outcome(
        last <= 1e-3 && report.is_monotone(),
        format!("relative discrepancy over δ = 1e-2, 1e-3, 1e-4: [{}]", rels.join(", ")),
    )
}

fn schur_identities() -> Outcome {
    let data = example1();
    let blocks = reference_blocks(&data);
    let problem = ReducedProblem::new(&ExpSin, &data);
    let p = [20.0, 5.0];

    let jq_ref = -blocks.qq.clone().lu().solve(&blocks.qp).unwrap();
    let jq_err = |d: f64| {
        rel_inf(
            &fd_qstar_jacobian(&problem, &p, &StepScheme::relative(d)).unwrap(),
            &jq_ref,
        )
    };
    let (j2, j1) = (jq_err(2e-3), jq_err(1e-3));

    let schur = blocks.schur_complement().unwrap();
    let h_err = |d: f64| rel_inf(&shortcut_hessian(&problem, &p, d).unwrap().h_star, &schur);
    let (h2, h1) = (h_err(2e-3), h_err(1e-3));

    let (rj, rh) = (j2 / j1, h2 / h1);
    let pass = j1 <= 1e-3 && h1 <= 1e-3 && (3.0..=5.0).contains(&rj) && (3.0..=5.0).contains(&rh);
    outcome(
        pass,
        format!(
            "dq*/dp error {j1:.1e} (halving ratio {rj:.2}), H* vs Schur complement error {h1:.1e} (halving ratio {rh:.2})"
        ),
    )
}

fn determinant_identity() -> Outcome {
    let data = example1();
    let blocks = reference_blocks(&data);
    let h_star = shortcut_hessian(&ReducedProblem::new(&ExpSin, &data), &[20.0, 5.0], 1e-4)
        .unwrap()
        .h_star;
    let (lhs, rhs) = sepfit::covariance::determinant_identity(&h_star, &blocks);
    let rel = (lhs - rhs).abs() / rhs.abs();
    outcome(
        rel <= 1e-3,
        format!("det H*·det H_qq = {lhs:.6e}, det H = {rhs:.6e}, relative {rel:.1e}"),
    )
}

fn scaling() -> Outcome {
    let spec = ScalingSpec::default();
    let table = scaling_bench(&spec, &FitOptions::default()).unwrap();
    let shortcut_rows: Vec<_> = table.rows.iter().filter(|r| r.mode == Mode::Shortcut).collect();
    let max_accepted = shortcut_rows.iter().map(|r| r.max_accepted_steps).max().unwrap_or(0);
    let all_converged = table.rows.iter().all(|r| r.converged_runs == r.runs);
    let ratio = table.eval_ratio(60).unwrap_or(f64::NAN);
    let big = [10, 20, 40, 60];
    let ss = table.slope_over(Mode::Shortcut, &big).unwrap_or(f64::NAN);
    let sc = table.slope_over(Mode::Classical, &big).unwrap_or(f64::NAN);
    let accepted: Vec<String> = shortcut_rows
        .iter()
        .map(|r| format!("{}:{}", r.n, r.max_accepted_steps))
        .collect();
    outcome(
        max_accepted <= 3 && ratio >= 10.0 && sc - ss >= 0.3,
        format!(
            "max shortcut accepted steps by N [{}], all runs converged {all_converged}, eval ratio at N=60 {ratio:.1}, time slopes shortcut {ss:.2} classical {sc:.2} (gap {:.2})",
            accepted.join(" "),
            sc - ss
        ),
    )
}

fn basin() -> Outcome {
    let data = example1();
    let grid = basin_map(
        &ExpSin,
        &data,
        &[20.0, 5.0],
        &BasinSpec::default(),
        &FitOptions::default(),
        true,
    )
    .unwrap();
    let c = grid.counts;
    let classical = c.classical_successes();
    let shortcut = c.shortcut_successes();
    let frac = c.classical_only as f64 / classical.max(1) as f64;
    outcome(
        frac <= 0.05 && shortcut > classical,
        format!(
            "both {}, shortcut-only {}, classical-only {} ({:.1}% of classical successes), neither {}",
            c.both,
            c.shortcut_only,
            c.classical_only,
            100.0 * frac,
            c.neither
        ),
    )
}

pub fn multifile_scenario() -> MultiFileScenario {
    let text = include_str!("../../../configs/multifile-scenario.toml");
    toml::from_str(text).unwrap()
}

fn multifile() -> Outcome {
    let scenario = multifile_scenario();
    let options = FitOptions::default();
    let mut ratios = Vec::new();
    let mut phi5 = (f64::NAN, f64::NAN);
    for k in [5, 10, 20, 30] {
        let problem = multifile_problem(&scenario.with_files(k)).unwrap();
        let p0 = scenario.p_init();
        let s = multifile_fit(&problem, &p0, &options).unwrap();
        let c = multifile_fit_classical(&problem, &p0, None, &options).unwrap();
        if k == 5 {
            phi5 = (s.fit.chisq, c.fit.chisq);
        }
        ratios.push(c.fit.model_evals as f64 / s.fit.model_evals as f64);
    }
    let agree = (phi5.0 - phi5.1).abs() / phi5.0.abs();
    let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.1}")).collect();
    outcome(
        agree <= 1e-6 && increasing,
        format!(
            "K=5 Φ shortcut {:.10e} classical {:.10e} (relative {agree:.1e}), eval ratio over K = 5, 10, 20, 30: [{}]",
            phi5.0,
            phi5.1,
            shown.join(", ")
        ),
    )
}

/// Random exponential-plus-sine instance with multiplicative noise.
fn instance() -> impl Strategy<Value = (Vec<f64>, DataSet)> {
    (
        8.0f64..40.0,
        2.5f64..9.0,
        0.5f64..8.0,
        -3.0f64..3.0,
        0.0f64..0.2,
        any::<u64>(),
    )
        .prop_map(|(p1, p2, q1, q2, amp, seed)| {
            let scenario = Scenario {
                p: vec![p1, p2],
                q: vec![q1, q2],
                noise: NoiseSpec::UniformMultiplicative { amplitude: amp },
                seed,
                ..Scenario::exp_sin()
            };
            (vec![p1, p2], generate_synthetic(&scenario).unwrap())
        })
}

/// `∇ₚχ²` at fixed `q` for `q₁ e^{−t/p₁} + q₂ sin(t/p₂)`, by hand.
fn exp_sin_frozen_gradient(p: &[f64], q: &[f64], data: &DataSet) -> [f64; 2] {
    let mut g = [0.0; 2];
    for ((&t, &y), &w) in data.t().iter().zip(data.y()).zip(data.w()) {
        let decay = (-t / p[0]).exp();
        let r = q[0] * decay + q[1] * (t / p[1]).sin() - y;
        g[0] += 2.0 * w * r * q[0] * decay * t / (p[0] * p[0]);
        g[1] -= 2.0 * w * r * q[1] * (t / p[1]).cos() * t / (p[1] * p[1]);
    }
    g
}

fn probe_point() -> impl Strategy<Value = (Vec<f64>, (Vec<f64>, DataSet))> {
    (prop::collection::vec(0.8f64..1.2, 2), instance())
        .prop_map(|(scale, (p, d))| (p.iter().zip(&scale).map(|(a, b)| a * b).collect(), (p, d)))
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e:?}"))
}

fn invariant_suites() -> Outcome {
    let mut failures = Vec::new();
    let mut record = |r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(e);
        }
    };

    record(run_property(
        "quadratic expansion",
        (probe_point(), prop::collection::vec(-10.0f64..10.0, 2)),
        |((p, (_, data)), q)| {
            let sys = build_normal_system(&ExpSin, &p, &data).unwrap();
            let q = nalgebra::DVector::from_vec(q);
            let direct = chi_squared(&ExpSin, &ParamSplit::new(&p, q.as_slice()), &data).unwrap();
            prop_assert!((sys.eval(&q) - direct).abs() <= 1e-9 * direct.max(1.0));
            Ok(())
        },
    ));

    record(run_property("stationarity of q*", probe_point(), |(p, (_, data))| {
        let sys = build_normal_system(&ExpSin, &p, &data).unwrap();
        let q = solve_qstar(&ExpSin, &p, &data, 0.0).unwrap().q_star;
        let g = sys.gradient(&q);
        prop_assert!(g.amax() <= 1e-8 * sys.b.amax().max(1.0), "gradient {g}");
        Ok(())
    }));

    record(run_property(
        "shortcut gradient converges to the frozen gradient",
        probe_point(),
        |(p, (_, data))| {
            let problem = ReducedProblem::new(&ExpSin, &data);
            let q = problem.qstar(&p).unwrap().q_star;
            let exact = exp_sin_frozen_gradient(&p, q.as_slice(), &data);
            let fstar = problem.fstar(&p).unwrap();
            let rel = [1e-4, 5e-5, 2.5e-5];
            let errors: Vec<Vec<f64>> = rel
                .iter()
                .map(|&r| {
                    let g = shortcut_gradient(&problem, &p, &StepScheme::relative(r)).unwrap();
                    (0..2).map(|m| (g[m] - exact[m]).abs()).collect()
                })
                .collect();
            for m in 0..2 {
                // q*-solve round-off divided by the smallest step
                let floor = f64::EPSILON * fstar.max(1.0) / (rel[2] * p[m].abs());
                for k in 0..2 {
                    let (coarse, fine) = (errors[k][m], errors[k + 1][m]);
                    if fine >= 100.0 * floor {
                        let ratio = coarse / fine;
                        prop_assert!(
                            (3.5..=4.5).contains(&ratio),
                            "m={m}: halving ratio {ratio}, errors {errors:?}"
                        );
                    }
                }
            }
            Ok(())
        },
    ));

    record(run_property("monotone descent", probe_point(), |(p, (_, data))| {
        let (_, history) = lm_fit_traced(&ExpSin, &data, &p, &FitOptions::default()).unwrap();
        prop_assert!(history.windows(2).all(|w| w[1] <= w[0]));
        Ok(())
    }));

    record(run_property("determinism", probe_point(), |(p, (_, data))| {
        let mut opts = FitOptions::default();
        let a = lm_fit(&ExpSin, &data, &p, &opts).unwrap();
        opts.parallel_probes = true;
        let b = lm_fit(&ExpSin, &data, &p, &opts).unwrap();
        prop_assert_eq!(&a, &b);
        let again = generate_synthetic(&Scenario::exp_sin()).unwrap();
        prop_assert_eq!(again, example1());
        Ok(())
    }));

    if failures.is_empty() {
        outcome(true, "5 properties x 100 cases")
    } else {
        outcome(false, failures.join("; "))
    }
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(u32, &str, Check, Duration); 10] = [
        (1, "q* reproduction", qstar_reproduction, Duration::from_millis(10)),
        (2, "slice minima", slice_minima, Duration::from_secs(2)),
        (3, "fit recovery", fit_recovery, Duration::from_secs(1)),
        (4, "inverse block convergence", inverse_block, Duration::from_secs(1)),
        (
            5,
            "Jacobian and Schur identities",
            schur_identities,
            Duration::from_secs(1),
        ),
        (6, "determinant identity", determinant_identity, Duration::from_secs(1)),
        (7, "peak-train scaling", scaling, Duration::from_secs(300)),
        (8, "basin containment", basin, Duration::from_secs(600)),
        (9, "multi-file equivalence", multifile, Duration::from_secs(300)),
        (10, "invariant suites", invariant_suites, Duration::from_secs(60)),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check);
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(_) => (false, "panicked".to_string()),
        };
        let in_time = elapsed <= budget;
        let ok = pass && in_time;
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {detail}; {:.3}s of {:.3}s budget{}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs_f64(),
            if in_time { "" } else { " (over budget)" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
