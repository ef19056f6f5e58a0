//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails that is not a documented deviation.
//!
//! Run with `cargo test -p bsde-harness --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bsde_core::make_grid;
use bsde_core::metrics::{apriori_z_check, reference_z_moments};
use bsde_core::models::{Driver, SdeModel, TerminalCondition};
use bsde_core::oracle::{brute_force_dp, closed_form, fractional_smoothness_fit};
use bsde_core::paths::simulate;
use bsde_core::schemes::{solve, Backend, QuadSpec, SchemeKind};
use bsde_harness::config::BackendKind;
use bsde_harness::{run, run_seed, Command, ExperimentConfig, RunOptions};

/// Criteria allowed to fail; each has its analysis in the project notes.
const KNOWN_DEVIATIONS: &[usize] = &[8];

struct Verdict {
    id: usize,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

/// Fresh output directory.
fn scratch(name: &str) -> PathBuf {
    let p = run_dir(name);
    let _ = fs::remove_dir_all(&p);
    p
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).expect("shipped config")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn convergence(cfg: &ExperimentConfig, dir: &Path) -> (bool, serde_json::Value) {
    let opts = RunOptions {
        out: Some(dir.to_path_buf()),
        ..Default::default()
    };
    let o = run(Command::Convergence, cfg, &opts).expect("convergence run");
    (o.passed, summary(dir))
}

fn timed(id: usize, budget: Option<u64>, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (passed, detail) = f();
    let elapsed = start.elapsed();
    let budget = budget.map(Duration::from_secs);
    Verdict {
        id,
        passed: passed && budget.map_or(true, |b| elapsed <= b),
        detail,
        elapsed,
        budget,
    }
}

fn report(v: &Verdict) {
    let status = if v.passed { "PASS" } else { "FAIL" };
    let known = if !v.passed && KNOWN_DEVIATIONS.contains(&v.id) {
        " (documented deviation)"
    } else {
        ""
    };
    let budget = v.budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
    println!(
        "criterion {:>2}: {status}{known} [{:.1}s{budget}] {}",
        v.id,
        v.elapsed.as_secs_f64(),
        v.detail
    );
}

fn bm() -> SdeModel {
    SdeModel::brownian(0.0, 0.0, 1.0).unwrap()
}

fn c1() -> Verdict {
    timed(1, Some(1), || {
        let cfg = load("verify_grid.toml");
        let opts = RunOptions {
            out: Some(scratch("c1")),
            ..Default::default()
        };
        let o = run(Command::VerifyGrid, &cfg, &opts).unwrap();
        (o.passed, o.notes.join("; "))
    })
}

fn c2() -> Verdict {
    timed(2, Some(10), || {
        let model = bm();
        let driver = Driver::zero(1.0).unwrap();
        let term = TerminalCondition::identity();
        let (mut worst_y, mut worst_z) = (0.0f64, 0.0f64);
        for scheme in [SchemeKind::Euler, SchemeKind::Malliavin] {
            for (beta, n) in [(0.3, 16), (0.6, 64), (1.0, 256), (0.2, 256)] {
                let grid = make_grid(1.0, n, beta).unwrap();
                let backend = Backend::Quadrature(QuadSpec::for_problem(&model, &term));
                let sol = solve(scheme, &model, &driver, &term, &grid, &backend, None).unwrap();
                let batch = simulate(&model, &grid, 200, n as u64).unwrap();
                for m in 0..batch.paths() {
                    for i in 0..n {
                        let x = batch.state(m, i);
                        worst_y = worst_y.max((sol.y(i, x) - x[0]).abs());
                        worst_z = worst_z.max((sol.z(i, x)[0] - 1.0).abs());
                    }
                }
            }
        }
        (
            worst_y <= 1e-9 && worst_z <= 1e-8,
            format!("max|Y-X| = {worst_y:.2e} (<= 1e-9), max|Z-sigma| = {worst_z:.2e} (<= 1e-8)"),
        )
    })
}

fn c3() -> Verdict {
    timed(3, Some(120), || {
        let model = bm();
        let driver = Driver::truncated_quadratic(1.0, 0.5, 1.0, 0.5, 1).unwrap();
        let term = TerminalCondition::capped_call(0.0, 1.0).unwrap();
        let order = 8;
        let mut worst = 0.0f64;
        for scheme in [SchemeKind::Euler, SchemeKind::Malliavin] {
            for n in 2..=6 {
                let grid = make_grid(1.0, n, 0.5).unwrap();
                let backend = Backend::Quadrature(QuadSpec::exact(order));
                let sol = solve(scheme, &model, &driver, &term, &grid, &backend, None).unwrap();
                let tree = brute_force_dp(&model, &driver, &term, &grid, scheme, order).unwrap();
                worst = worst.max((sol.y0() - tree.root_y()).abs());
                worst = worst.max((sol.z0()[0] - tree.root_z()[0]).abs());
            }
        }
        (worst <= 1e-9, format!("max root difference {worst:.2e} (<= 1e-9)"))
    })
}

fn slope_of(s: &serde_json::Value) -> f64 {
    s["slope"].as_f64().unwrap_or(f64::NAN)
}

fn c4() -> Verdict {
    timed(4, Some(300), || {
        let (passed, s) = convergence(&load("euler_capped_call.toml"), &scratch("c4"));
        (
            passed,
            format!(
                "slope {:.3} ± {:.3} in [-1.25, -0.80] (predicted {})",
                slope_of(&s),
                s["fit"]["slope_stderr"].as_f64().unwrap_or(f64::NAN),
                s["predicted_slope"]
            ),
        )
    })
}

fn c5() -> Verdict {
    timed(5, Some(600), || {
        let sm = load("indicator_smoothness.toml");
        let sec = sm.smoothness.as_ref().unwrap();
        let fit = fractional_smoothness_fit(&sm.model().unwrap(), &sm.terminal().unwrap(), 1.0, &sec.times, sec.samples, sm.experiment.seed)
            .unwrap();
        let alpha = fit.alpha_hat.unwrap_or(f64::NAN);
        let alpha_ok = (alpha - 0.5).abs() <= 0.05;
        let (uni_ok, uni) = convergence(&load("euler_indicator_uniform.toml"), &scratch("c5-uniform"));
        let (gra_ok, gra) = convergence(&load("euler_indicator_graded.toml"), &scratch("c5-graded"));
        let (u, g) = (slope_of(&uni), slope_of(&gra));
        let gap_ok = g <= u - 0.25;
        (
            alpha_ok && uni_ok && gra_ok && gap_ok,
            format!(
                "alpha {alpha:.3} (0.5 ± 0.05), uniform slope {u:.3} in [-0.70, -0.35], \
                 graded slope {g:.3} in [-1.25, -0.75], gap {:.3} (>= 0.25)",
                u - g
            ),
        )
    })
}

fn c6() -> Verdict {
    timed(6, Some(600), || {
        let (passed, s) = convergence(&load("malliavin_affine.toml"), &scratch("c6"));
        (
            passed,
            format!("weighted Z slope {:.3} (<= -0.35, predicted {})", slope_of(&s), s["predicted_slope"]),
        )
    })
}

fn c7() -> Verdict {
    timed(7, Some(60), || {
        let mut ok = true;
        let mut parts = Vec::new();
        for name in ["probe_identity.toml", "probe_indicator.toml"] {
            let cfg = load(name);
            let opts = RunOptions {
                out: Some(scratch(&format!("c7-{}", cfg.experiment.name))),
                ..Default::default()
            };
            let o = run(Command::ProbeRepresentation, &cfg, &opts).unwrap();
            let p: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.output.join("probe.json")).unwrap()).unwrap();
            let z = p["z_score"][0].as_f64().unwrap_or(f64::NAN);
            ok &= z.abs() <= 3.0;
            parts.push(format!("{} z = {z:.2}", cfg.experiment.name));
        }
        (ok, format!("{} (|z| <= 3)", parts.join(", ")))
    })
}

fn c8() -> Verdict {
    timed(8, Some(10), || {
        let model = bm();
        let term = TerminalCondition::indicator(0.0);
        let driver = Driver::zero(1.0).unwrap();
        let reference = closed_form(&model, &term, &driver).unwrap();
        let grid = make_grid(1.0, 64, 0.5).unwrap();
        let moments = reference_z_moments(&reference, &model, &grid, 40_000, 8).unwrap();
        let ex = driver.exponents();
        let window: Vec<_> = moments.into_iter().filter(|m| m.t <= 1.0 - 1e-3).collect();
        let chk = apriori_z_check(&window, 1.0, ex.theta_c, term.alpha());
        (
            chk.spread <= 0.10,
            format!(
                "max/min - 1 = {:.3} (<= 0.10) over {} points, exponent {}",
                chk.spread,
                chk.profile.len(),
                chk.exponent
            ),
        )
    })
}

fn c9() -> Verdict {
    timed(9, Some(120), || {
        let cfg = load("lsmc_capped_call.toml");
        assert_eq!(cfg.backend.kind, BackendKind::Lsmc);
        let (model, driver, term) = (cfg.model().unwrap(), cfg.driver().unwrap(), cfg.terminal().unwrap());
        let n = 32;
        let grid = cfg.time_grid(n).unwrap();
        let batch = simulate(&model, &grid, cfg.training_paths(), run_seed(cfg.experiment.seed, n)).unwrap();
        let lsmc = solve(SchemeKind::Euler, &model, &driver, &term, &grid, &cfg.backend(&model, &term), Some(&batch)).unwrap();
        let quad = Backend::Quadrature(QuadSpec::for_problem(&model, &term));
        let exact = solve(SchemeKind::Euler, &model, &driver, &term, &grid, &quad, None).unwrap();
        let (se_y, se_z) = lsmc.root_standard_errors().cloned().expect("regression reports root errors");
        let dy = (lsmc.y0() - exact.y0()).abs() / se_y;
        let dz = (lsmc.z0()[0] - exact.z0()[0]).abs() / se_z[0];
        (
            dy <= 5.0 && dz <= 5.0,
            format!("|dY0| = {dy:.2} SE, |dZ0| = {dz:.2} SE (<= 5)"),
        )
    })
}

fn c10() -> Verdict {
    timed(10, None, || {
        let first = run_dir("c4");
        let second = scratch("c10");
        if !first.join("errors.csv").exists() {
            return (false, "criterion 4 output missing".into());
        }
        convergence(&load("euler_capped_call.toml"), &second);
        let mut names: Vec<_> = fs::read_dir(&first)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        let differing: Vec<_> = names
            .iter()
            .filter(|n| fs::read(first.join(n)).ok() != fs::read(second.join(n)).ok())
            .cloned()
            .collect();
        (
            differing.is_empty(),
            format!("{} CSV files compared, differing: {differing:?}", names.len()),
        )
    })
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [fn() -> Verdict; 10] = [c1, c2, c3, c4, c5, c6, c7, c8, c9, c10];
    // Numeric arguments select criteria, e.g. `-- 4 10`.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (k, c) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        let v = c();
        report(&v);
        if !v.passed && !KNOWN_DEVIATIONS.contains(&v.id) {
            unexpected.push(v.id);
        }
    }
    if unexpected.is_empty() {
        println!("acceptance: all criteria met or documented");
    } else {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
