use std::path::PathBuf;

use bsde_core::metrics::{fit_rate_with, scheme_error, ErrorReport, RateFit, REPORT_CSV_HEADER};
use bsde_core::models::{predicted_rate, Driver, RateInputs, RatePrediction, RateScheme, SdeModel, TerminalCondition};
use bsde_core::oracle::{closed_form, describe, fractional_smoothness_fit, ReferenceSolution, SmoothnessFit};
use bsde_core::paths::{simulate, write_binary};
use bsde_core::schemes::{representation_probe, solve, Backend, DiscreteSolution, SchemeKind};
use bsde_core::{make_grid, TimeGrid};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Metric, ProbeSection, ReferenceKind, VerifySection};
use crate::output::{num, OutputDir, Provenance};
use crate::{evaluation_seed, reference_seed, run_seed, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    VerifyGrid,
    Simulate,
    Solve,
    Convergence,
    ProbeRepresentation,
    Smoothness,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::VerifyGrid => "verify-grid",
            Command::Simulate => "simulate",
            Command::Solve => "solve",
            Command::Convergence => "convergence",
            Command::ProbeRepresentation => "probe-representation",
            Command::Smoothness => "smoothness",
            Command::Report => "report",
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// `None` keeps the global rayon pool.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// Every declared acceptance band was met and no run failed.
    pub passed: bool,
    pub output: PathBuf,
    pub files: Vec<PathBuf>,
    /// One line per band or failure, for the terminal.
    pub notes: Vec<String>,
}

pub fn run(command: Command, config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    let mut cfg = config.clone();
    if let Some(seed) = options.seed {
        cfg.experiment.seed = seed;
    }
    let root = options
        .out
        .clone()
        .or_else(|| cfg.experiment.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.experiment.name));
    let out = OutputDir::create(&root, Provenance::new(cfg.hash(), cfg.experiment.seed))?;
    let body = || match command {
        Command::VerifyGrid => verify_grid(&cfg, &out),
        Command::Simulate => simulate_cmd(&cfg, &out),
        Command::Solve => solve_cmd(&cfg, &out),
        Command::Convergence => convergence(&cfg, &out),
        Command::ProbeRepresentation => probe(&cfg, &out),
        Command::Smoothness => smoothness(&cfg, &out),
        Command::Report => report(&cfg, &out),
    };
    match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Threads(e.to_string()))?
            .install(body),
        None => body(),
    }
}

fn outcome(out: &OutputDir, passed: bool, files: Vec<PathBuf>, notes: Vec<String>) -> Outcome {
    Outcome {
        passed,
        output: out.root().to_path_buf(),
        files,
        notes,
    }
}

struct Problem {
    model: SdeModel,
    driver: Driver,
    terminal: TerminalCondition,
}

impl Problem {
    fn from(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            model: cfg.model()?,
            driver: cfg.driver()?,
            terminal: cfg.terminal()?,
        })
    }

    fn backend(&self, cfg: &ExperimentConfig) -> Backend {
        cfg.backend(&self.model, &self.terminal)
    }

    /// Solves on `grid`; the regression backend trains on fresh paths from `seed`.
    fn solve(&self, cfg: &ExperimentConfig, grid: &TimeGrid, seed: u64) -> Result<DiscreteSolution> {
        let backend = self.backend(cfg);
        let batch = match backend {
            Backend::Lsmc(_) => Some(simulate(&self.model, grid, cfg.training_paths(), seed)?),
            Backend::Quadrature(_) => None,
        };
        let (m, d, t) = (&self.model, &self.driver, &self.terminal);
        Ok(solve(cfg.experiment.scheme, m, d, t, grid, &backend, batch.as_ref())?)
    }

    fn reference(&self, cfg: &ExperimentConfig) -> Result<ReferenceSolution> {
        match cfg.reference.kind {
            ReferenceKind::ClosedForm => Ok(closed_form(&self.model, &self.terminal, &self.driver)?),
            ReferenceKind::FineGrid => {
                let g = cfg.grid_section()?;
                let steps = cfg.reference.steps.unwrap_or(1024);
                let grid = make_grid(g.horizon, steps, g.beta)?;
                let seed = cfg.reference.seed.unwrap_or_else(|| reference_seed(cfg.experiment.seed));
                log::info!("solving the fine-grid reference at N = {steps}");
                let sol = self.solve(cfg, &grid, seed)?;
                let descriptor = describe(&self.model, &self.driver, &self.terminal);
                Ok(ReferenceSolution::from_solution(descriptor, sol, (self.terminal.alpha() - 1.0) / 2.0))
            }
        }
    }
}

fn verify_grid(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome> {
    let sweep = cfg.verify.clone().unwrap_or_else(|| VerifySection {
        betas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        thetas: vec![0.25, 0.5, 0.75, 1.0],
        steps: vec![4, 16, 64, 256, 1024, 4096],
        horizon: 1.0,
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &beta in &sweep.betas {
        for &theta in &sweep.thetas {
            for &n in &sweep.steps {
                let chk = make_grid(sweep.horizon, n, beta)?.theta_bound(theta)?;
                if !chk.holds {
                    failures.push(format!("beta={beta} theta={theta} N={n}: {} > {}", chk.lhs, chk.rhs));
                }
                rows.push(format!(
                    "{beta},{theta},{n},{},{},{},{}",
                    num(chk.lhs),
                    num(chk.rhs),
                    num(chk.margin()),
                    chk.holds
                ));
            }
        }
    }
    let file = out.write_csv("verify_grid.csv", "beta,theta,N,lhs,rhs,margin,holds", &rows)?;
    let mut notes = vec![format!("{} checks, {} failed", rows.len(), failures.len())];
    notes.extend(failures.iter().cloned());
    Ok(outcome(out, failures.is_empty(), vec![file], notes))
}

fn simulate_cmd(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome> {
    let model = cfg.model()?;
    let mut files = Vec::new();
    for &n in &cfg.grid_section()?.steps {
        let grid = cfg.time_grid(n)?;
        let batch = simulate(&model, &grid, cfg.experiment.paths, run_seed(cfg.experiment.seed, n))?;
        let mut bytes = Vec::new();
        write_binary(&batch, &mut bytes).map_err(|e| HarnessError::io(&out.path("paths"), e))?;
        files.push(out.write_bytes(&format!("paths_N{n}.bin"), &bytes)?);
        files.push(out.write_csv_with(&format!("grid_N{n}.csv"), |w| grid.write_csv(w))?);
    }
    Ok(outcome(out, true, files, vec![]))
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    steps: usize,
    beta: f64,
    scheme: SchemeKind,
    y0: f64,
    z0: Vec<f64>,
    root_standard_errors: Option<&'a (f64, Vec<f64>)>,
    warnings: &'a [String],
}

fn solve_cmd(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome> {
    let p = Problem::from(cfg)?;
    let g = cfg.grid_section()?;
    let sols: Vec<(usize, Result<DiscreteSolution>)> = g
        .steps
        .par_iter()
        .map(|&n| (n, cfg.time_grid(n).and_then(|grid| p.solve(cfg, &grid, run_seed(cfg.experiment.seed, n)))))
        .collect();
    let mut files = Vec::new();
    let mut notes = Vec::new();
    let mut passed = true;
    for (n, sol) in sols {
        let sol = match sol {
            Ok(s) => s,
            Err(e) => {
                passed = false;
                notes.push(format!("N={n}: {e}"));
                continue;
            }
        };
        files.push(out.write_csv_with(&format!("solution_N{n}.csv"), |w| sol.write_csv(w))?);
        let summary = SolveSummary {
            steps: n,
            beta: g.beta,
            scheme: sol.scheme(),
            y0: sol.y0(),
            z0: sol.z0(),
            root_standard_errors: sol.root_standard_errors(),
            warnings: sol.warnings(),
        };
        files.push(out.write_json(&format!("solution_N{n}.json"), &summary)?);
    }
    Ok(outcome(out, passed, files, notes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub steps: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Band {
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Band {
    fn declared(&self) -> bool {
        self.min.is_some() || self.max.is_some()
    }

    fn contains(&self, v: f64) -> bool {
        v.is_finite() && self.min.map_or(true, |lo| v >= lo) && self.max.map_or(true, |hi| v <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub name: String,
    pub scheme: SchemeKind,
    pub beta: f64,
    pub metric: Metric,
    /// `(N, metric value)` for every successful run.
    pub points: Vec<(usize, f64)>,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
    pub slope: Option<f64>,
    pub predicted: Option<RatePrediction>,
    /// `-exponent`: the predicted slope of `metric`.
    pub predicted_slope: Option<f64>,
    pub prediction_error: Option<String>,
    pub band: Band,
    pub failures: Vec<Failure>,
    pub passed: bool,
}

#[derive(Serialize)]
struct Reports<'a> {
    reports: Vec<&'a ErrorReport>,
    failures: &'a [Failure],
}

fn metric_value(metric: Metric, rep: &ErrorReport) -> f64 {
    match metric {
        Metric::WeightedZ => rep.max_weighted_z,
        _ => rep.total,
    }
}

fn convergence(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome> {
    let p = Problem::from(cfg)?;
    let g = cfg.grid_section()?;
    let reference = p.reference(cfg)?;
    let seed = cfg.experiment.seed;
    let results: Vec<(usize, Result<ErrorReport>)> = g
        .steps
        .par_iter()
        .map(|&n| {
            let run = || -> Result<ErrorReport> {
                let grid = cfg.time_grid(n)?;
                let sol = p.solve(cfg, &grid, run_seed(seed, n))?;
                for w in sol.warnings() {
                    log::warn!("N={n}: {w}");
                }
                let eval = cfg.evaluation(evaluation_seed(seed, n));
                Ok(scheme_error(&sol, &reference, &p.model, &p.driver, &p.terminal, &eval)?)
            };
            (n, run())
        })
        .collect();

    let metric = cfg.metric();
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut points = Vec::new();
    let scheme = cfg.experiment.scheme;
    for (n, res) in &results {
        match res {
            Ok(rep) => {
                rows.push(format!("{},ok", rep.csv_row()));
                let grid = cfg.time_grid(*n)?;
                files.push(out.write_csv_with(&format!("profile_N{n}.csv"), |w| rep.write_profile_csv(&grid, w))?);
                points.push((*n, metric_value(metric, rep)));
                reports.push(rep);
            }
            Err(e) => {
                log::error!("N={n}: {e}");
                let blanks = vec!["nan"; REPORT_CSV_HEADER.split(',').count() - 3].join(",");
                rows.push(format!("{n},{},{},{blanks},failed", g.beta, scheme.as_str()));
                failures.push(Failure {
                    steps: *n,
                    error: e.to_string(),
                });
            }
        }
    }
    files.push(out.write_csv("errors.csv", &format!("{REPORT_CSV_HEADER},status"), &rows)?);
    files.push(out.write_json(
        "reports.json",
        &Reports {
            reports,
            failures: &failures,
        },
    )?);

    let (fit, fit_error) = match fit_rate_with(&points, cfg.evaluation.drop_smallest) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let slope = fit.as_ref().filter(|f| !f.degenerate_floor).map(|f| f.slope);
    let rate_scheme = match scheme {
        SchemeKind::Euler => RateScheme::Euler,
        SchemeKind::Malliavin => RateScheme::Malliavin,
    };
    let ex = p.driver.exponents();
    let inputs = RateInputs {
        alpha: p.terminal.alpha(),
        theta_l: ex.theta_l,
        theta_c: ex.theta_c,
        theta_phi: p.terminal.theta_phi(),
        beta: g.beta,
    };
    let (predicted, prediction_error) = match predicted_rate(rate_scheme, &inputs) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let band = Band {
        min: cfg.acceptance.slope_min,
        max: cfg.acceptance.slope_max,
    };
    let band_ok = !band.declared() || slope.is_some_and(|s| band.contains(s));
    let passed = failures.is_empty() && band_ok;

    let mut notes = Vec::new();
    if let Some(f) = &fit {
        if f.degenerate_floor {
            notes.push("all errors at the round-off floor; slope undefined".into());
        } else {
            notes.push(format!("slope {:.4} ± {:.4} over N = {:?}", f.slope, f.slope_stderr, f.used));
        }
    }
    if band.declared() {
        notes.push(format!("band [{:?}, {:?}]: {}", band.min, band.max, if band_ok { "met" } else { "missed" }));
    }
    notes.extend(failures.iter().map(|f| format!("N={} failed: {}", f.steps, f.error)));

    let summary = ConvergenceSummary {
        name: cfg.experiment.name.clone(),
        scheme,
        beta: g.beta,
        metric,
        points,
        fit,
        fit_error,
        slope,
        predicted_slope: predicted.as_ref().map(|r| -r.exponent),
        predicted,
        prediction_error,
        band,
        failures,
        passed,
    };
    files.push(out.write_json("summary.json", &summary)?);
    Ok(outcome(out, passed, files, notes))
}

#[derive(Serialize)]
struct ProbeReport {
    steps: usize,
    beta: f64,
    paths: usize,
    estimate: Vec<f64>,
    stderr: Vec<f64>,
    reference: Vec<f64>,
    z_score: Vec<f64>,
    threshold: f64,
    passed: bool,
}

fn probe(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome> {
    let p = Problem::from(cfg)?;
    let sec = cfg.probe.clone().unwrap_or(ProbeSection { steps: 1024, beta: 1.0 });
    let grid = make_grid(cfg.horizon(), sec.steps, sec.beta)?;
    let reference = closed_form(&p.model, &p.terminal, &p.driver)?;
    let paths = cfg.experiment.paths;
    let est = representation_probe(&p.model, &p.driver, &p.terminal, &grid, paths, cfg.experiment.seed, Some(&reference))?;
    let threshold = cfg.acceptance.max_abs_z_score.unwrap_or(4.0);
    let passed = est.z_score.iter().all(|z| z.abs() <= threshold);
    let notes = vec![format!("z-scores {:?} against |z| <= {threshold}", est.z_score)];
    let report = ProbeReport {
        steps: sec.steps,
        beta: sec.beta,
        paths: est.paths,
        estimate: est.estimate,
        stderr: est.stderr,
        reference: est.reference,
        z_score: est.z_score,
        threshold,
        passed,
    };
    let file = out.write_json("probe.json", &report)?;
    Ok(outcome(out, passed, vec![file], notes))
}

#[derive(Serialize)]
struct SmoothnessReport<'a> {
    fit: &'a SmoothnessFit,
    band: Band,
    passed: bool,
}

fn smoothness(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome> {
    let sec = cfg
        .smoothness
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing section [smoothness]".into()))?;
    let model = cfg.model()?;
    let terminal = cfg.terminal()?;
    let fit = fractional_smoothness_fit(&model, &terminal, cfg.horizon(), &sec.times, sec.samples, cfg.experiment.seed)?;
    let band = Band {
        min: cfg.acceptance.alpha_min,
        max: cfg.acceptance.alpha_max,
    };
    let passed = !band.declared() || fit.alpha_hat.is_some_and(|a| band.contains(a));
    let rows: Vec<String> = fit
        .points
        .iter()
        .map(|pt| format!("{},{},{}", num(pt.t), num(pt.v2), num(pt.stderr)))
        .collect();
    let mut files = vec![out.write_csv("smoothness.csv", "t,v2,v2_stderr", &rows)?];
    let notes = vec![format!("alpha_hat {:?} ± {:?}", fit.alpha_hat, fit.alpha_stderr)];
    files.push(out.write_json("smoothness.json", &SmoothnessReport { fit: &fit, band, passed })?);
    Ok(outcome(out, passed, files, notes))
}

pub const REPORT_HEADER: &str = "name,config_hash,scheme,beta,metric,slope,slope_stderr,predicted_slope,passed";

fn report(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Outcome> {
    let sec = cfg
        .report
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing section [report]".into()))?;
    let mut rows = Vec::new();
    let mut passed = true;
    for input in &sec.inputs {
        let path = if input.is_dir() { input.join("summary.json") } else { input.clone() };
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let f = |x: &serde_json::Value| x.as_f64().map_or_else(|| "nan".to_string(), num);
        let ok = v["passed"].as_bool().unwrap_or(false);
        passed &= ok;
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            v["name"].as_str().unwrap_or(""),
            v["provenance"]["config_hash"].as_str().unwrap_or(""),
            v["scheme"].as_str().unwrap_or(""),
            f(&v["beta"]),
            v["metric"].as_str().unwrap_or(""),
            f(&v["slope"]),
            f(&v["fit"]["slope_stderr"]),
            f(&v["predicted_slope"]),
            ok
        ));
    }
    let file = out.write_csv("report.csv", REPORT_HEADER, &rows)?;
    Ok(outcome(out, passed, vec![file], vec![format!("{} summaries merged", rows.len())]))
}
