//! The four experiment commands. Each one validates its part of the
//! configuration, runs, and returns an [`Outcome`] without touching the disk.

use measureflow_core::control::{
    duality_residual, lq_instance, value_model, verify_value, DualCertificate, MonteCarlo, VerifySettings, ENUMERATION_LIMIT,
};
use measureflow_core::functional::flat_derivative_check;
use measureflow_core::ito::{AssembleOptions, ItoRun, ItoScenario};
use measureflow_core::measure::EmpiricalMeasure;
use measureflow_core::paths::{build_semimartingale, sample_brownian, SamplePath, SemimartingaleSpec, TimeGrid};
use measureflow_core::regularization::{
    convergence_report, orthogonality_test, ConvergenceReport, CovariationPair, EpsLadder, OrthogonalityCase, VerdictRule,
};
use measureflow_core::rng::{standard_normal, RngKey, Role, StreamLabel};
use measureflow_core::stats::median;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Coefficients, ExperimentConfig, Selection};
use crate::registry;
use crate::report::{csv, num, Outcome};
use crate::{CliError, Command};

pub const QCOV_SCENARIOS: &[&str] = &["brownian_self", "semimartingale_self", "independent", "w_vs_w"];

pub fn dispatch(command: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match command {
        Command::Qcov => qcov(cfg),
        Command::ItoVerify => ito_verify(cfg),
        Command::Control => control(cfg),
        Command::DerivativeCheck => derivative_check(cfg),
    }
}

fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid, CliError> {
    Ok(TimeGrid::new(cfg.grid.horizon, cfg.grid.steps)?)
}

fn ladder(cfg: &ExperimentConfig, grid: TimeGrid) -> Result<EpsLadder, CliError> {
    let l = match &cfg.ladder.eps {
        Some(eps) => EpsLadder::from_eps(grid, eps),
        None => EpsLadder::dyadic(grid, cfg.ladder.from, cfg.ladder.to),
    };
    l.map_err(|e| CliError::Config(e.to_string()))
}

fn rule(cfg: &ExperimentConfig) -> VerdictRule {
    VerdictRule {
        theta: cfg.thresholds.theta,
        factor: cfg.thresholds.factor,
    }
}

fn ladder_json(report: &ConvergenceReport) -> Value {
    let medians: Vec<Vec<f64>> = (0..report.labels.len()).map(|l| report.medians(l)).collect();
    json!({ "eps": report.eps, "labels": report.labels, "medians": medians })
}

fn ladder_csv(report: &ConvergenceReport) -> Result<String, CliError> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Moderate-volatility default of the `semimartingale_self` scenario.
fn default_semimartingale() -> Coefficients {
    Coefficients {
        drift: Some(Selection::new("tanh", &[-0.5, 1.0])),
        vol: Some(Selection::new("sin", &[0.35, 0.15, 1.0])),
        common_vol: Some(Selection::new("constant", &[0.3])),
        initial: None,
    }
}

fn sq(c: &Option<Selection>) -> Result<Box<dyn Fn(f64) -> f64 + Send + Sync>, CliError> {
    Ok(match c {
        None => Box::new(|_| 0.0),
        Some(sel) => {
            let f = registry::coefficient(sel)?.eval;
            Box::new(move |x| f(x).powi(2))
        }
    })
}

pub fn qcov(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let grid = grid(cfg)?;
    let ladder = ladder(cfg, grid)?;
    let key = RngKey::new(cfg.seed);
    let reps = cfg.ensemble.replications;
    let brownian = |r: u32, p: u32| sample_brownian(grid, 1, &key, StreamLabel::new(r, p, Role::Observed));
    let (report, verdict) = match cfg.scenario.as_str() {
        "brownian_self" => {
            let t: Vec<f64> = grid.nodes().to_vec();
            let report = convergence_report(reps, &ladder, |r| {
                let w = brownian(r, 0);
                Ok(vec![CovariationPair::with_reference("W", w.clone(), w, t.clone())])
            })?;
            let v = report.verdict(cfg.thresholds.theta, cfg.thresholds.factor);
            (report, v)
        }
        "semimartingale_self" => {
            let coefs = cfg.coefficients.clone().unwrap_or_else(default_semimartingale);
            let spec = registry::semimartingale(&coefs)?;
            let (s2, c2) = (sq(&coefs.vol)?, sq(&coefs.common_vol)?);
            let report = convergence_report(reps, &ladder, |r| {
                let x0 = sample_initial(&spec, &key, r);
                let wc = sample_brownian(grid, 1, &key, StreamLabel::new(r, 0, Role::Common));
                let sm = build_semimartingale(&spec, grid, &brownian(r, 0), &wc, &x0)?;
                let mut reference = vec![0.0; grid.len()];
                for k in 0..grid.steps() {
                    let x = sm.x.at(k);
                    reference[k + 1] = reference[k] + (s2(x) + c2(x)) * grid.dt();
                }
                Ok(vec![CovariationPair::with_reference("X", sm.x.clone(), sm.x, reference)])
            })?;
            let v = report.verdict(cfg.thresholds.theta, cfg.thresholds.factor);
            (report, v)
        }
        "independent" | "w_vs_w" => {
            let same = cfg.scenario == "w_vs_w";
            let outcome = orthogonality_test(reps, &ladder, rule(cfg), |r| {
                let w = brownian(r, 0);
                let candidate = if same { w.clone() } else { brownian(r, 1) };
                Ok(OrthogonalityCase {
                    candidate,
                    battery: vec![("W".into(), w)],
                })
            })?;
            (outcome.report, outcome.verdict)
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown qcov scenario `{other}`; known: {}",
                QCOV_SCENARIOS.join(", ")
            )))
        }
    };
    let mut stats = ladder_json(&report);
    stats["worst_stat"] = json!(verdict.worst_stat);
    Ok(Outcome {
        pass: verdict.pass,
        statistics: stats,
        tables: vec![("qcov_ladder.csv".into(), ladder_csv(&report)?)],
    })
}

fn sample_initial(spec: &SemimartingaleSpec, key: &RngKey, r: u32) -> Vec<f64> {
    let mut rng = key.stream_for(r, 0, Role::ObservedInitial);
    let mut x0 = vec![0.0; spec.dim()];
    spec.initial.sample(&mut rng, &mut x0);
    x0
}

pub fn ito_scenario(cfg: &ExperimentConfig) -> Result<ItoScenario, CliError> {
    let (sel, preset) = registry::split_scenario(&cfg.scenario, cfg.functional.as_ref())?;
    let functional = registry::functional(&sel)?;
    let coefs = registry::preset(preset, cfg.coefficients.as_ref())?;
    let x_spec = registry::semimartingale(&coefs)?;
    let y_spec = functional.depends_on_y().then(|| SemimartingaleSpec::new(1).with_scalar_vol(1.0));
    Ok(ItoScenario {
        functional,
        x_spec,
        y_spec,
        y0: vec![0.0],
        grid: grid(cfg)?,
        particles: cfg.ensemble.particles,
        assemble: AssembleOptions {
            common_scale: if cfg.debug.corrupt_common_integral { 0.5 } else { 1.0 },
        },
    })
}

fn sup_diff(a: &SamplePath, b: &SamplePath) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn ito_verify(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let scenario = ito_scenario(cfg)?;
    let ladder = ladder(cfg, scenario.grid)?;
    let key = RngKey::new(cfg.seed);
    let runs: Vec<ItoRun> = (0..cfg.ensemble.replications)
        .into_par_iter()
        .map(|r| scenario.run(&key, r))
        .collect::<Result<_, _>>()?;
    let orth = orthogonality_test(cfg.ensemble.replications, &ladder, rule(cfg), |r| {
        let run = &runs[r as usize];
        Ok(OrthogonalityCase {
            candidate: run.decomposition.gamma_path(),
            battery: run.battery.clone(),
        })
    })?;

    let identity = runs.iter().map(|r| r.decomposition.identity_residual()).fold(0.0, f64::max);
    let sup_gamma: Vec<f64> = runs.iter().map(|r| r.decomposition.sup_abs_gamma()).collect();
    let bound = cfg.thresholds.residual_factor * cfg.error_scale();
    let oracle_errors: Option<Vec<(f64, f64)>> = runs
        .iter()
        .map(|r| {
            r.oracle.as_ref().map(|o| {
                let g = r.decomposition.gamma_path();
                (sup_diff(&g, o), (g.last()[0] - o.last()[0]).abs())
            })
        })
        .collect();
    let identity_ok = identity <= 1e-9;
    let mut stats = json!({
        "identity_residual_max": identity,
        "sup_gamma_median": median(&sup_gamma),
        "orthogonality": {
            "pass": orth.verdict.pass,
            "worst_stat": orth.verdict.worst_stat,
            "ladder": ladder_json(&orth.report),
        },
        "oracle_bound": bound,
    });
    let mut oracle_ok = true;
    if let Some(errs) = &oracle_errors {
        let sup: Vec<f64> = errs.iter().map(|e| e.0).collect();
        let end: Vec<f64> = errs.iter().map(|e| e.1).collect();
        let (ms, me) = (median(&sup), median(&end));
        oracle_ok = ms <= bound && me <= bound;
        stats["oracle"] = json!({ "sup_error_median": ms, "terminal_error_median": me, "pass": oracle_ok });
    }

    let mut decomposition = Vec::new();
    runs[0].decomposition.write_csv(&mut decomposition)?;
    let per_rep = csv(
        &["replication", "identity_residual", "sup_gamma", "oracle_sup_error", "oracle_terminal_error"],
        runs.iter().enumerate().map(|(r, run)| {
            let (os, ot) = oracle_errors.as_ref().map_or((String::new(), String::new()), |e| (num(e[r].0), num(e[r].1)));
            vec![
                r.to_string(),
                num(run.decomposition.identity_residual()),
                num(sup_gamma[r]),
                os,
                ot,
            ]
        }),
    );
    Ok(Outcome {
        pass: identity_ok && orth.verdict.pass && oracle_ok,
        statistics: stats,
        tables: vec![
            ("ito_decomposition.csv".into(), String::from_utf8(decomposition).map_err(|e| CliError::Runtime(e.to_string()))?),
            ("ito_ladder.csv".into(), ladder_csv(&orth.report)?),
            ("ito_replications.csv".into(), per_rep),
        ],
    })
}

pub fn control(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    if cfg.scenario != "lq" {
        return Err(CliError::Config(format!("unknown control scenario `{}`; known: lq", cfg.scenario)));
    }
    let c = cfg.control.clone().unwrap_or_default();
    if c.brute_grid.is_empty() || c.pieces == 0 {
        return Err(CliError::Config("control.brute_grid must be non-empty and control.pieces positive".into()));
    }
    let words = (0..c.pieces).try_fold(1u128, |acc, _| acc.checked_mul(c.brute_grid.len() as u128));
    if words.is_none_or(|w| w > ENUMERATION_LIMIT) {
        return Err(CliError::Config(format!(
            "{}^{} open-loop words exceed the enumeration limit {ENUMERATION_LIMIT}",
            c.brute_grid.len(),
            c.pieces
        )));
    }
    let horizon = cfg.grid.horizon;
    let spec = lq_instance(horizon)?;
    let vm = value_model(&c.value_model, horizon)?;
    let mc = MonteCarlo {
        steps: cfg.grid.steps,
        particles: cfg.ensemble.particles,
        replications: cfg.ensemble.replications,
        antithetic: cfg.ensemble.antithetic,
    };
    let mut settings = VerifySettings::with_defaults(&spec, mc, c.brute_grid.iter().map(|&u| vec![u]).collect(), c.pieces);
    settings.residual_median_bound = cfg.thresholds.residual_factor * mc.error_scale(horizon);
    if let Some(tol) = cfg.thresholds.tol {
        settings.tol = tol;
    }
    if let Some(bias) = cfg.thresholds.bias {
        settings.bias_budget = bias;
    }
    settings.time_frozen_certificate = c.time_frozen;
    let key = RngKey::new(cfg.seed);
    let rep = verify_value(&spec, &vm, &settings, &key)?;

    let probes: Vec<Value> = c
        .probe_v0
        .iter()
        .map(|&v0| {
            let d = duality_residual(&spec, &DualCertificate::constant(v0, vec![1.0]), &mc, &key, settings.tol)?;
            Ok(json!({ "v0": v0, "phi": 1.0, "median": d.median, "min": d.min, "fraction_ok": d.fraction_ok, "rejected": d.rejected }))
        })
        .collect::<Result<_, CliError>>()?;

    let stats = json!({
        "value_model": vm.name,
        "V0": rep.v0,
        "J_feedback": rep.feedback.mean,
        "J_feedback_ci": rep.feedback.ci,
        "clipped_steps": rep.feedback.clipped_steps,
        "J_brute": rep.brute.best_mean,
        "J_brute_ci": rep.brute.best_ci,
        "brute_word": rep.brute.best_word,
        "residuals": {
            "min": rep.duality.min,
            "median": rep.duality.median,
            "fraction_ok": rep.duality.fraction_ok,
            "tol": rep.duality.tol,
            "median_bound": settings.residual_median_bound,
            "time_frozen": c.time_frozen,
        },
        "bias_budget": settings.bias_budget,
        "girsanov": {
            "bound": rep.girsanov.bound,
            "inverse_lr_mean": rep.girsanov.mean,
            "ci": rep.girsanov.ci,
            "within_bound": rep.girsanov.within_bound,
        },
        "flags": {
            "value_matches_feedback": rep.value_matches_feedback,
            "brute_not_better": rep.brute_not_better,
            "residual_inequality_holds": rep.residual_inequality_holds,
            "residual_median_small": rep.residual_median_small,
        },
        "probes": probes,
        "sampled_controls": rep.sampled_controls.len(),
        "note": "only the synthesized feedback and deterministic open-loop words were sampled; no claim is made over all progressively measurable controls",
    });
    let per_rep = csv(
        &["replication", "feedback_reward", "duality_residual"],
        rep.feedback
            .rewards
            .iter()
            .zip(&rep.duality.residuals)
            .enumerate()
            .map(|(r, (j, d))| vec![r.to_string(), num(*j), num(*d)]),
    );
    let brute = csv(
        &["word", "mean_reward"],
        rep.brute.evaluated.iter().map(|(w, j)| {
            let word: Vec<String> = w.iter().map(|u| u.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" ")).collect();
            vec![word.join(";"), num(*j)]
        }),
    );
    Ok(Outcome {
        pass: rep.pass,
        statistics: stats,
        tables: vec![("control_replications.csv".into(), per_rep), ("control_bruteforce.csv".into(), brute)],
    })
}

fn random_cloud(key: &RngKey, pair: u32, which: u32, role: u8, atoms: usize) -> EmpiricalMeasure {
    let mut rng = key.stream_for(pair, which, Role::Auxiliary(role));
    let xs: Vec<f64> = (0..atoms).map(|_| 1.5 * standard_normal(&mut rng)).collect();
    EmpiricalMeasure::from_scalars(&xs).expect("finite atoms")
}

pub fn derivative_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let d = cfg
        .derivative
        .as_ref()
        .ok_or_else(|| CliError::Config("derivative-check needs a [derivative] section".into()))?;
    if d.functionals.is_empty() {
        return Err(CliError::Config("derivative.functionals is empty".into()));
    }
    if d.pairs == 0 || d.atoms == 0 || d.quad_steps == 0 || !(d.tol.is_finite() && d.tol > 0.0) {
        return Err(CliError::Config("derivative needs positive pairs, atoms, quad_steps and tol".into()));
    }
    let functionals = d
        .functionals
        .iter()
        .map(registry::functional)
        .collect::<Result<Vec<_>, _>>()?;
    let key = RngKey::new(cfg.seed);
    let (t, y) = (0.5, [0.3]);
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut pass = true;
    for (fi, f) in functionals.iter().enumerate() {
        let fi = fi as u32;
        let per_pair: Vec<(f64, f64)> = (0..d.pairs as u32)
            .into_par_iter()
            .map(|p| {
                let mu = random_cloud(&key, p, 2 * fi, 0, d.atoms);
                let nu = random_cloud(&key, p, 2 * fi + 1, 0, d.atoms);
                let flat = flat_derivative_check(f, t, &y, &mu, &nu, d.quad_steps)?;
                let mut rng = key.stream_for(p, fi, Role::Auxiliary(1));
                let x = [1.5 * standard_normal(&mut rng)];
                let lions = f.lions_consistency(t, &y, &mu, &x)?;
                Ok((flat, lions))
            })
            .collect::<Result<_, CliError>>()?;
        let validation = f.validate_derivatives(&mut key.stream_for(0, fi, Role::Auxiliary(2)), 64).worst();
        let flat_max = per_pair.iter().map(|v| v.0).fold(0.0, f64::max);
        let lions_max = per_pair.iter().map(|v| v.1).fold(0.0, f64::max);
        let ok = flat_max <= d.tol && lions_max <= d.tol && validation <= d.tol;
        pass &= ok;
        results.push(json!({
            "functional": f.name(),
            "flat_residual_max": flat_max,
            "lions_fd_error_max": lions_max,
            "supplied_derivative_error": validation,
            "pass": ok,
        }));
        rows.extend(
            per_pair
                .iter()
                .enumerate()
                .map(|(p, (a, b))| vec![f.name().to_string(), p.to_string(), num(*a), num(*b)]),
        );
    }
    Ok(Outcome {
        pass,
        statistics: json!({ "tol": d.tol, "quad_steps": d.quad_steps, "atoms": d.atoms, "pairs": d.pairs, "functionals": results }),
        tables: vec![(
            "derivative_pairs.csv".into(),
            csv(&["functional", "pair", "flat_residual", "lions_fd_error"], rows),
        )],
    })
}
