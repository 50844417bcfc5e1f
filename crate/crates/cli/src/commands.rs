//! The three experiment commands: solve, simulate, stealth.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use stealth_lqr::analysis::{
    default_lambda_grid, lambda_search, state_moments, SearchMode, StealthReport,
};
use stealth_lqr::bound::{detection_bound, BoundReport};
use stealth_lqr::detector::{run_sprt, SprtConfig};
use stealth_lqr::sim::{deception_measure, rollout, SeedSpec};
use stealth_lqr::solver::{
    admissible_lambda_max, backward_solve_with, wellposedness_holds, SolvedPolicy,
};
use stealth_lqr::{Error, ProblemSpec};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Compact intensity label for file names (CSV columns keep full
/// precision). Falls back to the full representation when rounding to six
/// decimals would collide with a different intensity.
fn lambda_label(lambda: f64) -> String {
    let mut s = format!("{lambda:.6}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    match s.parse::<f64>() {
        Ok(back) if back == lambda => s,
        _ => lambda.to_string(),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serialization");
    text.push('\n');
    write_file(dir, name, &text)
}

/// Echoes the resolved config and a manifest keyed by its hash.
fn write_run_metadata(
    cfg: &ExperimentConfig,
    grid_default: &[f64],
    command: &str,
) -> Result<(), CliError> {
    let resolved = cfg.to_value(grid_default);
    let canonical = serde_json::to_string(&resolved).expect("json serialization");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hash = String::with_capacity(64);
    for byte in digest {
        hash.push_str(&format!("{byte:02x}"));
    }
    write_json(&cfg.out, "config_resolved.json", &resolved)?;
    write_json(
        &cfg.out,
        "manifest.json",
        &json!({
            "command": command,
            "config_sha256": hash,
            "seed": cfg.seed,
            "paths": cfg.paths,
            "artifact": format!("stealth-lqr {}", env!("CARGO_PKG_VERSION")),
        }),
    )?;
    Ok(())
}

fn solve_at(spec: &ProblemSpec, force: bool) -> Result<SolvedPolicy, CliError> {
    backward_solve_with(spec, force).map_err(CliError::Core)
}

/// `solve`: well-posedness diagnostic, policy dump.
pub fn cmd_solve(cfg: &ExperimentConfig, dump: Option<&Path>) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    let spec = &cfg.problem;
    let lambda_max = admissible_lambda_max(spec);
    let wp = wellposedness_holds(spec);
    println!("admissible intensity range: [0, {lambda_max}]");
    println!(
        "lambda = {}: condition eigenvalue {:.6e} ({})",
        spec.lambda(),
        wp.min_eigenvalue,
        if wp.holds {
            "well-posed"
        } else {
            "not well-posed"
        }
    );
    let policy = solve_at(spec, cfg.force)?;
    let dump_value = policy.dump_json();
    let path = write_json(&cfg.out, "policy.json", &dump_value)?;
    if let Some(extra) = dump {
        let mut text = serde_json::to_string_pretty(&dump_value).expect("json serialization");
        text.push('\n');
        fs::write(extra, text)?;
    }
    write_run_metadata(cfg, &[spec.lambda()], "solve")?;
    println!("policy written to {}", path.display());
    Ok(())
}

/// `simulate`: one shared-noise trajectory per intensity, SPRT traces, and
/// a summary table.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    let lambdas = cfg.grid.clone().unwrap_or_else(|| vec![0.0, 0.1, 0.3]);
    let sprt = SprtConfig::from_error_probabilities(cfg.a, cfg.b).map_err(CliError::Core)?;
    let horizon = cfg.problem.horizon();

    let mut summary = String::from("lambda,primary_cost,deception");
    for t in 0..=horizon {
        summary.push_str(&format!(",loglr_{t}"));
    }
    summary.push('\n');

    for &lambda in &lambdas {
        let spec = cfg.problem.with_lambda(lambda).map_err(CliError::Core)?;
        let policy = solve_at(&spec, cfg.force)?;
        let traj = rollout(
            &spec,
            &policy,
            SeedSpec {
                master_seed: cfg.seed,
                path_index: 0,
            },
        );
        let label = lambda_label(lambda);
        write_file(
            &cfg.out,
            &format!("traj_lambda{label}.csv"),
            &traj.to_csv(spec.n()),
        )?;
        let trace = run_sprt(&spec, &traj, &sprt);
        write_file(
            &cfg.out,
            &format!("sprt_lambda{label}.csv"),
            &trace.to_csv(),
        )?;

        let deception = deception_measure(&spec, &traj).map_err(CliError::Core)?;
        summary.push_str(&format!("{lambda},{},{deception}", traj.primary_cost));
        for l in &traj.loglr {
            summary.push_str(&format!(",{l}"));
        }
        summary.push('\n');
    }
    write_file(&cfg.out, "summary.csv", &summary)?;
    write_json(
        &cfg.out,
        "thresholds.json",
        &serde_json::to_value(sprt).expect("json serialization"),
    )?;
    write_run_metadata(cfg, &lambdas, "simulate")?;
    println!(
        "wrote {} trajectories to {}",
        lambdas.len(),
        cfg.out.display()
    );
    Ok(())
}

/// Largest grid intensity whose metric stays within `epsilon`.
fn select(verdicts: &[(f64, f64)], epsilon: f64) -> Option<f64> {
    verdicts
        .iter()
        .filter(|(_, metric)| *metric <= epsilon)
        .map(|(lambda, _)| *lambda)
        .fold(None, |acc: Option<f64>, l| {
            Some(acc.map_or(l, |a| a.max(l)))
        })
}

/// `stealth`: per-intensity detection estimates and/or analytical bounds,
/// plus the tolerance selection table.
pub fn cmd_stealth(cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    let spec = &cfg.problem;
    let sprt = SprtConfig::from_error_probabilities(cfg.a, cfg.b).map_err(CliError::Core)?;
    let grid = cfg
        .grid
        .clone()
        .unwrap_or_else(|| default_lambda_grid(spec));
    let first_eps = *cfg
        .eps
        .first()
        .ok_or_else(|| CliError::Config("at least one tolerance is required".into()))?;

    // Monte-Carlo table (metrics are tolerance-independent).
    let mc_report: Option<StealthReport> = if cfg.mode.runs_mc() {
        Some(
            lambda_search(
                spec,
                first_eps,
                &grid,
                &sprt,
                cfg.paths,
                cfg.seed,
                0.05,
                SearchMode::Mc,
            )
            .map_err(CliError::Core)?,
        )
    } else {
        None
    };

    // Analytical-bound table with the full per-row detail.
    let mut bound_report = BoundReport::default();
    let mut bound_verdicts: Vec<(f64, f64)> = Vec::new();
    if cfg.mode.runs_bound() {
        for &lambda in &grid {
            let spec_l = match spec.with_lambda(lambda) {
                Ok(s) => s,
                Err(_) => continue,
            };
            if !wellposedness_holds(&spec_l).holds {
                continue;
            }
            let policy = solve_at(&spec_l, false)?;
            let moments = state_moments(&spec_l, &policy).map_err(CliError::Core)?;
            let mut max_bound = 0.0_f64;
            for t in 0..=spec_l.horizon() {
                let row = detection_bound(&spec_l, &policy, &moments, &sprt, t)
                    .map_err(CliError::Core)?;
                max_bound = max_bound.max(row.bound);
                bound_report.rows.push(row);
            }
            bound_verdicts.push((lambda, max_bound));
        }
        if bound_verdicts.is_empty() {
            return Err(CliError::Core(Error::EmptyGrid));
        }
        write_file(&cfg.out, "bound.csv", &bound_report.to_csv())?;
    }

    // Stealth table; in `both` mode the bound column is merged in.
    if let Some(report) = &mc_report {
        let mut csv = String::from("lambda,t,p_hat,ci_lo,ci_hi,bound\n");
        for row in &report.rows {
            let bound = bound_report
                .rows
                .iter()
                .find(|b| b.lambda == row.lambda && b.t == row.t)
                .map(|b| b.bound.to_string())
                .unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{},{bound}\n",
                row.lambda,
                row.t,
                row.p_hat.unwrap_or(f64::NAN),
                row.ci_lo.unwrap_or(f64::NAN),
                row.ci_hi.unwrap_or(f64::NAN),
            ));
        }
        write_file(&cfg.out, "stealth.csv", &csv)?;
    }

    let mc_verdicts: Vec<(f64, f64)> = mc_report
        .as_ref()
        .map(|r| {
            r.verdicts
                .iter()
                .map(|v| (v.lambda, v.max_metric))
                .collect()
        })
        .unwrap_or_default();

    // Per-tolerance trade-off table: selected intensity, its detection
    // metric, and the deception measure and primary cost of the designated
    // seed-0 trajectory at that intensity.
    let mut per_eps = Vec::new();
    for &eps in &cfg.eps {
        let lambda_mc = select(&mc_verdicts, eps);
        let lambda_bound = select(&bound_verdicts, eps);
        let chosen = if cfg.mode.runs_mc() {
            lambda_mc
        } else {
            lambda_bound
        };
        let (deception, primary_cost) = match chosen {
            None => (None, None),
            Some(lambda) => {
                let spec_l = spec.with_lambda(lambda).map_err(CliError::Core)?;
                let policy = solve_at(&spec_l, false)?;
                let traj = rollout(
                    &spec_l,
                    &policy,
                    SeedSpec {
                        master_seed: cfg.seed,
                        path_index: 0,
                    },
                );
                let d = deception_measure(&spec_l, &traj).map_err(CliError::Core)?;
                (Some(d), Some(traj.primary_cost))
            }
        };
        let metric_at = |verdicts: &[(f64, f64)], lambda: Option<f64>| {
            lambda.and_then(|l| {
                verdicts
                    .iter()
                    .find(|(x, _)| *x == l)
                    .map(|(_, metric)| *metric)
            })
        };
        per_eps.push(json!({
            "epsilon": eps,
            "lambda_mc": lambda_mc,
            "max_metric_mc": metric_at(&mc_verdicts, lambda_mc),
            "lambda_bound": lambda_bound,
            "max_metric_bound": metric_at(&bound_verdicts, lambda_bound),
            "deception": deception,
            "primary_cost": primary_cost,
        }));
    }

    let admissible = if cfg.mode.runs_mc() {
        mc_verdicts.len()
    } else {
        bound_verdicts.len()
    };
    let selection = json!({
        "mode": if cfg.mode.runs_mc() && cfg.mode.runs_bound() { "both" }
                else if cfg.mode.runs_mc() { "mc" } else { "bound" },
        "per_epsilon": per_eps,
        "skipped": mc_report.as_ref().map(|r| serde_json::to_value(&r.skipped).unwrap()),
        "degenerate_grid": admissible <= 1,
        "n_paths": cfg.paths,
    });
    write_json(&cfg.out, "selection.json", &selection)?;

    // Primary-mode selection at the first tolerance decides the exit status.
    let primary = if cfg.mode.runs_mc() {
        select(&mc_verdicts, first_eps)
    } else {
        select(&bound_verdicts, first_eps)
    };
    match primary {
        Some(lambda) => {
            println!("selected intensity lambda* = {lambda} at tolerance {first_eps}");
            write_run_metadata(cfg, &grid, "stealth")?;
            Ok(())
        }
        None => {
            write_run_metadata(cfg, &grid, "stealth")?;
            Err(CliError::NoAdmissibleIntensity)
        }
    }
}
