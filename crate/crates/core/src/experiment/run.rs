//! One experiment: synthetic data, reconstruction, metrics, and files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{kind_name, ExperimentConfig, OptTolMode};
use super::preset::preset_problem;
use crate::direct_ls::{direct_ls_solve, DirectOptions};
use crate::field::PolicyField;
use crate::forward::{generate_data_with, measure, DataOptions, InverseData};
use crate::grid::{l2_norm, Grid};
use crate::inverse::{policy_iteration_inverse, InverseOptions, InverseResult, OptTolSchedule};
use crate::pde::MfgProblem;
use crate::{Result, VERSION};

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: &'static str,
    /// `‖b − b*‖ / ‖b*‖`
    pub relative_error: f64,
    pub absolute_error: f64,
    pub iterations: usize,
    pub final_policy_gap: f64,
    /// `‖𝒢u(b) − g_clean‖ / ‖g_clean‖` for the reconstructed state.
    pub measurement_relative_misfit: f64,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub version: &'static str,
    pub config: ExperimentConfig,
    pub true_obstacle_norm: f64,
    pub data_noise_norm: f64,
    pub methods: Vec<MethodSummary>,
}

/// In-memory result of [`run_experiment`].
pub struct Outcome {
    pub summary: Summary,
    pub problem: MfgProblem,
    pub b_true: Vec<f64>,
    pub data: InverseData,
    pub results: Vec<(&'static str, InverseResult)>,
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn inverse_options(cfg: &ExperimentConfig) -> InverseOptions {
    InverseOptions {
        tol: cfg.tol,
        gamma: cfg.gamma,
        opt_tol: match cfg.opt_tol_mode {
            OptTolMode::Fixed => OptTolSchedule::Fixed(cfg.opt_tol),
            OptTolMode::Halving => OptTolSchedule::Halving { start: 1e-6_f64.max(cfg.opt_tol), floor: cfg.opt_tol },
        },
        max_iter: cfg.max_iter,
        ..InverseOptions::default()
    }
}

pub fn direct_options(cfg: &ExperimentConfig) -> DirectOptions {
    DirectOptions {
        gamma: cfg.gamma,
        opt_tol: cfg.opt_tol,
        fwd_tol: cfg.forward_tol(),
        adj_tol: cfg.adj_tol,
        warm_start: cfg.direct_warm_start,
        ..DirectOptions::default()
    }
}

pub fn synthetic_data(cfg: &ExperimentConfig, prob: &MfgProblem, b_true: &[f64]) -> Result<InverseData> {
    let opts = DataOptions {
        kind: cfg.data_kind,
        scheme: cfg.terminal_rate_scheme,
        noise_level: cfg.noise_level,
        seed: cfg.seed,
        extra_times: cfg.extra_observation_times.clone(),
        tol: cfg.data_tol,
        max_iter: crate::forward::DATA_MAX_ITER,
    };
    Ok(generate_data_with(prob, b_true, &opts)?.0)
}

/// Runs the configured methods without writing anything.
pub fn compute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (prob, b_true) = preset_problem(cfg)?;
    let grid = prob.grid;
    let data = synthetic_data(cfg, &prob, &b_true)?;
    let clean = data.clean.clone().unwrap_or_else(|| data.g.clone());
    let b_norm = l2_norm(&grid, &b_true);

    let mut results = Vec::new();
    if cfg.method.runs_policy() {
        let r = policy_iteration_inverse(&prob, &data, &PolicyField::zeros(&grid), &inverse_options(cfg), Some(&b_true))?;
        results.push(("policy", r));
    }
    if cfg.method.runs_direct() {
        let r = direct_ls_solve(&prob, &data, &vec![0.0; grid.n_space()], &direct_options(cfg), Some(&b_true))?;
        results.push(("direct", r));
    }

    let methods = results
        .iter()
        .map(|(name, r)| {
            let err = l2_norm(&grid, &diff(&r.b, &b_true));
            let gu = measure(&prob, &r.u, &r.m, &r.b, data.kind, data.scheme);
            MethodSummary {
                method: name,
                relative_error: err / b_norm,
                absolute_error: err,
                iterations: r.iterations,
                final_policy_gap: r.policy_gap_history.last().copied().unwrap_or(f64::NAN),
                measurement_relative_misfit: l2_norm(&grid, &diff(&gu, &clean)) / l2_norm(&grid, &clean),
                wall_time_seconds: r.wall_time_seconds,
            }
        })
        .collect();
    let summary = Summary {
        version: VERSION,
        config: cfg.clone(),
        true_obstacle_norm: b_norm,
        data_noise_norm: l2_norm(&grid, &diff(&data.g, &clean)),
        methods,
    };
    Ok(Outcome { summary, problem: prob, b_true, data, results })
}

fn coord_headers(grid: &Grid) -> Vec<String> {
    (1..=grid.dim()).map(|k| if grid.dim() == 1 { "x".to_string() } else { format!("x{k}") }).collect()
}

fn write_csv<R: Serialize>(path: &Path, header: &[String], rows: impl Iterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_outputs(out: &Outcome, dir: &Path, created: &mut Vec<PathBuf>) -> Result<()> {
    let grid = out.problem.grid;
    let mut path = |name: &str| {
        let p = dir.join(name);
        created.push(p.clone());
        p
    };

    let json = serde_json::to_string_pretty(&out.summary)?;
    fs::write(path("summary.json"), json + "\n")?;

    let mut header = coord_headers(&grid);
    header.push("b_true".into());
    for (name, _) in &out.results {
        header.push(format!("b_{name}"));
        header.push(format!("abs_error_{name}"));
    }
    write_csv(
        &path("reconstruction.csv"),
        &header,
        (0..grid.n_space()).map(|i| {
            let mut row = grid.coords(i);
            row.push(out.b_true[i]);
            for (_, r) in &out.results {
                row.push(r.b[i]);
                row.push((r.b[i] - out.b_true[i]).abs());
            }
            row
        }),
    )?;

    for (name, r) in &out.results {
        let header: Vec<String> = ["iteration", "b_error_l2", "policy_gap", "objective"].map(String::from).to_vec();
        write_csv(
            &path(&format!("history_{name}.csv")),
            &header,
            (0..r.iterations).map(|k| {
                let at = |h: &[f64]| h.get(k).copied().unwrap_or(f64::NAN);
                (k + 1, at(&r.b_error_history), at(&r.policy_gap_history), at(&r.objective_history))
            }),
        )?;
    }

    let data = &out.data;
    let clean = data.clean.clone().unwrap_or_else(|| data.g.clone());
    let gus: Vec<Vec<f64>> = out
        .results
        .iter()
        .map(|(_, r)| measure(&out.problem, &r.u, &r.m, &r.b, data.kind, data.scheme))
        .collect();
    let mut header = coord_headers(&grid);
    header.extend(["g_observed".to_string(), "g_clean".to_string()]);
    for (name, _) in &out.results {
        header.push(format!("gu_{name}"));
    }
    for o in &data.extra {
        header.push(format!("g_observed_n{}", o.level));
        for (name, _) in &out.results {
            header.push(format!("u_{name}_n{}", o.level));
        }
    }
    write_csv(
        &path(&format!("gu_{}.csv", kind_name(data.kind))),
        &header,
        (0..grid.n_space()).map(|i| {
            let mut row = grid.coords(i);
            row.push(data.g[i]);
            row.push(clean[i]);
            row.extend(gus.iter().map(|g| g[i]));
            for o in &data.extra {
                row.push(o.g[i]);
                row.extend(out.results.iter().map(|(_, r)| r.u.level(o.level)[i]));
            }
            row
        }),
    )?;
    Ok(())
}

/// Runs an experiment and writes `summary.json`, `reconstruction.csv`,
/// `history_<method>.csv` and `gu_<kind>.csv` into the output directory.
/// On failure nothing is left behind.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = compute(cfg)?;
    let dir = &cfg.output_dir;
    let existed = dir.exists();
    fs::create_dir_all(dir)?;
    let mut created = Vec::new();
    if let Err(e) = write_outputs(&out, dir, &mut created) {
        for p in &created {
            let _ = fs::remove_file(p);
        }
        if !existed {
            let _ = fs::remove_dir(dir);
        }
        return Err(e);
    }
    Ok(out)
}
