//! Problem presets.

use std::f64::consts::PI;
use std::path::Path;

use super::config::{ExperimentConfig, Preset};
use crate::grid::{make_grid, Grid};
use crate::pde::{Coupling, MfgProblem};
use crate::{Error, Result};

/// `0.1 (sin(2πx − sin 4πx) + exp(cos 2πx))`
pub fn paper_1d_obstacle(x: f64) -> f64 {
    0.1 * ((2.0 * PI * x - (4.0 * PI * x).sin()).sin() + (2.0 * PI * x).cos().exp())
}

/// `sin(2πx₁) sin(2πx₂)`
pub fn paper_2d_obstacle(x: &[f64]) -> f64 {
    (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin()
}

/// Unnormalised initial density of the paper presets.
fn paper_density(x: &[f64]) -> f64 {
    match x.len() {
        1 => (-40.0 * (x[0] - 0.5).powi(2)).exp(),
        _ => (-5.0 * x.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>()).exp(),
    }
}

pub fn coupling_for(exponent: f64) -> Coupling {
    if exponent == 0.0 {
        Coupling::Off
    } else {
        Coupling::Power(exponent)
    }
}

fn read_column(path: &Path, grid: &Grid, what: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::with_capacity(grid.n_space());
    for rec in rdr.records() {
        let rec = rec?;
        let field = rec.get(rec.len().saturating_sub(1)).unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            // tolerate a header row
            Err(_) if out.is_empty() => continue,
            Err(e) => return Err(Error::Config(format!("{}: {e}", path.display()))),
        }
    }
    if out.len() != grid.n_space() {
        return Err(Error::Config(format!(
            "{what} file {} has {} values, grid has {} points",
            path.display(),
            out.len(),
            grid.n_space()
        )));
    }
    Ok(out)
}

/// Builds the forward problem and the true obstacle sampled on the grid.
/// `m0` is normalised to unit mass and `u_T = −m0` unless the custom preset
/// supplies a terminal cost.
pub fn preset_problem(cfg: &ExperimentConfig) -> Result<(MfgProblem, Vec<f64>)> {
    let grid = make_grid(cfg.dim, cfg.points_per_dim, cfg.time_steps, cfg.horizon)?;
    let coupling = coupling_for(cfg.coupling_exponent);
    let (m0, b_true, u_t) = match cfg.preset {
        Preset::Paper1d | Preset::Paper2d => {
            let b = match cfg.preset {
                Preset::Paper1d => grid.sample(|x| paper_1d_obstacle(x[0])),
                _ => grid.sample(paper_2d_obstacle),
            };
            (grid.sample(paper_density), b, None)
        }
        Preset::Custom => {
            fn need<'a>(p: &'a Option<std::path::PathBuf>, what: &str) -> Result<&'a Path> {
                p.as_deref().ok_or_else(|| Error::Config(format!("custom preset needs {what}")))
            }
            let m0 = read_column(need(&cfg.m0_file, "m0_file")?, &grid, "m0")?;
            let b = read_column(need(&cfg.b_true_file, "b_true_file")?, &grid, "b_true")?;
            let ut = cfg.u_terminal_file.as_deref().map(|p| read_column(p, &grid, "u_terminal")).transpose()?;
            (m0, b, ut)
        }
    };
    let mass = crate::grid::integrate(&grid, &m0);
    let u_t = u_t.unwrap_or_else(|| m0.iter().map(|v| -v / mass).collect());
    let prob = MfgProblem::new(grid, cfg.eps, m0, u_t, coupling)?;
    Ok((prob, b_true))
}
