//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::forward::{DataKind, TerminalRateScheme};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Paper1d,
    Paper2d,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Policy,
    Direct,
    Both,
}

impl Method {
    pub fn runs_policy(self) -> bool {
        matches!(self, Method::Policy | Method::Both)
    }

    pub fn runs_direct(self) -> bool {
        matches!(self, Method::Direct | Method::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptTolMode {
    Fixed,
    Halving,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub dim: usize,
    pub points_per_dim: usize,
    pub time_steps: usize,
    pub horizon: f64,
    pub eps: f64,
    /// `F(m) = m^α`; zero switches the coupling off.
    pub coupling_exponent: f64,
    #[serde(serialize_with = "ser_kind")]
    pub data_kind: DataKind,
    #[serde(serialize_with = "ser_scheme")]
    pub terminal_rate_scheme: TerminalRateScheme,
    pub extra_observation_times: Vec<f64>,
    pub noise_level: f64,
    pub seed: u64,
    pub method: Method,
    pub gamma: f64,
    pub tol: f64,
    pub opt_tol: f64,
    pub opt_tol_mode: OptTolMode,
    pub max_iter: usize,
    /// Forward tolerance of direct least squares; defaults to `tol`.
    pub fwd_tol: Option<f64>,
    pub adj_tol: f64,
    pub direct_warm_start: bool,
    /// Tolerance of the forward solve behind synthetic data.
    pub data_tol: f64,
    pub output_dir: PathBuf,
    /// Single-column CSVs (row-major grid order) for the custom preset.
    pub b_true_file: Option<PathBuf>,
    pub m0_file: Option<PathBuf>,
    pub u_terminal_file: Option<PathBuf>,
}

fn ser_kind<S: serde::Serializer>(k: &DataKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(kind_name(*k))
}

fn ser_scheme<S: serde::Serializer>(k: &TerminalRateScheme, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(match k {
        TerminalRateScheme::EquationResidual => "equation",
        TerminalRateScheme::BackwardDifference => "backward",
    })
}

pub fn kind_name(k: DataKind) -> &'static str {
    match k {
        DataKind::InitialValue => "u0",
        DataKind::TerminalRate => "utT",
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Paper1d,
            dim: 1,
            points_per_dim: 50,
            time_steps: 100,
            horizon: 1.0,
            eps: 0.3,
            coupling_exponent: 2.0,
            data_kind: DataKind::TerminalRate,
            terminal_rate_scheme: TerminalRateScheme::EquationResidual,
            extra_observation_times: Vec::new(),
            noise_level: 0.0,
            seed: 0,
            method: Method::Policy,
            gamma: 0.0,
            tol: 1e-9,
            opt_tol: 1e-10,
            opt_tol_mode: OptTolMode::Fixed,
            max_iter: 100,
            fwd_tol: None,
            adj_tol: 1e-10,
            direct_warm_start: false,
            data_tol: crate::forward::DATA_TOL,
            output_dir: PathBuf::from("out"),
            b_true_file: None,
            m0_file: None,
            u_terminal_file: None,
        }
    }
}

fn bad(key: &str, value: &str, why: impl fmt::Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected a boolean")),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .or_else(|| value.strip_prefix('\'').and_then(|v| v.strip_suffix('\'')))
            .unwrap_or(value);
        let k = key.as_str();
        match k {
            "preset" => {
                self.preset = match value {
                    "paper-1d" | "paper1d" => Preset::Paper1d,
                    "paper-2d" | "paper2d" => Preset::Paper2d,
                    "custom" => Preset::Custom,
                    _ => return Err(bad(k, value, "expected paper-1d, paper-2d or custom")),
                }
            }
            "dim" => self.dim = parse(k, value)?,
            "points_per_dim" | "points" => self.points_per_dim = parse(k, value)?,
            "time_steps" => self.time_steps = parse(k, value)?,
            "horizon" | "t" => self.horizon = parse(k, value)?,
            "eps" => self.eps = parse(k, value)?,
            "coupling_exponent" => self.coupling_exponent = parse(k, value)?,
            "data_kind" => {
                self.data_kind = match value {
                    "u0" => DataKind::InitialValue,
                    "utT" | "utt" | "ut_t" => DataKind::TerminalRate,
                    _ => return Err(bad(k, value, "expected u0 or utT")),
                }
            }
            "terminal_rate_scheme" => {
                self.terminal_rate_scheme = match value {
                    "equation" => TerminalRateScheme::EquationResidual,
                    "backward" => TerminalRateScheme::BackwardDifference,
                    _ => return Err(bad(k, value, "expected equation or backward")),
                }
            }
            "extra_observation_times" => {
                self.extra_observation_times = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(k, s))
                    .collect::<Result<_>>()?
            }
            "noise_level" => self.noise_level = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "method" => {
                self.method = match value {
                    "policy" => Method::Policy,
                    "direct" => Method::Direct,
                    "both" => Method::Both,
                    _ => return Err(bad(k, value, "expected policy, direct or both")),
                }
            }
            "gamma" => self.gamma = parse(k, value)?,
            "tol" => self.tol = parse(k, value)?,
            "opt_tol" => self.opt_tol = parse(k, value)?,
            "opt_tol_mode" => {
                self.opt_tol_mode = match value {
                    "fixed" => OptTolMode::Fixed,
                    "halving" => OptTolMode::Halving,
                    _ => return Err(bad(k, value, "expected fixed or halving")),
                }
            }
            "max_iter" => self.max_iter = parse(k, value)?,
            "fwd_tol" => self.fwd_tol = Some(parse(k, value)?),
            "adj_tol" => self.adj_tol = parse(k, value)?,
            "direct_warm_start" => self.direct_warm_start = parse_bool(k, value)?,
            "data_tol" => self.data_tol = parse(k, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "b_true_file" => self.b_true_file = Some(PathBuf::from(value)),
            "m0_file" => self.m0_file = Some(PathBuf::from(value)),
            "u_terminal_file" => self.u_terminal_file = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every setting of a config text. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    /// Applies `--key value` (or `--key=value`) overrides.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{arg}`")))?;
            match key.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it.next().ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
                    self.set(key, v)?;
                }
            }
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then command-line overrides.
    /// Relative data-file paths are resolved against the config file.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [&mut cfg.b_true_file, &mut cfg.m0_file, &mut cfg.u_terminal_file].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.apply_overrides(overrides)?;
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Applies preset constraints and checks consistency.
    pub fn finalize(&mut self) -> Result<()> {
        match self.preset {
            Preset::Paper1d => self.dim = 1,
            Preset::Paper2d => self.dim = 2,
            Preset::Custom => {
                if self.b_true_file.is_none() || self.m0_file.is_none() {
                    return Err(Error::Config("custom preset needs b_true_file and m0_file".into()));
                }
            }
        }
        if !(1..=2).contains(&self.dim) {
            return Err(Error::Config(format!("dim must be 1 or 2, got {}", self.dim)));
        }
        if !self.extra_observation_times.is_empty() {
            if self.data_kind != DataKind::InitialValue {
                return Err(Error::Config("extra_observation_times require data_kind = u0".into()));
            }
            if let Some(t) = self.extra_observation_times.iter().find(|&&t| !(t > 0.0 && t < self.horizon)) {
                return Err(Error::Config(format!("observation time {t} is outside (0, T)")));
            }
        }
        for (name, v) in [("tol", self.tol), ("opt_tol", self.opt_tol), ("adj_tol", self.adj_tol), ("data_tol", self.data_tol)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_level >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config("noise_level and gamma must be nonnegative".into()));
        }
        if !(self.coupling_exponent >= 0.0) {
            return Err(Error::Config("coupling_exponent must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn forward_tol(&self) -> f64 {
        self.fwd_tol.unwrap_or(self.tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_then_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\npreset = paper-2d\npoints_per_dim = 30  # inline\n\ndata-kind = u0\n").unwrap();
        c.apply_overrides(&["--points-per-dim".into(), "20".into(), "--method=both".into()]).unwrap();
        c.finalize().unwrap();
        assert_eq!(c.dim, 2);
        assert_eq!(c.points_per_dim, 20);
        assert_eq!(c.data_kind, DataKind::InitialValue);
        assert_eq!(c.method, Method::Both);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = ExperimentConfig::default();
        assert!(c.apply_text("nonsense").is_err());
        assert!(c.set("unknown", "1").is_err());
        assert!(c.set("tol", "abc").is_err());
        assert!(c.apply_overrides(&["--tol".into()]).is_err());

        let mut c = ExperimentConfig::default();
        c.set("extra_observation_times", "0.2").unwrap();
        assert!(c.finalize().is_err(), "extra times need u0 data");
        c.set("data_kind", "u0").unwrap();
        c.finalize().unwrap();
        c.set("extra_observation_times", "0.2, 1.5").unwrap();
        assert!(c.finalize().is_err());

        let mut c = ExperimentConfig::default();
        c.set("preset", "custom").unwrap();
        assert!(c.finalize().is_err());
    }
}
