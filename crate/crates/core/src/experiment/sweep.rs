//! Batch of experiments, run in parallel.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::run::{run_experiment, Summary};
use crate::{Error, Result};

/// Environment variable overriding the worker count.
pub const THREADS_VAR: &str = "MFG_INVERSE_THREADS";

/// Config files (`*.toml`, `*.cfg`, `*.conf`, `*.txt`) in `dir`, sorted.
pub fn config_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("toml" | "cfg" | "conf" | "txt")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no config files in {}", dir.display())));
    }
    Ok(files)
}

/// Runs every config in `dir`. Each writes into `<output_dir>/<file stem>`
/// so runs sharing an output directory do not collide.
pub fn sweep(dir: &Path, overrides: &[String]) -> Result<Vec<(PathBuf, Result<Summary>)>> {
    let files = config_files(dir)?;
    let threads = std::env::var(THREADS_VAR).ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        files
            .into_par_iter()
            .map(|f| {
                let run = || -> Result<Summary> {
                    let mut cfg = ExperimentConfig::load(Some(&f), overrides)?;
                    let stem = f.file_stem().unwrap_or_default();
                    cfg.output_dir = cfg.output_dir.join(stem);
                    Ok(run_experiment(&cfg)?.summary)
                };
                let r = run();
                (f, r)
            })
            .collect()
    }))
}
