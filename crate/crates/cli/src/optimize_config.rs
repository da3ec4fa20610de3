//! `key = value` configuration for `optimize`; `#` starts a comment.

use std::path::PathBuf;

use serde::Serialize;

use metavox_core::topopt::{Objective, TopOptProblem};
use metavox_core::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeConfig {
    pub problem: TopOptProblem,
    pub resolution: usize,
    pub seed: u64,
    pub init: Option<PathBuf>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { problem: TopOptProblem::default(), resolution: 16, seed: 0, init: None }
    }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

impl OptimizeConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.problem;
        match key {
            "objective" => p.objective = value.parse::<Objective>()?,
            "vf" => p.target_vf = number(key, value)?,
            "resolution" => self.resolution = number(key, value)?,
            "iters" => p.max_iters = number(key, value)?,
            "seed" => self.seed = number(key, value)?,
            "init" => self.init = Some(PathBuf::from(value)),
            "isotropy" => p.isotropy = number(key, value)?,
            "isotropy_weight" => p.isotropy_weight = number(key, value)?,
            "filter_radius" => p.filter_radius = number(key, value)?,
            "penalty" => p.simp_exponent = number(key, value)?,
            "move_limit" => p.move_limit = number(key, value)?,
            "change_tol" => p.change_tol = number(key, value)?,
            "solver_tol" => p.solver_tol = number(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown optimize key {key:?}"))),
        }
        Ok(())
    }
}
