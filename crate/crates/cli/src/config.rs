//! Flat `key = value` run configuration.
//!
//! Sampler settings use the field names of [`ChainConfig`]. The study design
//! is given with `process.<h>.<field>` keys (1-based `h`); when no such keys
//! are present the design is inferred from the panel file. `#` starts a
//! comment. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sums_core::model::{ProcessSpec, Role};
use sums_core::sampler::ChainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub chain: ChainConfig,
    /// Empty when the design is to be inferred from the data.
    pub processes: Vec<ProcessSpec>,
    /// Centre and scale continuous time-homogeneous covariates at ingestion.
    pub standardize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            chain: ChainConfig::default(),
            processes: Vec::new(),
            standardize: true,
        }
    }
}

#[derive(Default)]
struct PartialProcess {
    name: Option<String>,
    states: Option<usize>,
    role: Option<Role>,
    covariates: Vec<String>,
    tv_covariates: Vec<String>,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("config line {line}: {msg}"))
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| bad(line, format!("invalid value {raw:?} for {key}")))
}

fn list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl FitConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FitConfig::default();
        let mut procs: BTreeMap<usize, PartialProcess> = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content
                .split_once('=')
                .ok_or_else(|| bad(line, "expected key = value"))?;
            let (key, raw) = (key.trim(), raw.trim());
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(bad(line, format!("{key} already set on line {first}")));
            }
            let c = &mut cfg.chain;
            match key {
                "n_iter" => c.n_iter = value(line, key, raw)?,
                "burnin" => c.burnin = value(line, key, raw)?,
                "thin" => c.thin = value(line, key, raw)?,
                "adapt_burnin" => c.adapt_burnin = value(line, key, raw)?,
                "seed" => c.seed = value(line, key, raw)?,
                "n_mc" => c.n_mc = value(line, key, raw)?,
                "lambda" => c.lambda = value(line, key, raw)?,
                "gamma_s" => c.gamma_s = value(line, key, raw)?,
                "eta" => c.eta = value(line, key, raw)?,
                "nu" => c.nu = Some(value(line, key, raw)?),
                "psi_scale" => c.psi_scale = Some(value(line, key, raw)?),
                "m_mu" => c.m_mu = value(line, key, raw)?,
                "a_k0" => c.a_k0 = value(line, key, raw)?,
                "b_k0" => c.b_k0 = value(line, key, raw)?,
                "phi_proposal_var" => c.phi_proposal_var = value(line, key, raw)?,
                "adapt_init_var" => c.adapt_init_var = value(line, key, raw)?,
                "init_components" => c.init_components = value(line, key, raw)?,
                "prior_only" => c.prior_only = value(line, key, raw)?,
                "standardize" => cfg.standardize = value(line, key, raw)?,
                _ => {
                    let Some(rest) = key.strip_prefix("process.") else {
                        return Err(bad(line, format!("unknown key {key}")));
                    };
                    let (h, field) = rest
                        .split_once('.')
                        .ok_or_else(|| bad(line, format!("unknown key {key}")))?;
                    let h: usize = h
                        .parse()
                        .ok()
                        .filter(|&h| h >= 1)
                        .ok_or_else(|| bad(line, format!("process index in {key} must be a positive integer")))?;
                    let p = procs.entry(h).or_default();
                    match field {
                        "name" => p.name = Some(raw.to_string()),
                        "states" => p.states = Some(value(line, key, raw)?),
                        "role" => {
                            p.role = Some(match raw {
                                "response" => Role::Response,
                                "explanatory" => Role::Explanatory,
                                _ => return Err(bad(line, format!("role must be response or explanatory, got {raw:?}"))),
                            })
                        }
                        "covariates" => p.covariates = list(raw),
                        "tv_covariates" => p.tv_covariates = list(raw),
                        _ => return Err(bad(line, format!("unknown key {key}"))),
                    }
                }
            }
        }
        for (i, (&h, p)) in procs.iter().enumerate() {
            if h != i + 1 {
                return Err(CliError::Usage(format!("config: process {} is not defined", i + 1)));
            }
            let states = p
                .states
                .ok_or_else(|| CliError::Usage(format!("config: process.{h}.states is required")))?;
            let spec = ProcessSpec::new(p.name.clone().unwrap_or_else(|| format!("process_{h}")), states)
                .with_role(p.role.unwrap_or(Role::Response))
                .with_covariates(p.covariates.clone())
                .with_tv_covariates(p.tv_covariates.clone());
            cfg.processes.push(spec);
        }
        Ok(cfg)
    }

    /// Renders every setting, so that `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let c = &self.chain;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("n_iter", c.n_iter.to_string());
        put("burnin", c.burnin.to_string());
        put("thin", c.thin.to_string());
        put("adapt_burnin", c.adapt_burnin.to_string());
        put("seed", c.seed.to_string());
        put("n_mc", c.n_mc.to_string());
        put("lambda", c.lambda.to_string());
        put("gamma_s", c.gamma_s.to_string());
        put("eta", c.eta.to_string());
        if let Some(nu) = c.nu {
            put("nu", nu.to_string());
        }
        if let Some(psi) = c.psi_scale {
            put("psi_scale", psi.to_string());
        }
        put("m_mu", c.m_mu.to_string());
        put("a_k0", c.a_k0.to_string());
        put("b_k0", c.b_k0.to_string());
        put("phi_proposal_var", c.phi_proposal_var.to_string());
        put("adapt_init_var", c.adapt_init_var.to_string());
        put("init_components", c.init_components.to_string());
        put("prior_only", c.prior_only.to_string());
        put("standardize", self.standardize.to_string());
        for (i, p) in self.processes.iter().enumerate() {
            let h = i + 1;
            put(&format!("process.{h}.name"), p.name.clone());
            put(&format!("process.{h}.states"), p.n_states.to_string());
            let role = match p.role {
                Role::Response => "response",
                Role::Explanatory => "explanatory",
            };
            put(&format!("process.{h}.role"), role.into());
            if !p.covariates.is_empty() {
                put(&format!("process.{h}.covariates"), p.covariates.join(","));
            }
            if !p.tv_covariates.is_empty() {
                put(&format!("process.{h}.tv_covariates"), p.tv_covariates.join(","));
            }
        }
        out
    }
}
