// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use warmswap_core::sim::{CostModel, FunctionProfile, Strategy};
use warmswap_core::workload::{generate_trace, read_traces_csv, InvocationTrace, RateParams};

/// Poisson traces generated from the experiment seed, one per profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTraces {
    pub rate_per_minute: f64,
    pub horizon_minutes: f64,
}

/// A simulation experiment. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profiles: PathBuf,
    pub cost: PathBuf,
    #[serde(default)]
    pub traces: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticTraces>,
    pub strategy: Strategy,
    /// Strategies for `--compare`; all of them when empty.
    #[serde(default)]
    pub compare: Vec<Strategy>,
    pub keep_alive_minutes: f64,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub profiles: Vec<FunctionProfile>,
    pub cost: CostModel,
    pub traces: Vec<InvocationTrace>,
    pub output_dir: PathBuf,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}:{}:{}: {}", path.display(), e.line(), e.column(), e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Experiment {
    pub fn load(config_path: &Path) -> Result<Self> {
        let config: ExperimentConfig = read_json(config_path)?;
        let base = config_path.parent().unwrap_or(Path::new("."));
        let profiles: Vec<FunctionProfile> = read_json(&resolve(base, &config.profiles))?;
        let cost: CostModel = read_json(&resolve(base, &config.cost))?;
        cost.validate()?;
        for p in &profiles {
            p.validate()?;
        }
        let traces = match (&config.traces, &config.synthetic) {
            (Some(path), None) => {
                let path = resolve(base, path);
                let file =
                    fs::File::open(&path).with_context(|| format!("reading {}", path.display()))?;
                read_traces_csv(file).with_context(|| format!("{}", path.display()))?
            }
            (None, Some(syn)) => {
                let params = RateParams::new(
                    syn.rate_per_minute,
                    config.keep_alive_minutes,
                    syn.horizon_minutes,
                )?;
                profiles
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        generate_trace(&params, &p.name, config.seed.wrapping_add(i as u64))
                    })
                    .collect()
            }
            _ => bail!(
                "{}: exactly one of \"traces\" and \"synthetic\" must be set",
                config_path.display()
            ),
        };
        let output_dir = resolve(base, &config.output_dir);
        Ok(Self {
            config,
            profiles,
            cost,
            traces,
            output_dir,
        })
    }
}
