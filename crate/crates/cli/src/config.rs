use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use headkv::budget::{BudgetConfig, Rounding};
use headkv::engine::{EngineConfig, MonitorCadence, PolicyVariant, Protection};
use headkv::profiler::{AdjacencyMode, ProfileConfig};
use headkv::trace::SynthSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_POLICIES: [&str; 6] = [
    "heterocache",
    "no_allocation",
    "no_retrieval",
    "static_topk",
    "sink_window",
    "full_oracle",
];

/// Every knob of a run. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau_stable: f64,
    pub tau_sim: f64,
    /// Defaults to `tau_stable`.
    pub tau_drift: Option<f64>,
    pub rho: f64,
    pub window: usize,
    pub epsilon: f64,
    pub min_length: usize,
    pub rounding: Rounding,
    pub pool_kernel: usize,
    pub profiling_topk: Option<usize>,
    pub gqa_group_size: usize,
    /// Build adjacency from this single decode step instead of the median over steps.
    pub adjacency_step: Option<usize>,
    pub transfer_bandwidth: f64,
    pub update_delay_steps: u32,
    pub cadence: MonitorCadence,
    pub sink_tokens: usize,
    pub recency_window: usize,
    pub synthetic: Option<SynthSpec>,
    pub traces: Vec<PathBuf>,
    /// Traces used for profiling; the simulated trace when empty.
    pub calibration_traces: Vec<PathBuf>,
    pub policies: Vec<String>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let profile = ProfileConfig::<f64>::default();
        let budget = BudgetConfig::<f64>::default();
        let engine = EngineConfig::<f64>::default();
        Self {
            tau_stable: profile.tau_stable,
            tau_sim: profile.tau_sim,
            tau_drift: None,
            rho: budget.rho,
            window: engine.window,
            epsilon: budget.epsilon,
            min_length: budget.min_length,
            rounding: budget.rounding,
            pool_kernel: profile.pool_kernel,
            profiling_topk: profile.profiling_topk,
            gqa_group_size: profile.gqa_group_size,
            adjacency_step: None,
            transfer_bandwidth: engine.transfer_bandwidth,
            update_delay_steps: engine.update_delay_steps,
            cadence: engine.cadence,
            sink_tokens: engine.protection.sink_tokens,
            recency_window: engine.protection.recency_window,
            synthetic: None,
            traces: Vec::new(),
            calibration_traces: Vec::new(),
            policies: Vec::new(),
            output_dir: None,
            seed: None,
        }
    }
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Input trace (repeatable).
    #[arg(long = "trace", value_name = "PATH")]
    pub traces: Vec<PathBuf>,
    /// Output directory (or file, for gen-trace).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for synthetic generation (replaces the spec's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Policy to run (repeatable): heterocache, no_allocation, no_retrieval,
    /// static_topk, sink_window, full_oracle.
    #[arg(long = "policy", value_name = "NAME")]
    pub policies: Vec<String>,
    /// Stability threshold in [0,1] (default 0.5).
    #[arg(long)]
    pub tau_stable: Option<f64>,
    /// Similarity threshold in [0,1] (default 0.5).
    #[arg(long)]
    pub tau_sim: Option<f64>,
    /// Drift threshold in [0,1] (default: the stability threshold).
    #[arg(long)]
    pub tau_drift: Option<f64>,
    /// Budget as a fraction of the full cache, in (0,1] (default 0.5).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Drift window W in decode steps.
    #[arg(long)]
    pub window: Option<usize>,
    /// Smoothing term in the inverse-stability weights.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Smallest cache length any compressed head receives.
    #[arg(long)]
    pub min_length: Option<usize>,
    /// Top-k set size for profiling (default min(1000, ceil(L/10))).
    #[arg(long)]
    pub profiling_topk: Option<usize>,
    /// Odd pooling kernel for dense weights (0 disables).
    #[arg(long)]
    pub pool_kernel: Option<usize>,
}

impl RunConfig {
    /// Reads `--config` (if any) and applies flag overrides.
    pub fn load(flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {}", path.display(), e))
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {}", path.display(), e)))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.traces.iter_mut().for_each(resolve);
        cfg.calibration_traces.iter_mut().for_each(resolve);
        if let Some(out) = cfg.output_dir.as_mut() {
            resolve(out);
        }
        Ok(cfg)
    }

    fn apply(&mut self, f: &Overrides) {
        if !f.traces.is_empty() {
            self.traces = f.traces.clone();
        }
        if !f.policies.is_empty() {
            self.policies = f.policies.clone();
        }
        if f.out.is_some() {
            self.output_dir = f.out.clone();
        }
        if f.seed.is_some() {
            self.seed = f.seed;
        }
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = f.$field {
                    self.$field = v;
                }
            )*};
        }
        take!(
            tau_stable,
            tau_sim,
            rho,
            window,
            epsilon,
            min_length,
            pool_kernel
        );
        if f.tau_drift.is_some() {
            self.tau_drift = f.tau_drift;
        }
        if f.profiling_topk.is_some() {
            self.profiling_topk = f.profiling_topk;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.profile_config().validate()?;
        self.budget_config().validate()?;
        self.engine_config().validate()?;
        for p in self.traces.iter().chain(&self.calibration_traces) {
            if !p.is_file() {
                return Err(CliError::Config(format!(
                    "trace {} does not exist",
                    p.display()
                )));
            }
        }
        for name in &self.policies {
            if !DEFAULT_POLICIES.contains(&name.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown policy '{}' (expected one of {})",
                    name,
                    DEFAULT_POLICIES.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn profile_config(&self) -> ProfileConfig {
        ProfileConfig {
            tau_stable: self.tau_stable,
            tau_sim: self.tau_sim,
            profiling_topk: self.profiling_topk,
            pool_kernel: self.pool_kernel,
            gqa_group_size: self.gqa_group_size,
            adjacency: match self.adjacency_step {
                Some(step) => AdjacencyMode::SingleStep(step),
                None => AdjacencyMode::MedianOverSteps,
            },
        }
    }

    pub fn budget_config(&self) -> BudgetConfig {
        BudgetConfig {
            rho: self.rho,
            epsilon: self.epsilon,
            rounding: self.rounding,
            min_length: self.min_length,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            tau_drift: self.tau_drift.unwrap_or(self.tau_stable),
            window: self.window,
            transfer_bandwidth: self.transfer_bandwidth,
            update_delay_steps: self.update_delay_steps,
            policy_variant: PolicyVariant::Heterocache,
            cadence: self.cadence,
            protection: Protection {
                sink_tokens: self.sink_tokens,
                recency_window: self.recency_window,
            },
        }
    }

    pub fn policy_names(&self) -> Vec<String> {
        if self.policies.is_empty() {
            DEFAULT_POLICIES.iter().map(|s| s.to_string()).collect()
        } else {
            self.policies.clone()
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(
            (c.tau_stable, c.tau_sim, c.rho, c.window),
            (0.5, 0.5, 0.5, 8)
        );
        assert_eq!(c.engine_config().tau_drift, 0.5);
        assert_eq!(c.policy_names().len(), 6);
        c.validate().unwrap();
    }

    #[test]
    fn drift_threshold_follows_stability_threshold() {
        let flags = Overrides {
            tau_stable: Some(0.7),
            ..Default::default()
        };
        let c = RunConfig::load(&flags).unwrap();
        assert_eq!(c.engine_config().tau_drift, 0.7);
        let flags = Overrides {
            tau_stable: Some(0.7),
            tau_drift: Some(0.2),
            ..Default::default()
        };
        assert_eq!(
            RunConfig::load(&flags).unwrap().engine_config().tau_drift,
            0.2
        );
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"rho": 0.3, "window": 4, "traces": ["a.hctr"]}"#).unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.traces, vec![dir.path().join("a.hctr")]);
        let flags = Overrides {
            config: Some(path),
            rho: Some(0.4),
            traces: vec![PathBuf::from("/nonexistent.hctr")],
            ..Default::default()
        };
        match RunConfig::load(&flags) {
            Err(CliError::Config(m)) => assert!(m.contains("nonexistent")),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        for flags in [
            Overrides {
                tau_sim: Some(1.01),
                ..Default::default()
            },
            Overrides {
                rho: Some(0.0),
                ..Default::default()
            },
            Overrides {
                window: Some(0),
                ..Default::default()
            },
            Overrides {
                policies: vec!["lru".into()],
                ..Default::default()
            },
        ] {
            assert!(
                matches!(RunConfig::load(&flags), Err(CliError::Config(_))),
                "{:?}",
                flags
            );
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"tau_stabel": 0.3}"#).unwrap();
        assert!(matches!(
            RunConfig::from_file(&path),
            Err(CliError::Config(_))
        ));
    }
}
