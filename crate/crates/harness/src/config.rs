//! Experiment configuration.
//!
//! A config is one JSON document. Missing fields take the defaults of the
//! experiment kind, so `{"kind": "E_sweep"}` is a complete config. Layering
//! order is: kind defaults, then the `--fast` profile, then the file, then
//! command-line flags.

use std::path::PathBuf;

use fedq_core::engine::SyncPeriod;
use fedq_core::schedule::StepsizeSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "single_run")]
    SingleRun,
    #[serde(rename = "stepsize_sweep")]
    StepsizeSweep,
    #[serde(rename = "E_sweep")]
    ESweep,
    #[serde(rename = "two_phase")]
    TwoPhase,
    #[serde(rename = "lower_bound_check")]
    LowerBoundCheck,
    #[serde(rename = "verify_all")]
    VerifyAll,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::SingleRun => "single_run",
            ExperimentKind::StepsizeSweep => "stepsize_sweep",
            ExperimentKind::ESweep => "E_sweep",
            ExperimentKind::TwoPhase => "two_phase",
            ExperimentKind::LowerBoundCheck => "lower_bound_check",
            ExperimentKind::VerifyAll => "verify_all",
        }
    }
}

/// Which environment family each repeat draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleSpec {
    /// Independent random mazes per agent.
    Maze {
        #[serde(default = "default_grid_side")]
        grid_side: usize,
        #[serde(default = "default_drift")]
        drift: f64,
        #[serde(default = "default_wall_density")]
        wall_density: f64,
    },
    /// One random maze copied to every agent.
    Homogeneous {
        #[serde(default = "default_grid_side")]
        grid_side: usize,
        #[serde(default = "default_drift")]
        drift: f64,
        #[serde(default = "default_wall_density")]
        wall_density: f64,
    },
    /// Two states, identity and swap kernels; uses `num_agents` and `gamma` from the config.
    LowerBound {
        #[serde(default = "default_lb_reward")]
        reward: [f64; 2],
    },
}

fn default_grid_side() -> usize {
    5
}

fn default_drift() -> f64 {
    0.1
}

fn default_wall_density() -> f64 {
    0.2
}

fn default_lb_reward() -> [f64; 2] {
    [1.0, 0.0]
}

impl EnsembleSpec {
    pub fn maze() -> Self {
        EnsembleSpec::Maze {
            grid_side: default_grid_side(),
            drift: default_drift(),
            wall_density: default_wall_density(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EnsembleSpec::Maze { .. } => "heterogeneous",
            EnsembleSpec::Homogeneous { .. } => "homogeneous",
            EnsembleSpec::LowerBound { .. } => "lower_bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub ensemble: EnsembleSpec,
    /// Also run the homogeneous replicate of each repeat's maze.
    pub homogeneous_control: bool,
    pub num_agents: usize,
    pub gamma: f64,
    pub horizon: usize,
    /// Synchronization periods; `0` means never synchronize.
    pub sync_periods: Vec<SyncPeriod>,
    pub schedules: Vec<StepsizeSchedule>,
    pub num_repeats: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Success probability of each Bernoulli reward entry.
    pub reward_p: f64,
    /// Smoothing window for phase-transition detection.
    pub window: usize,
    /// Two-phase tolerances as fractions of `‖Δ₀‖∞`.
    pub tolerances: Vec<f64>,
    /// Phase-1 constant stepsizes of the two-phase experiment.
    pub phase1_lambdas: Vec<f64>,
    /// Phase-2 schedule, also the single-phase baseline.
    pub phase2: StepsizeSchedule,
    /// High-probability level for the bound evaluations in the summary.
    pub delta: f64,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `kind`.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let constant = |lambda| StepsizeSchedule::Constant { lambda };
        let mut cfg = Self {
            kind,
            ensemble: EnsembleSpec::maze(),
            homogeneous_control: false,
            num_agents: 5,
            gamma: 0.99,
            horizon: 20_000,
            sync_periods: vec![SyncPeriod::Every(10)],
            schedules: vec![constant(0.1)],
            num_repeats: 5,
            seed: 0,
            output_dir: PathBuf::from("out"),
            reward_p: 0.05,
            window: 50,
            tolerances: vec![0.1, 0.05, 0.03, 0.01],
            phase1_lambdas: vec![0.9, 0.5, 0.2, 0.1, 0.05],
            phase2: StepsizeSchedule::Poly { alpha: 0.5 },
            delta: 0.1,
        };
        match kind {
            ExperimentKind::SingleRun | ExperimentKind::TwoPhase | ExperimentKind::VerifyAll => {}
            ExperimentKind::StepsizeSweep => {
                cfg.schedules = [0.9, 0.5, 0.2, 0.1, 0.05].into_iter().map(constant).collect();
            }
            ExperimentKind::ESweep => {
                cfg.sync_periods = [1, 10, 20, 40, 0].into_iter().map(SyncPeriod::from).collect();
            }
            ExperimentKind::LowerBoundCheck => {
                cfg.ensemble = EnsembleSpec::LowerBound {
                    reward: default_lb_reward(),
                };
                cfg.num_agents = 2;
                cfg.gamma = 0.5;
                cfg.horizon = 1024;
                cfg.sync_periods = [1, 2, 4, 8].into_iter().map(SyncPeriod::Every).collect();
                cfg.schedules = [0.01, 0.05, 0.1, 0.3, 0.6].into_iter().map(constant).collect();
                cfg.num_repeats = 1;
            }
        }
        cfg
    }

    /// CI profile: `T = 2000`, 3 repeats, `γ = 0.9`. The lower-bound check is
    /// already cheap and its stepsize grid depends on `γ`, so it is left alone.
    pub fn apply_fast(&mut self) {
        if self.kind == ExperimentKind::LowerBoundCheck {
            return;
        }
        self.horizon = 2000;
        self.num_repeats = 3;
        self.gamma = 0.9;
    }

    /// Layers a JSON document over `self`.
    pub fn overlay(&self, doc: &serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(fields) = doc else {
            return Err(HarnessError::Config("config must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(self)?;
        let target = merged.as_object_mut().expect("config serializes to an object");
        for (key, value) in fields {
            if key == "kind" {
                let kind: ExperimentKind = serde_json::from_value(value.clone())?;
                if kind != self.kind {
                    return Err(HarnessError::Config(format!(
                        "config kind {} does not match the command ({})",
                        kind.as_str(),
                        self.kind.as_str()
                    )));
                }
            }
            target.insert(key.clone(), value.clone());
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.num_repeats == 0 {
            return bad("num_repeats must be at least 1".into());
        }
        if self.num_agents == 0 {
            return bad("num_agents must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.sync_periods.is_empty() {
            return bad("sync_periods is empty".into());
        }
        let needs_schedules = !matches!(self.kind, ExperimentKind::TwoPhase | ExperimentKind::VerifyAll);
        if needs_schedules && self.schedules.is_empty() {
            return bad("schedules is empty".into());
        }
        for s in self.schedules.iter().chain(std::iter::once(&self.phase2)) {
            if self.horizon > 0 {
                for t in [0, self.horizon - 1] {
                    s.stepsize(t, self.horizon, self.num_agents, self.gamma)
                        .map_err(HarnessError::Core)?;
                }
            }
        }
        if self.kind == ExperimentKind::TwoPhase {
            if self.phase1_lambdas.is_empty() {
                return bad("phase1_lambdas is empty".into());
            }
            if let Some(l) = self.phase1_lambdas.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
                return bad(format!("phase-1 stepsize {l} outside (0, 1]"));
            }
        }
        if self.tolerances.iter().any(|t| !(*t > 0.0)) {
            return bad("tolerances must be positive".into());
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.reward_p) {
            return bad(format!("reward_p {} outside [0, 1]", self.reward_p));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        doc.as_object_mut().unwrap().remove("output_dir");
        let digest = Sha256::digest(doc.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
