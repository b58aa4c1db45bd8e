//! Stepsize schedules and the finite-time upper-bound evaluators.
//!
//! Logarithms are natural throughout. The bound evaluators are diagnostics:
//! they report the bound and refuse parameters outside its hypotheses, but
//! nothing in the simulator is clamped to them.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

fn default_phase2() -> Box<StepsizeSchedule> {
    Box::new(StepsizeSchedule::Poly { alpha: 0.5 })
}

/// A rule producing `λ_t` from the iteration, horizon `T`, agent count `K`
/// and discount `γ`.
///
/// JSON form: `{"kind":"constant","lambda":0.1}`, `{"kind":"poly","alpha":0.5}`,
/// `{"kind":"corollary"}`, or
/// `{"kind":"two_phase","lambda1":0.05,"t0":5550,"phase2":{"kind":"poly","alpha":0.5}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepsizeSchedule {
    Constant {
        lambda: f64,
    },
    /// `λ = 1/T^α`, constant over the run.
    Poly {
        alpha: f64,
    },
    /// `λ = 4·log²(TK)/((1−γ)T)`, clamped to at most 1.
    Corollary,
    /// `lambda1` for `t < t0`, then `phase2`.
    TwoPhase {
        lambda1: f64,
        t0: usize,
        #[serde(default = "default_phase2")]
        phase2: Box<StepsizeSchedule>,
    },
}

impl StepsizeSchedule {
    pub fn stepsize(&self, t: usize, horizon: usize, num_agents: usize, gamma: f64) -> Result<f64> {
        if t >= horizon {
            return config(format!("iteration {t} is not below the horizon {horizon}"));
        }
        let lambda = match self {
            StepsizeSchedule::Constant { lambda } => *lambda,
            StepsizeSchedule::Poly { alpha } => (horizon as f64).powf(-alpha),
            StepsizeSchedule::Corollary => corollary_stepsize(horizon, num_agents, gamma).min(1.0),
            StepsizeSchedule::TwoPhase { lambda1, t0, phase2 } => {
                if t < *t0 {
                    *lambda1
                } else {
                    return phase2.stepsize(t, horizon, num_agents, gamma);
                }
            }
        };
        if !(lambda > 0.0 && lambda <= 1.0) {
            return config(format!("{} yields stepsize {lambda} outside (0, 1]", self.label()));
        }
        Ok(lambda)
    }

    /// The single stepsize used at every iteration, if the schedule is time-invariant.
    pub fn constant_value(&self, horizon: usize, num_agents: usize, gamma: f64) -> Option<f64> {
        match self {
            StepsizeSchedule::TwoPhase { lambda1, t0, phase2 } => {
                if *t0 == 0 {
                    return phase2.constant_value(horizon, num_agents, gamma);
                }
                if *t0 >= horizon {
                    return Some(*lambda1);
                }
                let later = phase2.constant_value(horizon, num_agents, gamma)?;
                (later == *lambda1).then_some(later)
            }
            _ if horizon == 0 => None,
            _ => self.stepsize(0, horizon, num_agents, gamma).ok(),
        }
    }

    /// Short human-readable name, used for curve labels and file names.
    pub fn label(&self) -> String {
        match self {
            StepsizeSchedule::Constant { lambda } => format!("const_{lambda}"),
            StepsizeSchedule::Poly { alpha } => format!("poly_{alpha}"),
            StepsizeSchedule::Corollary => "corollary".to_string(),
            StepsizeSchedule::TwoPhase { lambda1, t0, phase2 } => {
                format!("two_phase_{lambda1}_t{t0}_{}", phase2.label())
            }
        }
    }
}

/// Free-function form of [`StepsizeSchedule::stepsize`].
pub fn stepsize(
    schedule: &StepsizeSchedule,
    t: usize,
    horizon: usize,
    num_agents: usize,
    gamma: f64,
) -> Result<f64> {
    schedule.stepsize(t, horizon, num_agents, gamma)
}

/// Unclamped `4·log²(TK)/((1−γ)T)`.
pub fn corollary_stepsize(horizon: usize, num_agents: usize, gamma: f64) -> f64 {
    let tk = (horizon * num_agents) as f64;
    4.0 * tk.ln().powi(2) / ((1.0 - gamma) * horizon as f64)
}

/// Inputs shared by both bound evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub gamma: f64,
    pub lambda: f64,
    pub sync_period: usize,
    pub num_agents: usize,
    pub horizon: usize,
    pub kappa: f64,
    pub delta: f64,
    pub num_states: usize,
    pub num_actions: usize,
}

/// A bound split into its displayed terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub terms: Vec<f64>,
    pub total: f64,
}

impl BoundValue {
    fn from_terms(terms: Vec<f64>) -> Self {
        let total = terms.iter().sum();
        Self { terms, total }
    }
}

fn precondition<T>(msg: String) -> Result<T> {
    Err(Error::Precondition(msg))
}

fn check_common(p: &BoundParams) -> Result<()> {
    if !(0.0..1.0).contains(&p.gamma) {
        return precondition(format!("gamma {} outside [0, 1)", p.gamma));
    }
    if !(p.delta > 0.0 && p.delta < 1.0 / 3.0) {
        return precondition(format!("delta {} outside (0, 1/3)", p.delta));
    }
    if p.sync_period == 0 || p.num_agents == 0 || p.horizon == 0 {
        return precondition("E, K and T must be positive".into());
    }
    if p.num_states == 0 || p.num_actions == 0 {
        return precondition("state and action counts must be positive".into());
    }
    if p.kappa < 0.0 {
        return precondition(format!("kappa {} is negative", p.kappa));
    }
    Ok(())
}

/// High-probability bound on `‖Δ_T‖∞` for a constant stepsize, as four terms:
/// optimization, heterogeneity, and two sampling-noise terms.
pub fn theorem1_bound(p: &BoundParams) -> Result<BoundValue> {
    check_common(p)?;
    let BoundParams {
        gamma: g,
        lambda: l,
        kappa,
        delta,
        ..
    } = *p;
    if !(l > 0.0 && l <= 1.0) {
        return precondition(format!("lambda {l} outside (0, 1]"));
    }
    let e1 = (p.sync_period - 1) as f64;
    if l > 1.0 / p.sync_period as f64 {
        return precondition(format!("lambda {l} exceeds 1/E = {}", 1.0 / p.sync_period as f64));
    }
    if g > 0.0 && e1 > (1.0 - g) / (4.0 * g * l) {
        return precondition(format!(
            "E - 1 = {e1} exceeds (1 - gamma)/(4 gamma lambda) = {}",
            (1.0 - g) / (4.0 * g * l)
        ));
    }
    let t = p.horizon as f64;
    let k = p.num_agents as f64;
    let sa = (p.num_states * p.num_actions) as f64;
    let log_term = (sa * k * t / delta).ln();
    let c = (1.0 - g).powi(2);

    let optimization = 4.0 / c * (-0.5 * ((1.0 - g) * l * t).sqrt()).exp();
    let heterogeneity = 2.0 * g * g / c * (6.0 * l * l * e1 * e1 + l * e1) * kappa;
    let local_noise = (12.0 * g * g * l / c * e1.sqrt() + 2.0 * g * g * l.sqrt() / c)
        * (l * e1 * log_term).sqrt();
    let averaged_noise = 2.0 * g / c * (l * log_term / k).sqrt();
    Ok(BoundValue::from_terms(vec![
        optimization,
        heterogeneity,
        local_noise,
        averaged_noise,
    ]))
}

/// Three-term bound under the stepsize `4·log²(TK)/((1−γ)T)`; `p.lambda` is ignored.
pub fn corollary1_bound(p: &BoundParams) -> Result<BoundValue> {
    check_common(p)?;
    let g = p.gamma;
    let l = corollary_stepsize(p.horizon, p.num_agents, g);
    if !(l > 0.0) {
        return precondition(format!("stepsize {l} is not positive (TK must exceed 1)"));
    }
    if p.horizon < p.sync_period {
        return precondition(format!("T = {} is below E = {}", p.horizon, p.sync_period));
    }
    let e1 = (p.sync_period - 1) as f64;
    let cap = (g / (1.0 - g)).min(1.0 / p.num_agents as f64) / l;
    if e1 > cap {
        return precondition(format!(
            "E - 1 = {e1} exceeds min(gamma/(1-gamma), 1/K)/lambda = {cap}"
        ));
    }
    let t = p.horizon as f64;
    let tk = t * p.num_agents as f64;
    let sa = (p.num_states * p.num_actions) as f64;
    let c2 = (1.0 - g).powi(2);
    let c3 = (1.0 - g).powi(3);
    let optimization = 4.0 / (c2 * tk);
    let noise = 36.0 / c3 * tk.ln() / tk.sqrt() * (sa * tk / p.delta).ln().sqrt();
    let heterogeneity = 56.0 * tk.ln().powi(2) / c3 * e1 / t * p.kappa;
    Ok(BoundValue::from_terms(vec![optimization, noise, heterogeneity]))
}
