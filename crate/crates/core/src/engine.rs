//! Synchronous federated Q-learning.
//!
//! Each iteration every agent draws one successor per state–action pair
//! from its own kernel and applies the local update
//!
//! `Q_{t+½}^k(s,a) = (1−λ_t)·Q_t^k(s,a) + λ_t·(R(s,a) + γ·max_{a'} Q_t^k(s', a'))`.
//!
//! After iterations with `(t+1) mod E = 0` the local tables are replaced by
//! their mean. The error reported at every `t` is `‖Q* − Q̄_t‖∞` where `Q̄_t` is
//! the mean of the local tables, whether or not `t` is a sync round.

use std::io::{self, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::mdp::{greedy_value, optimal_q, Ensemble, QTable, DEFAULT_Q_TOLERANCE};
use crate::sampler::{fill_successors, RngStream, SampleDraw};
use crate::schedule::StepsizeSchedule;

/// Agents × pairs above which local steps run on the rayon pool.
const PARALLEL_MIN_WORK: usize = 4096;

/// Max sweeps allowed when computing `Q*` for a run.
const Q_STAR_MAX_SWEEPS: usize = 10_000_000;

/// Slack on the coarse bounds, relative to `1/(1−γ)`, for floating-point rounding.
pub const COARSE_BOUND_SLACK: f64 = 1e-12;

/// Largest accepted error-iteration residual on a verified run.
pub const IDENTITY_RESIDUAL_TOL: f64 = 1e-9;

/// How often local tables are averaged. `Never` is written as `0` in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "usize", into = "usize")]
pub enum SyncPeriod {
    Every(usize),
    Never,
}

impl From<usize> for SyncPeriod {
    fn from(e: usize) -> Self {
        if e == 0 {
            SyncPeriod::Never
        } else {
            SyncPeriod::Every(e)
        }
    }
}

impl From<SyncPeriod> for usize {
    fn from(e: SyncPeriod) -> usize {
        match e {
            SyncPeriod::Every(e) => e,
            SyncPeriod::Never => 0,
        }
    }
}

impl SyncPeriod {
    /// Whether averaging follows the local step of iteration `t`.
    pub fn syncs_after(self, t: usize) -> bool {
        match self {
            SyncPeriod::Every(e) => (t + 1) % e == 0,
            SyncPeriod::Never => false,
        }
    }

    pub fn label(self) -> String {
        match self {
            SyncPeriod::Every(e) => e.to_string(),
            SyncPeriod::Never => "inf".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sync_period: SyncPeriod,
    pub horizon: usize,
    pub schedule: StepsizeSchedule,
    pub seed: u64,
    /// Common starting table; all zeros when `None`.
    pub q_init: Option<QTable>,
    pub record_locals: bool,
    /// Checks the error-iteration identity each step and, with `record_locals`,
    /// the coarse bounds at the end; a violation fails the run.
    pub verify_identities: bool,
    pub run_id: String,
}

impl RunConfig {
    pub fn new(sync_period: SyncPeriod, horizon: usize, schedule: StepsizeSchedule, seed: u64) -> Self {
        Self {
            sync_period,
            horizon,
            schedule,
            seed,
            q_init: None,
            record_locals: false,
            verify_identities: false,
            run_id: String::from("run"),
        }
    }
}

/// Extremes of one agent's table at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    pub min_q: f64,
    pub min_pair: usize,
    pub max_q: f64,
    pub max_pair: usize,
    /// `‖Q* − Q_t^k‖∞`.
    pub delta_linf: f64,
    pub delta_pair: usize,
    /// `‖V* − V_t^k‖∞`.
    pub value_gap_linf: f64,
}

impl LocalStats {
    fn measure(q: &[f64], q_star: &[f64], v_star: &[f64], num_actions: usize) -> Self {
        let mut s = LocalStats {
            min_q: f64::INFINITY,
            min_pair: 0,
            max_q: f64::NEG_INFINITY,
            max_pair: 0,
            delta_linf: 0.0,
            delta_pair: 0,
            value_gap_linf: 0.0,
        };
        for (i, (&v, &t)) in q.iter().zip(q_star).enumerate() {
            if v < s.min_q {
                s.min_q = v;
                s.min_pair = i;
            }
            if v > s.max_q {
                s.max_q = v;
                s.max_pair = i;
            }
            if (t - v).abs() > s.delta_linf {
                s.delta_linf = (t - v).abs();
                s.delta_pair = i;
            }
        }
        for (state, row) in q.chunks_exact(num_actions).enumerate() {
            let v = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            s.value_gap_linf = s.value_gap_linf.max((v_star[state] - v).abs());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub run_id: String,
    pub seed: u64,
    pub horizon: usize,
    pub sync_period: SyncPeriod,
    pub num_agents: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub value_ceiling: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    /// `‖Δ_t‖∞` for `t = 0..=T`.
    pub errors: Vec<f64>,
    /// `λ_t` for `t = 0..T`.
    pub lambdas: Vec<f64>,
    /// `synced[t]`: whether `Q_t` came out of an averaging round.
    pub synced: Vec<bool>,
    /// Per iteration, per agent; present when `record_locals` is set.
    pub local_stats: Option<Vec<Vec<LocalStats>>>,
    /// Error-iteration residual after each step; present when `verify_identities` is set.
    pub identity_residuals: Option<Vec<f64>>,
    /// `Q̄_T = (1/K)·Σ_k Q_T^k`.
    pub final_q: QTable,
    pub meta: TraceMeta,
}

impl RunTrace {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("trace holds t = 0")
    }

    pub fn max_identity_residual(&self) -> Option<f64> {
        self.identity_residuals
            .as_ref()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
    }

    /// CSV with header `t,linf_error,lambda,synced,run_id,seed`; the lambda cell of
    /// the last row is empty because no step starts at `T`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,linf_error,lambda,synced,run_id,seed")?;
        for (t, err) in self.errors.iter().enumerate() {
            let lambda = self
                .lambdas
                .get(t)
                .map(|l| format_float(*l))
                .unwrap_or_default();
            writeln!(
                out,
                "{t},{},{lambda},{},{},{}",
                format_float(*err),
                u8::from(self.synced[t]),
                self.meta.run_id,
                self.meta.seed
            )?;
        }
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Entrywise mean of equally shaped tables, summed in index order.
pub fn sync_average(tables: &[QTable]) -> Result<QTable> {
    let Some(first) = tables.first() else {
        return config("cannot average zero tables");
    };
    if tables.iter().any(|t| !t.same_shape(first)) {
        return config("tables to average have different shapes");
    }
    let mut mean = vec![0.0; first.values().len()];
    for t in tables {
        for (m, v) in mean.iter_mut().zip(t.values()) {
            *m += v;
        }
    }
    let k = tables.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    QTable::from_vec(first.num_states(), first.num_actions(), mean)
}

fn check_stepsize(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return config(format!("stepsize {lambda} outside (0, 1]"));
    }
    Ok(())
}

/// One local update from a sampled draw.
pub fn local_step(q: &QTable, draw: &SampleDraw, lambda: f64, reward: &[f64], gamma: f64) -> Result<QTable> {
    check_stepsize(lambda)?;
    if q.num_states() != draw.num_states || q.num_actions() != draw.num_actions {
        return config("draw and table shapes differ");
    }
    if reward.len() != q.values().len() {
        return config("reward and table shapes differ");
    }
    let value = greedy_value(q);
    let mut next = vec![0.0; q.values().len()];
    update_into(q.values(), &value, &draw.successors, lambda, reward, gamma, &mut next);
    QTable::from_vec(q.num_states(), q.num_actions(), next)
}

fn update_into(
    q: &[f64],
    value: &[f64],
    successors: &[usize],
    lambda: f64,
    reward: &[f64],
    gamma: f64,
    out: &mut [f64],
) {
    for (((o, &qi), &s), &r) in out.iter_mut().zip(q).zip(successors).zip(reward) {
        *o = (1.0 - lambda) * qi + lambda * (r + gamma * value[s]);
    }
}

fn greedy_into(q: &[f64], num_actions: usize, out: &mut [f64]) {
    for (v, row) in out.iter_mut().zip(q.chunks_exact(num_actions)) {
        *v = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
}

/// Running evaluation of the three-term error decomposition
///
/// `Δ_{t+1} = (1−λ)^{t+1}Δ₀ + γλ Σ_i (1−λ)^{t−i} (1/K)Σ_k (P̄ − P̃_i^k)V*
///          + γλ Σ_i (1−λ)^{t−i} (1/K)Σ_k P̃_i^k (V* − V_i^k)`
///
/// for a constant stepsize. Feed it the draws and local values of every
/// iteration, then compare against the simulated `Q* − Q̄_{t+1}`.
#[derive(Debug, Clone)]
pub struct ErrorIterationCheck {
    lambda: f64,
    gamma: f64,
    q_star: Vec<f64>,
    v_star: Vec<f64>,
    expected_next_value: Vec<f64>,
    initial_error: Vec<f64>,
    decay: f64,
    sampling_term: Vec<f64>,
    drift_term: Vec<f64>,
    scale: f64,
}

impl ErrorIterationCheck {
    pub fn new(ensemble: &Ensemble, q_star: &QTable, q_init: &QTable, lambda: f64) -> Result<Self> {
        check_stepsize(lambda)?;
        let v_star = greedy_value(q_star);
        let expected_next_value = ensemble.global().expect(&v_star);
        let initial_error = q_star.sub(q_init).into_values();
        let scale = initial_error.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let n = initial_error.len();
        Ok(Self {
            lambda,
            gamma: ensemble.discount(),
            q_star: q_star.values().to_vec(),
            v_star,
            expected_next_value,
            initial_error,
            decay: 1.0,
            sampling_term: vec![0.0; n],
            drift_term: vec![0.0; n],
            scale,
        })
    }

    /// Accounts for iteration `t`: `successors[k]` and `values[k] = V_t^k` per agent.
    pub fn observe(&mut self, successors: &[&[usize]], values: &[&[f64]]) {
        let k = successors.len() as f64;
        let keep = 1.0 - self.lambda;
        let weight = self.gamma * self.lambda;
        for i in 0..self.q_star.len() {
            let mut sampled = 0.0;
            let mut gap = 0.0;
            for (succ, value) in successors.iter().zip(values) {
                let s = succ[i];
                sampled += self.v_star[s];
                gap += self.v_star[s] - value[s];
            }
            let sampling = self.expected_next_value[i] - sampled / k;
            self.sampling_term[i] = keep * self.sampling_term[i] + weight * sampling;
            self.drift_term[i] = keep * self.drift_term[i] + weight * gap / k;
        }
        self.decay *= keep;
    }

    /// Right-hand side after the iterations observed so far.
    pub fn predicted_error(&self) -> Vec<f64> {
        self.initial_error
            .iter()
            .zip(&self.sampling_term)
            .zip(&self.drift_term)
            .map(|((d0, a), b)| self.decay * d0 + a + b)
            .collect()
    }

    /// `‖(Q* − Q̄) − rhs‖∞ / max(1, ‖Δ₀‖∞)`.
    pub fn residual(&self, q_bar: &[f64]) -> f64 {
        let predicted = self.predicted_error();
        let worst = self
            .q_star
            .iter()
            .zip(q_bar)
            .zip(&predicted)
            .fold(0.0f64, |m, ((qs, qb), p)| m.max((qs - qb - p).abs()));
        worst / self.scale
    }
}

/// Summary of a passed coarse-bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseBoundReport {
    pub checked: usize,
    pub ceiling: f64,
    pub max_q: f64,
    pub min_q: f64,
    pub max_delta: f64,
    pub max_value_gap: f64,
}

/// Verifies `0 ≤ Q_t^k ≤ 1/(1−γ)`, `‖Δ_t^k‖∞ ≤ 1/(1−γ)` and
/// `‖V* − V_t^k‖∞ ≤ 1/(1−γ)` at every recorded `(t, k)`.
pub fn verify_coarse_bounds(trace: &RunTrace) -> Result<CoarseBoundReport> {
    let Some(stats) = &trace.local_stats else {
        return config("trace has no local statistics; enable record_locals");
    };
    let ceiling = trace.meta.value_ceiling;
    let slack = COARSE_BOUND_SLACK * ceiling;
    let actions = trace.meta.num_actions;
    let mut report = CoarseBoundReport {
        checked: 0,
        ceiling,
        max_q: f64::NEG_INFINITY,
        min_q: f64::INFINITY,
        max_delta: 0.0,
        max_value_gap: 0.0,
    };
    let at = |t: usize, k: usize, pair: usize| {
        format!("t={t}, k={k}, s={}, a={}", pair / actions, pair % actions)
    };
    for (t, row) in stats.iter().enumerate() {
        for (k, s) in row.iter().enumerate() {
            if s.min_q < -slack {
                return Err(Error::Violation(format!(
                    "Q below 0 ({}) at {}",
                    s.min_q,
                    at(t, k, s.min_pair)
                )));
            }
            if s.max_q > ceiling + slack {
                return Err(Error::Violation(format!(
                    "Q above 1/(1-gamma) ({} > {ceiling}) at {}",
                    s.max_q,
                    at(t, k, s.max_pair)
                )));
            }
            if s.delta_linf > ceiling + slack {
                return Err(Error::Violation(format!(
                    "local error {} above {ceiling} at {}",
                    s.delta_linf,
                    at(t, k, s.delta_pair)
                )));
            }
            if s.value_gap_linf > ceiling + slack {
                return Err(Error::Violation(format!(
                    "value gap {} above {ceiling} at t={t}, k={k}",
                    s.value_gap_linf
                )));
            }
            report.checked += 1;
            report.max_q = report.max_q.max(s.max_q);
            report.min_q = report.min_q.min(s.min_q);
            report.max_delta = report.max_delta.max(s.delta_linf);
            report.max_value_gap = report.max_value_gap.max(s.value_gap_linf);
        }
    }
    Ok(report)
}

/// Centered moving average with the window clipped at both ends.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let n = series.len();
    let w = window.max(1);
    let before = (w - 1) / 2;
    let after = w / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for x in series {
        prefix.push(prefix.last().unwrap() + x);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect()
}

/// Iteration at which the error switches from decay to the heterogeneity
/// plateau: the first argmin of the smoothed series, or the last index when the
/// raw series never increases.
pub fn detect_phase_transition(errors: &[f64], window: usize) -> usize {
    if errors.is_empty() {
        return 0;
    }
    let last = errors.len() - 1;
    if errors.windows(2).all(|w| w[1] <= w[0]) {
        return last;
    }
    let smooth = moving_average(errors, window);
    smooth
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0
}

struct AgentState {
    q: Vec<f64>,
    next: Vec<f64>,
    value: Vec<f64>,
    successors: Vec<usize>,
}

/// Runs the federated algorithm on one ensemble against a fixed target `Q*`.
#[derive(Debug, Clone)]
pub struct FedQ<'a> {
    ensemble: &'a Ensemble,
    q_star: QTable,
    v_star: Vec<f64>,
}

impl<'a> FedQ<'a> {
    /// Computes `Q*` of the global MDP by value iteration.
    pub fn new(ensemble: &'a Ensemble) -> Result<Self> {
        let q_star = optimal_q(ensemble.global(), DEFAULT_Q_TOLERANCE, Q_STAR_MAX_SWEEPS)?;
        Self::with_q_star(ensemble, q_star)
    }

    /// Uses a caller-supplied `Q*` (e.g. a closed form).
    pub fn with_q_star(ensemble: &'a Ensemble, q_star: QTable) -> Result<Self> {
        if q_star.num_states() != ensemble.num_states() || q_star.num_actions() != ensemble.num_actions() {
            return config("Q* shape does not match the ensemble");
        }
        let v_star = greedy_value(&q_star);
        Ok(Self {
            ensemble,
            q_star,
            v_star,
        })
    }

    pub fn q_star(&self) -> &QTable {
        &self.q_star
    }

    pub fn ensemble(&self) -> &Ensemble {
        self.ensemble
    }

    pub fn run(&self, cfg: &RunConfig) -> Result<RunTrace> {
        let started = Instant::now();
        let ens = self.ensemble;
        let (states, actions) = (ens.num_states(), ens.num_actions());
        let pairs = ens.num_pairs();
        let agents = ens.num_agents();
        let gamma = ens.discount();
        let ceiling = 1.0 / (1.0 - gamma);
        let reward = ens.reward();

        if let SyncPeriod::Every(0) = cfg.sync_period {
            return config("synchronization period must be at least 1");
        }
        if let StepsizeSchedule::Constant { lambda } = cfg.schedule {
            check_stepsize(lambda)?;
        }
        let q_init = match &cfg.q_init {
            Some(q) => {
                if q.num_states() != states || q.num_actions() != actions {
                    return config("q_init shape does not match the ensemble");
                }
                if let Some(v) = q.values().iter().find(|v| !(0.0..=ceiling).contains(*v)) {
                    return config(format!("q_init entry {v} outside [0, 1/(1-gamma)] = [0, {ceiling}]"));
                }
                q.clone()
            }
            None => QTable::zeros(states, actions),
        };
        let lambdas = (0..cfg.horizon)
            .map(|t| cfg.schedule.stepsize(t, cfg.horizon, agents, gamma))
            .collect::<Result<Vec<_>>>()?;
        let mut checker = if cfg.verify_identities {
            let Some(lambda) = cfg.schedule.constant_value(cfg.horizon, agents, gamma).or(
                // A zero-length run has nothing to verify but is still valid.
                (cfg.horizon == 0).then_some(1.0),
            ) else {
                return Err(Error::UnsupportedIdentity(format!(
                    "the error-iteration identity needs a constant stepsize, got {}",
                    cfg.schedule.label()
                )));
            };
            Some(ErrorIterationCheck::new(ens, &self.q_star, &q_init, lambda)?)
        } else {
            None
        };

        let rng = RngStream::new(cfg.seed);
        let mut locals: Vec<AgentState> = (0..agents)
            .map(|_| AgentState {
                q: q_init.values().to_vec(),
                next: vec![0.0; pairs],
                value: vec![0.0; states],
                successors: vec![0; pairs],
            })
            .collect();
        let q_star = self.q_star.values();
        let mut q_bar = q_init.values().to_vec();
        let mut errors = Vec::with_capacity(cfg.horizon + 1);
        let mut synced = Vec::with_capacity(cfg.horizon + 1);
        errors.push(linf_gap(q_star, &q_bar));
        synced.push(false);
        let mut local_stats = cfg.record_locals.then(|| {
            vec![locals
                .iter()
                .map(|a| LocalStats::measure(&a.q, q_star, &self.v_star, actions))
                .collect::<Vec<_>>()]
        });
        let mut residuals = checker.as_ref().map(|_| Vec::with_capacity(cfg.horizon));
        let parallel = agents > 1 && agents * pairs >= PARALLEL_MIN_WORK;

        for (t, &lambda) in lambdas.iter().enumerate() {
            let step = |(k, a): (usize, &mut AgentState)| {
                greedy_into(&a.q, actions, &mut a.value);
                fill_successors(ens.agent(k), k, t, &rng, &mut a.successors);
                update_into(&a.q, &a.value, &a.successors, lambda, reward, gamma, &mut a.next);
            };
            if parallel {
                locals.par_iter_mut().enumerate().for_each(step);
            } else {
                locals.iter_mut().enumerate().for_each(step);
            }
            if let Some(c) = checker.as_mut() {
                let succ: Vec<&[usize]> = locals.iter().map(|a| a.successors.as_slice()).collect();
                let vals: Vec<&[f64]> = locals.iter().map(|a| a.value.as_slice()).collect();
                c.observe(&succ, &vals);
            }
            for a in locals.iter_mut() {
                std::mem::swap(&mut a.q, &mut a.next);
            }
            mean_into(&locals, &mut q_bar);
            let sync = cfg.sync_period.syncs_after(t);
            if sync {
                for a in locals.iter_mut() {
                    a.q.copy_from_slice(&q_bar);
                }
            }
            synced.push(sync);
            errors.push(linf_gap(q_star, &q_bar));
            if let (Some(c), Some(r)) = (checker.as_ref(), residuals.as_mut()) {
                let residual = c.residual(&q_bar);
                if !(residual <= IDENTITY_RESIDUAL_TOL) {
                    return Err(Error::Violation(format!(
                        "error-iteration residual {residual:e} exceeds {IDENTITY_RESIDUAL_TOL:e} after t={t} in {}",
                        cfg.run_id
                    )));
                }
                r.push(residual);
            }
            if let Some(stats) = local_stats.as_mut() {
                stats.push(
                    locals
                        .iter()
                        .map(|a| LocalStats::measure(&a.q, q_star, &self.v_star, actions))
                        .collect(),
                );
            }
        }

        let trace = RunTrace {
            errors,
            lambdas,
            synced,
            local_stats,
            identity_residuals: residuals,
            final_q: QTable::from_vec(states, actions, q_bar)?,
            meta: TraceMeta {
                run_id: cfg.run_id.clone(),
                seed: cfg.seed,
                horizon: cfg.horizon,
                sync_period: cfg.sync_period,
                num_agents: agents,
                num_states: states,
                num_actions: actions,
                value_ceiling: ceiling,
                wall_time_secs: started.elapsed().as_secs_f64(),
            },
        };
        if cfg.verify_identities && cfg.record_locals {
            verify_coarse_bounds(&trace)?;
        }
        Ok(trace)
    }
}

fn mean_into(locals: &[AgentState], out: &mut [f64]) {
    out.fill(0.0);
    for a in locals {
        for (o, v) in out.iter_mut().zip(&a.q) {
            *o += v;
        }
    }
    let k = locals.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
}

fn linf_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
