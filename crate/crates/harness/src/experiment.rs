//! Experiment orchestration: builds per-repeat environments, runs every curve,
//! aggregates, and writes the artifact bundle.

use std::fs;
use std::path::{Path, PathBuf};

use fedq_core::engine::{detect_phase_transition, verify_coarse_bounds, FedQ, RunConfig, RunTrace, SyncPeriod};
use fedq_core::envgen::{
    make_bernoulli_reward, make_homogeneous_ensemble, make_lower_bound_ensemble, make_maze_ensemble, LowerBoundSpec,
    MazeSpec,
};
use fedq_core::lambert::lambert_w_minus1;
use fedq_core::mdp::{Ensemble, QTable};
use fedq_core::sampler::derive_seed;
use fedq_core::schedule::{corollary1_bound, theorem1_bound, BoundParams, StepsizeSchedule};
use fedq_core::theory::{
    closed_form_delta, lower_bound_floor, max_stepsize, min_horizon, verify_kappa_properties, CheckRecord,
    TwoStateTarget, VerificationReport,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::aggregate::{first_hit, mean_std, AggregateSeries};
use crate::config::{EnsembleSpec, ExperimentConfig, ExperimentKind};
use crate::error::{HarnessError, Result};
use crate::svg::{emit_svg, ChartStyle, Series};

/// Largest accepted gap between simulation and the closed form.
pub const ORACLE_TOL: f64 = 1e-10;

/// Seeds of one repeat, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RepeatSeeds {
    pub index: usize,
    pub seed: u64,
    pub maze: u64,
    pub reward: u64,
    pub sampler: u64,
}

impl RepeatSeeds {
    pub fn new(master: u64, index: usize) -> Self {
        let seed = derive_seed(master, &format!("repeat/{index}"));
        Self {
            index,
            seed,
            maze: derive_seed(seed, "maze"),
            reward: derive_seed(seed, "reward"),
            sampler: derive_seed(seed, "sampler"),
        }
    }
}

/// Environments of one repeat.
pub struct RepeatEnv {
    pub seeds: RepeatSeeds,
    pub primary: Ensemble,
    pub control: Option<Ensemble>,
}

fn maze_spec(spec: &EnsembleSpec, seed: u64) -> Option<MazeSpec> {
    match *spec {
        EnsembleSpec::Maze {
            grid_side,
            drift,
            wall_density,
        }
        | EnsembleSpec::Homogeneous {
            grid_side,
            drift,
            wall_density,
        } => Some(MazeSpec {
            grid_side,
            drift,
            wall_density,
            seed,
        }),
        EnsembleSpec::LowerBound { .. } => None,
    }
}

pub fn build_env(cfg: &ExperimentConfig, seeds: RepeatSeeds) -> Result<RepeatEnv> {
    let k = cfg.num_agents;
    if let EnsembleSpec::LowerBound { reward } = cfg.ensemble {
        let primary = make_lower_bound_ensemble(&LowerBoundSpec {
            num_agents: k,
            reward,
            gamma: cfg.gamma,
        })?;
        return Ok(RepeatEnv {
            seeds,
            primary,
            control: None,
        });
    }
    let spec = maze_spec(&cfg.ensemble, seeds.maze).expect("maze family");
    let reward = make_bernoulli_reward(seeds.reward, cfg.reward_p, spec.num_pairs())?;
    let homogeneous = make_homogeneous_ensemble(&spec, k, &reward, cfg.gamma)?;
    let (primary, control) = match cfg.ensemble {
        EnsembleSpec::Homogeneous { .. } => (homogeneous, None),
        _ => {
            let het = make_maze_ensemble(&spec, k, &reward, cfg.gamma)?;
            (het, cfg.homogeneous_control.then_some(homogeneous))
        }
    };
    Ok(RepeatEnv {
        seeds,
        primary,
        control,
    })
}

/// One line of a chart: the same settings run on every repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSpec {
    pub name: String,
    pub control: bool,
    pub sync_period: SyncPeriod,
    pub schedule: StepsizeSchedule,
}

pub struct CurveResult {
    pub spec: CurveSpec,
    pub traces: Vec<RunTrace>,
    pub aggregate: AggregateSeries,
}

/// Everything an experiment produced, before anything is written.
pub struct Outcome {
    pub config: ExperimentConfig,
    pub repeats: Vec<RepeatSeeds>,
    pub curves: Vec<CurveResult>,
    pub summary: Value,
    pub verification: Option<VerificationReport>,
}

impl Outcome {
    pub fn curve(&self, name: &str) -> Option<&CurveResult> {
        self.curves.iter().find(|c| c.spec.name == name)
    }
}

pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

fn curve_name(env: &str, e: SyncPeriod, schedule: &StepsizeSchedule) -> String {
    format!("{env} E={} {}", e.label(), schedule.label())
}

fn grid_curves(cfg: &ExperimentConfig) -> Vec<CurveSpec> {
    let mut curves = Vec::new();
    let (periods, schedules): (Vec<SyncPeriod>, Vec<StepsizeSchedule>) = match cfg.kind {
        ExperimentKind::SingleRun => (vec![cfg.sync_periods[0]], vec![cfg.schedules[0].clone()]),
        ExperimentKind::StepsizeSweep => (vec![cfg.sync_periods[0]], cfg.schedules.clone()),
        ExperimentKind::ESweep => (cfg.sync_periods.clone(), vec![cfg.schedules[0].clone()]),
        _ => unreachable!("not a grid experiment"),
    };
    let with_control = cfg.homogeneous_control && matches!(cfg.ensemble, EnsembleSpec::Maze { .. });
    for control in [false, true] {
        if control && !with_control {
            continue;
        }
        let env = if control { "homogeneous" } else { cfg.ensemble.label() };
        for &e in &periods {
            for s in &schedules {
                curves.push(CurveSpec {
                    name: curve_name(env, e, s),
                    control,
                    sync_period: e,
                    schedule: s.clone(),
                });
            }
        }
    }
    curves
}

fn run_one(
    engine: &FedQ<'_>,
    cfg: &ExperimentConfig,
    curve: &CurveSpec,
    seeds: RepeatSeeds,
    schedule: StepsizeSchedule,
) -> Result<RunTrace> {
    let mut rc = RunConfig::new(curve.sync_period, cfg.horizon, schedule, seeds.sampler);
    rc.run_id = format!("{}/r{}", slug(&curve.name), seeds.index);
    Ok(engine.run(&rc)?)
}

struct Engines<'a> {
    primary: FedQ<'a>,
    control: Option<FedQ<'a>>,
}

fn engines(envs: &[RepeatEnv]) -> Result<Vec<Engines<'_>>> {
    envs.par_iter()
        .map(|env| {
            Ok(Engines {
                primary: FedQ::new(&env.primary)?,
                control: env.control.as_ref().map(FedQ::new).transpose()?,
            })
        })
        .collect()
}

fn kappa_json(envs: &[RepeatEnv]) -> Value {
    let one = |e: &Ensemble| json!({"kappa_inf": e.kappa_inf(), "kappa_l1": e.kappa_l1()});
    Value::Array(
        envs.iter()
            .map(|env| {
                json!({
                    "repeat": env.seeds.index,
                    "primary": one(&env.primary),
                    "control": env.control.as_ref().map(one),
                })
            })
            .collect(),
    )
}

fn bound_json(r: fedq_core::Result<fedq_core::schedule::BoundValue>) -> Value {
    match r {
        Ok(v) => json!({"terms": v.terms, "total": v.total}),
        Err(e) => json!({"inapplicable": e.to_string()}),
    }
}

fn bounds_for(cfg: &ExperimentConfig, curve: &CurveSpec, ens: &Ensemble, kappa: f64) -> Value {
    let SyncPeriod::Every(e) = curve.sync_period else {
        return json!({"inapplicable": "never-synchronizing runs have no finite-time bound"});
    };
    let mut p = BoundParams {
        gamma: cfg.gamma,
        lambda: 0.0,
        sync_period: e,
        num_agents: cfg.num_agents,
        horizon: cfg.horizon,
        kappa,
        delta: cfg.delta,
        num_states: ens.num_states(),
        num_actions: ens.num_actions(),
    };
    let theorem = match curve.schedule.constant_value(cfg.horizon, cfg.num_agents, cfg.gamma) {
        Some(l) => {
            p.lambda = l;
            bound_json(theorem1_bound(&p))
        }
        None => json!({"inapplicable": "time-varying stepsize"}),
    };
    json!({"theorem1": theorem, "corollary1": bound_json(corollary1_bound(&p))})
}

fn curve_summary(c: &CurveResult) -> Value {
    let (pm, ps) = c.aggregate.plateau_mean_std();
    let (fm, fs) = mean_std(&c.aggregate.final_errors);
    json!({
        "name": c.spec.name,
        "file": format!("aggregate_{}.csv", slug(&c.spec.name)),
        "sync_period": c.spec.sync_period,
        "schedule": c.spec.schedule,
        "homogeneous_control": c.spec.control,
        "initial_errors": c.traces.iter().map(|t| t.errors[0]).collect::<Vec<_>>(),
        "final_errors": c.aggregate.final_errors,
        "final_mean": fm,
        "final_std": fs,
        "plateau_errors": c.aggregate.plateau_errors,
        "plateau_mean": pm,
        "plateau_std": ps,
        "t0": c.aggregate.t0,
        "smoothed_min_errors": c.aggregate.min_errors,
    })
}

fn aggregate_curves(cfg: &ExperimentConfig, specs: Vec<CurveSpec>, mut traces: Vec<Vec<RunTrace>>) -> Vec<CurveResult> {
    specs
        .into_iter()
        .zip(traces.drain(..))
        .map(|(spec, traces)| {
            let refs: Vec<&[f64]> = traces.iter().map(|t| t.errors.as_slice()).collect();
            let aggregate = AggregateSeries::from_traces(&spec.name, &refs, cfg.window);
            CurveResult {
                spec,
                traces,
                aggregate,
            }
        })
        .collect()
}

fn base_summary(cfg: &ExperimentConfig, repeats: &[RepeatSeeds]) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("kind".into(), json!(cfg.kind.as_str()));
    m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    m.insert("config_hash".into(), json!(cfg.hash()));
    m.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    m.insert("seeds".into(), json!({"master": cfg.seed, "repeats": repeats}));
    m
}

fn grid_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let repeats: Vec<RepeatSeeds> = (0..cfg.num_repeats).map(|i| RepeatSeeds::new(cfg.seed, i)).collect();
    let envs = repeats
        .par_iter()
        .map(|&s| build_env(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let engines = engines(&envs)?;
    let specs = grid_curves(cfg);
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|c| (0..envs.len()).map(move |r| (c, r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, r)| {
            let curve = &specs[c];
            let engine = if curve.control {
                engines[r].control.as_ref().expect("control ensemble built")
            } else {
                &engines[r].primary
            };
            run_one(engine, cfg, curve, envs[r].seeds, curve.schedule.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_curve: Vec<Vec<RunTrace>> = (0..specs.len()).map(|_| Vec::new()).collect();
    for ((c, _), trace) in jobs.iter().zip(results) {
        per_curve[*c].push(trace);
    }
    let mean_kappa = |control: bool| {
        let ks: Vec<f64> = envs
            .iter()
            .map(|e| if control { e.control.as_ref().unwrap() } else { &e.primary }.kappa_inf())
            .collect();
        mean_std(&ks).0
    };
    let curves = aggregate_curves(cfg, specs, per_curve);
    let mut summary = base_summary(cfg, &repeats);
    summary.insert("kappa".into(), kappa_json(&envs));
    summary.insert(
        "curves".into(),
        Value::Array(
            curves
                .iter()
                .map(|c| {
                    let mut v = curve_summary(c);
                    let ens = if c.spec.control {
                        envs[0].control.as_ref().unwrap()
                    } else {
                        &envs[0].primary
                    };
                    v["bounds"] = bounds_for(cfg, &c.spec, ens, mean_kappa(c.spec.control));
                    v
                })
                .collect(),
        ),
    );
    Ok(Outcome {
        config: cfg.clone(),
        repeats,
        curves,
        summary: Value::Object(summary),
        verification: None,
    })
}

/// Per-repeat record of one phase-1 stepsize.
#[derive(Debug, Clone, Serialize)]
pub struct TwoPhaseRecord {
    pub repeat: usize,
    pub lambda1: f64,
    pub t0: usize,
    /// Iteration reaching each tolerance, `None` if never met.
    pub two_phase_hits: Vec<Option<usize>>,
    pub baseline_hits: Vec<Option<usize>>,
    pub final_error: f64,
    pub baseline_final_error: f64,
}

fn two_phase_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let e = cfg.sync_periods[0];
    let repeats: Vec<RepeatSeeds> = (0..cfg.num_repeats).map(|i| RepeatSeeds::new(cfg.seed, i)).collect();
    let envs = repeats
        .par_iter()
        .map(|&s| build_env(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let engines = engines(&envs)?;
    let env = cfg.ensemble.label();
    let baseline = CurveSpec {
        name: format!("{env} E={} baseline {}", e.label(), cfg.phase2.label()),
        control: false,
        sync_period: e,
        schedule: cfg.phase2.clone(),
    };
    let pilot_specs: Vec<CurveSpec> = cfg
        .phase1_lambdas
        .iter()
        .map(|&l| CurveSpec {
            name: format!("{env} E={} pilot constant {l}", e.label()),
            control: false,
            sync_period: e,
            schedule: StepsizeSchedule::Constant { lambda: l },
        })
        .collect();

    // Baselines and pilots are independent; two-phase runs need the pilots' t0.
    let first: Vec<(usize, usize)> = (0..=pilot_specs.len())
        .flat_map(|c| (0..envs.len()).map(move |r| (c, r)))
        .collect();
    let spec_of = |c: usize| if c == 0 { &baseline } else { &pilot_specs[c - 1] };
    let first_runs = first
        .par_iter()
        .map(|&(c, r)| run_one(&engines[r].primary, cfg, spec_of(c), envs[r].seeds, spec_of(c).schedule.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut by_curve: Vec<Vec<RunTrace>> = (0..=pilot_specs.len()).map(|_| Vec::new()).collect();
    for ((c, _), t) in first.iter().zip(first_runs) {
        by_curve[*c].push(t);
    }

    let t0: Vec<Vec<usize>> = by_curve[1..]
        .iter()
        .map(|traces| traces.iter().map(|t| detect_phase_transition(&t.errors, cfg.window)).collect())
        .collect();
    let two_phase_specs: Vec<CurveSpec> = cfg
        .phase1_lambdas
        .iter()
        .map(|&l| CurveSpec {
            name: format!("{env} E={} two-phase lambda1={l} then {}", e.label(), cfg.phase2.label()),
            control: false,
            sync_period: e,
            // t0 differs per repeat; the per-run schedule is built below.
            schedule: StepsizeSchedule::TwoPhase {
                lambda1: l,
                t0: 0,
                phase2: Box::new(cfg.phase2.clone()),
            },
        })
        .collect();
    let second: Vec<(usize, usize)> = (0..two_phase_specs.len())
        .flat_map(|c| (0..envs.len()).map(move |r| (c, r)))
        .collect();
    let second_runs = second
        .par_iter()
        .map(|&(c, r)| {
            let schedule = StepsizeSchedule::TwoPhase {
                lambda1: cfg.phase1_lambdas[c],
                t0: t0[c][r],
                phase2: Box::new(cfg.phase2.clone()),
            };
            run_one(&engines[r].primary, cfg, &two_phase_specs[c], envs[r].seeds, schedule)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut two_phase_traces: Vec<Vec<RunTrace>> = (0..two_phase_specs.len()).map(|_| Vec::new()).collect();
    for ((c, _), t) in second.iter().zip(second_runs) {
        two_phase_traces[*c].push(t);
    }

    let hits = |t: &RunTrace| -> Vec<Option<usize>> {
        cfg.tolerances
            .iter()
            .map(|tol| first_hit(&t.errors, tol * t.errors[0]))
            .collect()
    };
    let mut records = Vec::new();
    for (c, traces) in two_phase_traces.iter().enumerate() {
        for (r, t) in traces.iter().enumerate() {
            let base = &by_curve[0][r];
            records.push(TwoPhaseRecord {
                repeat: r,
                lambda1: cfg.phase1_lambdas[c],
                t0: t0[c][r],
                two_phase_hits: hits(t),
                baseline_hits: hits(base),
                final_error: t.final_error(),
                baseline_final_error: base.final_error(),
            });
        }
    }

    let mut specs = vec![baseline];
    specs.extend(two_phase_specs);
    specs.extend(pilot_specs);
    let mut traces = vec![by_curve.remove(0)];
    traces.extend(two_phase_traces);
    traces.extend(by_curve);
    let curves = aggregate_curves(cfg, specs, traces);

    let mut summary = base_summary(cfg, &repeats);
    summary.insert("kappa".into(), kappa_json(&envs));
    summary.insert("tolerances".into(), json!(cfg.tolerances));
    summary.insert("two_phase".into(), serde_json::to_value(&records)?);
    summary.insert("curves".into(), Value::Array(curves.iter().map(curve_summary).collect()));
    Ok(Outcome {
        config: cfg.clone(),
        repeats,
        curves,
        summary: Value::Object(summary),
        verification: None,
    })
}

/// One (E, λ) case of the lower-bound check.
#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundCase {
    pub sync_period: usize,
    pub lambda: f64,
    pub horizon: usize,
    pub max_deviation: f64,
    pub final_error: f64,
    pub closed_form_final: f64,
    /// `None` when the horizon is below the threshold.
    pub floor: Option<f64>,
    pub floor_holds: Option<bool>,
}

fn lower_bound_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let EnsembleSpec::LowerBound { reward } = cfg.ensemble else {
        return Err(HarnessError::Config("lower_bound_check needs a lower_bound ensemble".into()));
    };
    let seeds = RepeatSeeds::new(cfg.seed, 0);
    let env = build_env(cfg, seeds)?;
    let target = TwoStateTarget::new(reward, cfg.gamma);
    let engine = FedQ::with_q_star(&env.primary, QTable::from_vec(2, 1, target.q_star.to_vec())?)?;
    let mut cases = Vec::new();
    let mut specs = Vec::new();
    let mut traces = Vec::new();
    for &e in &cfg.sync_periods {
        let SyncPeriod::Every(e) = e else {
            return Err(HarnessError::Config("lower_bound_check needs finite sync periods".into()));
        };
        for s in &cfg.schedules {
            let Some(lambda) = s.constant_value(cfg.horizon, cfg.num_agents, cfg.gamma) else {
                return Err(HarnessError::Config("lower_bound_check needs constant stepsizes".into()));
            };
            if lambda > max_stepsize(cfg.gamma) {
                return Err(HarnessError::Config(format!(
                    "stepsize {lambda} exceeds 1/(1+gamma) = {}",
                    max_stepsize(cfg.gamma)
                )));
            }
            let horizon = cfg.horizon / e * e;
            let spec = CurveSpec {
                name: format!("lower_bound E={e} {}", s.label()),
                control: false,
                sync_period: SyncPeriod::Every(e),
                schedule: s.clone(),
            };
            let mut rc = RunConfig::new(SyncPeriod::Every(e), horizon, s.clone(), seeds.sampler);
            rc.run_id = format!("{}/r0", slug(&spec.name));
            let trace = engine.run(&rc)?;
            let mut max_dev = 0.0f64;
            for r in 0..=(horizon / e) {
                let want = closed_form_delta(r as u64, e, lambda, cfg.gamma, reward)?.linf;
                max_dev = max_dev.max((trace.errors[r * e] - want).abs());
            }
            let closed = closed_form_delta((horizon / e) as u64, e, lambda, cfg.gamma, reward)?.linf;
            let floor = lower_bound_floor(horizon as u64, e, cfg.gamma, reward).ok();
            cases.push(LowerBoundCase {
                sync_period: e,
                lambda,
                horizon,
                max_deviation: max_dev,
                final_error: trace.final_error(),
                closed_form_final: closed,
                floor,
                floor_holds: floor.map(|f| trace.final_error() >= f),
            });
            specs.push(spec);
            traces.push(vec![trace]);
        }
    }
    let mut report = VerificationReport::default();
    for c in &cases {
        report.checks.push(CheckRecord {
            name: "closed_form_equivalence".into(),
            params: json!({"E": c.sync_period, "lambda": c.lambda, "T": c.horizon, "gamma": cfg.gamma}),
            measured: c.max_deviation,
            bound: ORACLE_TOL,
            pass: c.max_deviation <= ORACLE_TOL,
        });
    }
    // Horizons differ per E, so curves are not aggregated across cases.
    let curves: Vec<CurveResult> = specs
        .into_iter()
        .zip(traces)
        .map(|(spec, traces)| {
            let aggregate = AggregateSeries::from_traces(&spec.name, &[traces[0].errors.as_slice()], cfg.window);
            CurveResult {
                spec,
                traces,
                aggregate,
            }
        })
        .collect();
    let mut summary = base_summary(cfg, &[seeds]);
    summary.insert(
        "max_deviation".into(),
        json!(cases.iter().map(|c| c.max_deviation).fold(0.0, f64::max)),
    );
    summary.insert("cases".into(), serde_json::to_value(&cases)?);
    summary.insert("min_horizon_factor".into(), json!(min_horizon(1, cfg.gamma).ok().map(|h| h.round_factor)));
    Ok(Outcome {
        config: cfg.clone(),
        repeats: vec![seeds],
        curves,
        summary: Value::Object(summary),
        verification: Some(report),
    })
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Numeric self-checks of the oracles plus verified maze runs.
fn verify_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut report = VerificationReport::default();
    for gamma in [0.3, 0.5, 0.9] {
        for e in [1usize, 2, 4, 8] {
            let grid: Vec<f64> = log_spaced(1e-3, max_stepsize(gamma), 12)
                .into_iter()
                .map(|l| l.min(max_stepsize(gamma)))
                .collect();
            report.extend(verify_kappa_properties(gamma, e, &grid)?);
        }
    }
    let branch = -1.0 / std::f64::consts::E;
    for x in log_spaced(1e-6, -branch * (1.0 - 1e-9), 100) {
        let x = -x;
        let w = lambert_w_minus1(x)?;
        let rel = ((w * w.exp() - x) / x).abs();
        report.checks.push(CheckRecord {
            name: "lambert_identity".into(),
            params: json!({"x": x}),
            measured: rel,
            bound: 1e-12,
            pass: rel <= 1e-12 && w <= -1.0,
        });
    }
    for e in [1usize, 2, 4, 8] {
        let ratio = min_horizon(e, 0.5)?.exact / e as f64;
        report.checks.push(CheckRecord {
            name: "min_horizon_factor".into(),
            params: json!({"E": e, "gamma": 0.5}),
            measured: ratio,
            bound: 17.1,
            pass: (16.9..=17.1).contains(&ratio),
        });
    }

    let repeats: Vec<RepeatSeeds> = (0..cfg.num_repeats).map(|i| RepeatSeeds::new(cfg.seed, i)).collect();
    let lambda = cfg
        .schedules
        .first()
        .and_then(|s| s.constant_value(cfg.horizon, cfg.num_agents, cfg.gamma))
        .unwrap_or(0.1);
    let runs = repeats
        .par_iter()
        .map(|&seeds| -> Result<CheckRecord> {
            let env = build_env(cfg, seeds)?;
            let engine = FedQ::new(&env.primary)?;
            let mut rc = RunConfig::new(
                cfg.sync_periods[0],
                cfg.horizon,
                StepsizeSchedule::Constant { lambda },
                seeds.sampler,
            );
            rc.record_locals = true;
            rc.verify_identities = true;
            let (measured, pass) = match engine.run(&rc) {
                Ok(trace) => {
                    verify_coarse_bounds(&trace)?;
                    (trace.max_identity_residual().unwrap_or(0.0), true)
                }
                Err(fedq_core::Error::Violation(msg)) => {
                    return Ok(CheckRecord {
                        name: "error_iteration_and_coarse_bounds".into(),
                        params: json!({"repeat": seeds.index, "diagnostic": msg}),
                        measured: f64::NAN,
                        bound: fedq_core::engine::IDENTITY_RESIDUAL_TOL,
                        pass: false,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            Ok(CheckRecord {
                name: "error_iteration_and_coarse_bounds".into(),
                params: json!({"repeat": seeds.index, "lambda": lambda, "E": cfg.sync_periods[0]}),
                measured,
                bound: fedq_core::engine::IDENTITY_RESIDUAL_TOL,
                pass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report.checks.extend(runs);

    let mut summary = base_summary(cfg, &repeats);
    summary.insert("checks".into(), json!(report.checks.len()));
    summary.insert("failures".into(), json!(report.failures().count()));
    Ok(Outcome {
        config: cfg.clone(),
        repeats,
        curves: Vec::new(),
        summary: Value::Object(summary),
        verification: Some(report),
    })
}

/// Runs the experiment in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let outcome = match cfg.kind {
        ExperimentKind::SingleRun | ExperimentKind::StepsizeSweep | ExperimentKind::ESweep => grid_experiment(cfg)?,
        ExperimentKind::TwoPhase => two_phase_experiment(cfg)?,
        ExperimentKind::LowerBoundCheck => lower_bound_experiment(cfg)?,
        ExperimentKind::VerifyAll => verify_experiment(cfg)?,
    };
    if let Some(report) = &outcome.verification {
        if !report.all_passed() {
            let names: Vec<String> = report
                .failures()
                .map(|c| format!("{} {}", c.name, c.params))
                .collect();
            return Err(HarnessError::Verification(names.join("; ")));
        }
    }
    Ok(outcome)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn write_bundle(outcome: &Outcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut add = |rel: String, bytes: Vec<u8>| -> Result<()> {
        write_file(&dir.join(&rel), &bytes)?;
        written.push(PathBuf::from(rel));
        Ok(())
    };
    for c in &outcome.curves {
        let name = slug(&c.spec.name);
        for (r, t) in c.traces.iter().enumerate() {
            let mut buf = Vec::new();
            t.write_csv(&mut buf).map_err(|e| HarnessError::io(dir, e))?;
            add(format!("traces/{name}/repeat_{r}.csv"), buf)?;
        }
        let mut buf = Vec::new();
        c.aggregate.write_csv(&mut buf).map_err(|e| HarnessError::io(dir, e))?;
        add(format!("aggregate_{name}.csv"), buf)?;
    }
    if !outcome.curves.is_empty() {
        let series: Vec<Series<'_>> = outcome
            .curves
            .iter()
            .map(|c| Series {
                label: &c.spec.name,
                mean: &c.aggregate.mean,
                std: &c.aggregate.std,
            })
            .collect();
        let title = format!(
            "{} (K={}, gamma={}, {} repeats)",
            outcome.config.kind.as_str(),
            outcome.config.num_agents,
            outcome.config.gamma,
            outcome.repeats.len()
        );
        let svg = emit_svg(
            &series,
            &ChartStyle {
                title: &title,
                x_label: "iteration t",
                y_label: "error ||Q* - Q_t||_inf",
            },
        );
        add("figure.svg".into(), svg.into_bytes())?;
    }
    if let Some(report) = &outcome.verification {
        add("verification.json".into(), report.to_json().into_bytes())?;
    }
    add(
        "summary.json".into(),
        serde_json::to_string_pretty(&outcome.summary)?.into_bytes(),
    )?;
    Ok(written)
}

/// Writes the bundle through a staging directory so a failure leaves no partial output.
pub fn write_outcome(outcome: &Outcome, out: &Path) -> Result<Vec<PathBuf>> {
    let created = !out.exists();
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let staging = out.join(".staging");
    let cleanup = |staging: &Path| {
        let _ = fs::remove_dir_all(staging);
        if created {
            let _ = fs::remove_dir(out);
        }
    };
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| HarnessError::io(&staging, e))?;
    }
    let written = match write_bundle(outcome, &staging) {
        Ok(w) => w,
        Err(e) => {
            cleanup(&staging);
            return Err(e);
        }
    };
    let mut moved = Vec::new();
    let mut publish = || -> Result<()> {
        let traces = out.join("traces");
        if staging.join("traces").exists() && traces.exists() {
            fs::remove_dir_all(&traces).map_err(|e| HarnessError::io(&traces, e))?;
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&staging)
            .map_err(|e| HarnessError::io(&staging, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| HarnessError::io(&staging, e))?;
        // summary.json goes last: its presence marks a complete bundle.
        entries.sort_by_key(|p| p.file_name().is_some_and(|n| n == "summary.json"));
        for path in entries {
            let dest = out.join(path.file_name().expect("staged entry has a name"));
            fs::rename(&path, &dest).map_err(|e| HarnessError::io(&dest, e))?;
            moved.push(dest);
        }
        fs::remove_dir(&staging).map_err(|e| HarnessError::io(&staging, e))
    };
    if let Err(e) = publish() {
        for dest in &moved {
            let _ = if dest.is_dir() { fs::remove_dir_all(dest) } else { fs::remove_file(dest) };
        }
        cleanup(&staging);
        return Err(e);
    }
    Ok(written)
}

/// Executes `cfg` on a pool of `threads` workers (rayon's default when `None`)
/// and writes the bundle to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Outcome> {
    let outcome = in_pool(threads, || execute(cfg))?;
    write_outcome(&outcome, &cfg.output_dir)?;
    Ok(outcome)
}

pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().expect("thread pool").install(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("heterogeneous E=10 const_0.2"), "heterogeneous_e_10_const_0.2");
        assert_eq!(slug("E=inf λ"), "e_inf");
    }

    #[test]
    fn repeat_seeds_are_distinct() {
        let a = RepeatSeeds::new(7, 0);
        let b = RepeatSeeds::new(7, 1);
        assert_ne!(a.seed, b.seed);
        assert_ne!(a.maze, a.reward);
        assert_eq!(a, RepeatSeeds::new(7, 0));
    }
}
