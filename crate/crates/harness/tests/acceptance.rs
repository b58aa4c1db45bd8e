//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedq_core::engine::{verify_coarse_bounds, FedQ, RunConfig, SyncPeriod};
use fedq_core::envgen::{make_lower_bound_ensemble, LowerBoundSpec};
use fedq_core::lambert::lambert_w_minus1;
use fedq_core::mdp::QTable;
use fedq_core::schedule::StepsizeSchedule;
use fedq_core::theory::{
    closed_form_delta, lambda0, lower_bound_floor, max_stepsize, min_horizon, verify_kappa_properties,
    TwoStateTarget,
};
use fedq_harness::aggregate::mean_std;
use fedq_harness::experiment::{build_env, in_pool, RepeatSeeds};
use fedq_harness::{execute, EnsembleSpec, ExperimentConfig, ExperimentKind};
use rayon::prelude::*;
use serde_json::json;

const ORACLE_TOL: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-9;
const LAMBERT_TOL: f64 = 1e-12;
const SEED: u64 = 20_240_601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let mut v = f();
    let took = start.elapsed();
    match limit {
        Some(limit) => {
            let in_time = took < limit;
            v.detail = format!("{}; {:.2} s (limit {} s)", v.detail, took.as_secs_f64(), limit.as_secs());
            v.pass &= in_time;
        }
        None => v.detail = format!("{}; {:.2} s", v.detail, took.as_secs_f64()),
    }
    v
}

fn fast(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(kind);
    cfg.apply_fast();
    cfg.seed = SEED;
    cfg
}

fn constant(lambda: f64) -> StepsizeSchedule {
    StepsizeSchedule::Constant { lambda }
}

/// Simulated lower-bound runs against the closed form at every sync round.
fn oracle_equivalence() -> Verdict {
    let reward = [1.0, 0.0];
    let rounds = 10_000usize;
    let mut cases = Vec::new();
    for gamma in [0.3, 0.5, 0.9] {
        for e in [1usize, 2, 4, 8] {
            let l0 = lambda0(rounds as u64, e, gamma);
            for m in [0.3, 1.0, 3.0, 10.0, 30.0, 100.0] {
                cases.push((gamma, e, (m * l0).min(max_stepsize(gamma))));
            }
        }
    }
    let worst = cases
        .par_iter()
        .map(|&(gamma, e, lambda)| {
            let ens = make_lower_bound_ensemble(&LowerBoundSpec {
                num_agents: 2,
                reward,
                gamma,
            })
            .unwrap();
            let q_star = TwoStateTarget::new(reward, gamma).q_star.to_vec();
            let engine = FedQ::with_q_star(&ens, QTable::from_vec(2, 1, q_star).unwrap()).unwrap();
            let trace = engine
                .run(&RunConfig::new(SyncPeriod::Every(e), rounds * e, constant(lambda), 0))
                .unwrap();
            (0..=rounds)
                .map(|r| {
                    let want = closed_form_delta(r as u64, e, lambda, gamma, reward).unwrap().linf;
                    (trace.errors[r * e] - want).abs()
                })
                .fold(0.0f64, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Verdict {
        pass: worst <= ORACLE_TOL,
        detail: format!("{} cases, max |sim - closed form| = {worst:.3e} (tol {ORACLE_TOL:e})", cases.len()),
    }
}

/// Verified maze runs: error-iteration residual and coarse bounds.
fn maze_identity_runs() -> (f64, usize, usize) {
    static RESULT: OnceLock<(f64, usize, usize)> = OnceLock::new();
    *RESULT.get_or_init(run_maze_identity_runs)
}

fn run_maze_identity_runs() -> (f64, usize, usize) {
    let cfg = fast(ExperimentKind::SingleRun);
    let runs: Vec<(usize, f64, usize)> = (0..20)
        .map(|i| (i, if i % 2 == 0 { 0.1 } else { 0.5 }, [1usize, 10][i / 10]))
        .collect();
    let results: Vec<(f64, usize, usize)> = runs
        .par_iter()
        .map(|&(i, lambda, e)| {
            let env = build_env(&cfg, RepeatSeeds::new(SEED, i)).unwrap();
            let engine = FedQ::new(&env.primary).unwrap();
            let mut rc = RunConfig::new(SyncPeriod::Every(e), cfg.horizon, constant(lambda), env.seeds.sampler);
            rc.verify_identities = true;
            rc.record_locals = true;
            if i == 0 {
                let (s, a) = (env.primary.num_states(), env.primary.num_actions());
                rc.q_init = Some(QTable::filled(s, a, 1.0 / (1.0 - cfg.gamma)));
            }
            // A verified run fails on the first residual above tolerance.
            match engine.run(&rc) {
                Ok(trace) => {
                    let bounds = verify_coarse_bounds(&trace);
                    let checked = bounds.as_ref().map_or(0, |r| r.checked);
                    (trace.max_identity_residual().unwrap(), checked, usize::from(bounds.is_err()))
                }
                Err(fedq_core::Error::Violation(_)) => (f64::INFINITY, 0, 1),
                Err(e) => panic!("{e}"),
            }
        })
        .collect();
    results
        .into_iter()
        .fold((0.0, 0, 0), |(r, c, v), (r2, c2, v2)| (r.max(r2), c + c2, v + v2))
}

fn lemma1() -> Verdict {
    let (worst, _, _) = maze_identity_runs();
    Verdict {
        pass: worst <= IDENTITY_TOL,
        detail: format!("20 maze runs (T=2000, gamma=0.9), max residual = {worst:.3e} (tol {IDENTITY_TOL:e})"),
    }
}

fn lemma2() -> Verdict {
    let (_, checked, violations) = maze_identity_runs();
    Verdict {
        pass: violations == 0 && checked > 0,
        detail: format!("{checked} (t, k) tables checked, {violations} runs with violations"),
    }
}

fn kappa_suite() -> Verdict {
    let mut checks = 0;
    let mut failures = Vec::new();
    let mut points = 0;
    for gamma in [0.3, 0.5, 0.7, 0.9] {
        let top = max_stepsize(gamma);
        // Five log-spaced stepsizes from 1e-3 to 1/(1+γ).
        let grid: Vec<f64> = (0..5)
            .map(|i| (1e-3f64.ln() + (top.ln() - 1e-3f64.ln()) * i as f64 / 4.0).exp().min(top))
            .collect();
        for e in [1usize, 2, 4, 8, 16] {
            points += grid.len();
            let report = verify_kappa_properties(gamma, e, &grid).unwrap();
            checks += report.checks.len();
            failures.extend(report.failures().map(|c| format!("{} {}", c.name, c.params)));
        }
    }
    Verdict {
        pass: failures.is_empty() && points == 100,
        detail: format!(
            "{points} (lambda, E, gamma) points, {checks} checks, {} failures{}",
            failures.len(),
            if failures.is_empty() { String::new() } else { format!(": {}", failures.join("; ")) }
        ),
    }
}

fn lower_bound_floor_check() -> Verdict {
    let (gamma, reward) = (0.5, [1.0, 0.0]);
    let target = TwoStateTarget::new(reward, gamma);
    let ens = make_lower_bound_ensemble(&LowerBoundSpec {
        num_agents: 2,
        reward,
        gamma,
    })
    .unwrap();
    let engine = FedQ::with_q_star(&ens, QTable::from_vec(2, 1, target.q_star.to_vec()).unwrap()).unwrap();
    let mut total = 0;
    let mut below = Vec::new();
    for e in [2usize, 4] {
        for r in [32usize, 64, 128] {
            let t = r * e;
            assert!(t as u64 >= min_horizon(e, gamma).unwrap().steps.unwrap());
            let floor = lower_bound_floor(t as u64, e, gamma, reward).unwrap();
            let l0 = lambda0(r as u64, e, gamma);
            let mut grid: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0]
                .iter()
                .map(|m| (m * l0).min(max_stepsize(gamma)))
                .collect();
            grid.push(max_stepsize(gamma));
            grid.dedup();
            for lambda in grid {
                let trace = engine
                    .run(&RunConfig::new(SyncPeriod::Every(e), t, constant(lambda), 0))
                    .unwrap();
                total += 1;
                let err = trace.final_error();
                if err < floor {
                    below.push(format!("E={e} T={t} lambda={:.3}*l0: {err:.4} < {floor:.4}", lambda / l0));
                }
            }
        }
    }
    Verdict {
        pass: below.is_empty(),
        detail: format!(
            "{} of {total} (E, T, lambda) points at or above the floor{}",
            total - below.len(),
            if below.is_empty() { String::new() } else { format!("; below: {}", below.join(", ")) }
        ),
    }
}

fn criterion6_config() -> serde_json::Value {
    json!({
        "kind": "single_run",
        "ensemble": {"type": "maze"},
        "homogeneous_control": true,
        "sync_periods": [10],
        "schedules": [{"kind": "constant", "lambda": 0.2}],
        "num_repeats": 5
    })
}

fn two_phase_phenomenon() -> Verdict {
    let cfg = fast(ExperimentKind::SingleRun).overlay(&criterion6_config()).unwrap();
    let out = execute(&cfg).unwrap();
    let t = cfg.horizon as f64;
    let het = &out.curves[0].aggregate;
    let hom = &out.curves[1].aggregate;
    let het_ok = (0..5)
        .filter(|&i| (het.t0[i] as f64) < 0.8 * t && het.plateau_errors[i] >= 2.0 * het.min_errors[i])
        .count();
    let hom_ok = (0..5)
        .filter(|&i| hom.plateau_errors[i] <= 1.2 * hom.min_errors[i])
        .count();
    let ratios = |a: &fedq_harness::aggregate::AggregateSeries| {
        a.plateau_errors
            .iter()
            .zip(&a.min_errors)
            .map(|(p, m)| format!("{:.2}", p / m))
            .collect::<Vec<_>>()
            .join("/")
    };
    Verdict {
        pass: het_ok >= 4 && hom_ok >= 4,
        detail: format!(
            "heterogeneous bounce in {het_ok}/5 (plateau/min {}, t0 {:?}); homogeneous flat in {hom_ok}/5 (plateau/min {})",
            ratios(het),
            het.t0,
            ratios(hom)
        ),
    }
}

fn e_degradation() -> Verdict {
    let mut cfg = fast(ExperimentKind::ESweep);
    cfg.sync_periods = [1, 10, 20].into_iter().map(SyncPeriod::Every).collect();
    cfg.schedules = vec![constant(0.1)];
    cfg.homogeneous_control = true;
    let out = execute(&cfg).unwrap();
    let stats: Vec<(f64, f64)> = out.curves.iter().map(|c| c.aggregate.plateau_mean_std()).collect();
    let (het, hom) = stats.split_at(3);
    let nondecreasing = het.windows(2).all(|w| w[1].0 >= w[0].0 - w[0].1.max(w[1].1));
    let hom_means: Vec<f64> = hom.iter().map(|s| s.0).collect();
    let lo = hom_means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = hom_means.iter().copied().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let fmt = |s: &[(f64, f64)]| s.iter().map(|(m, d)| format!("{m:.3}±{d:.3}")).collect::<Vec<_>>().join(", ");
    Verdict {
        pass: nondecreasing && spread < 0.2,
        detail: format!(
            "heterogeneous plateau E=1,10,20: {} (nondecreasing within 1 std: {nondecreasing}); homogeneous: {} (spread {:.1}%)",
            fmt(het),
            fmt(hom),
            100.0 * spread
        ),
    }
}

fn linear_speedup() -> Verdict {
    let finals = |k: usize| {
        let mut cfg = fast(ExperimentKind::SingleRun);
        cfg.ensemble = EnsembleSpec::Homogeneous {
            grid_side: 5,
            drift: 0.1,
            wall_density: 0.2,
        };
        cfg.num_agents = k;
        cfg.horizon = 4000;
        cfg.num_repeats = 5;
        cfg.sync_periods = vec![SyncPeriod::Every(1)];
        cfg.schedules = vec![StepsizeSchedule::Corollary];
        let out = execute(&cfg).unwrap();
        mean_std(&out.curves[0].aggregate.final_errors).0
    };
    let (small, large) = (finals(4), finals(16));
    let ratio = large / small;
    Verdict {
        pass: ratio <= 0.6,
        detail: format!("mean final error K=4: {small:.4}, K=16: {large:.4}, ratio {ratio:.3} (limit 0.6)"),
    }
}

fn two_phase_benefit() -> Verdict {
    let mut cfg = fast(ExperimentKind::TwoPhase);
    cfg.num_repeats = 5;
    cfg.phase1_lambdas = vec![0.05];
    cfg.phase2 = StepsizeSchedule::Poly { alpha: 0.5 };
    let out = execute(&cfg).unwrap();
    let records = out.summary["two_phase"].as_array().unwrap();
    let mut wins = 0;
    let mut detail = Vec::new();
    for r in records {
        let two = r["two_phase_hits"][0].as_u64();
        let base = r["baseline_hits"][0].as_u64();
        let earlier = match (two, base) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        wins += usize::from(earlier);
        detail.push(format!(
            "t0={} hit {}/{}",
            r["t0"],
            two.map_or("never".into(), |v| v.to_string()),
            base.map_or("never".into(), |v| v.to_string())
        ));
    }
    Verdict {
        pass: wins >= 4,
        detail: format!("two-phase reaches 10% first in {wins}/5 repeats ({})", detail.join(", ")),
    }
}

fn numerics() -> Verdict {
    let branch = -1.0 / std::f64::consts::E;
    let (lo, hi) = (1e-6f64.ln(), (-branch).ln());
    let mut worst = 0.0f64;
    let mut all_below = true;
    // Strictly inside (−1/e, −1e-6): skip both endpoints of the log grid.
    for i in 1..=100 {
        let x = -(lo + (hi - lo) * i as f64 / 101.0).exp();
        let w = lambert_w_minus1(x).unwrap();
        worst = worst.max(((w * w.exp() - x) / x).abs());
        all_below &= w <= -1.0;
    }
    let factors: Vec<f64> = [1usize, 2, 4, 8, 16]
        .iter()
        .map(|&e| min_horizon(e, 0.5).unwrap().exact / e as f64)
        .collect();
    let horizon_ok = factors.iter().all(|f| (16.9..=17.1).contains(f));
    Verdict {
        pass: worst <= LAMBERT_TOL && all_below && horizon_ok,
        detail: format!(
            "max relative W-1 residual {worst:.2e} on 100 points; min_horizon/E = {:.5}",
            factors[0]
        ),
    }
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("criterion6.json");
    std::fs::write(&config, criterion6_config().to_string()).unwrap();
    let run = |threads: &str, name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_fedq"))
            .args(["run", "--fast", "--seed", "11", "--threads", threads, "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        csv_files(&out)
    };
    let a = run("1", "a");
    let b = run("4", "b");
    let c = run("4", "c");
    let same = !a.is_empty() && a == b && b == c;
    Verdict {
        pass: same,
        detail: format!(
            "{} CSV files; threads 1 vs 4 identical: {}, repeat identical: {}",
            a.len(),
            a == b,
            b == c
        ),
    }
}

fn main() {
    let criteria: Vec<(&str, Option<u64>, fn() -> Verdict)> = vec![
        ("1 oracle equivalence", Some(10), oracle_equivalence),
        ("2 error-iteration identity", Some(30), lemma1),
        ("3 coarse bounds", None, lemma2),
        ("4 kappa properties", Some(1), kappa_suite),
        ("5 lower-bound floor", Some(5), lower_bound_floor_check),
        ("6 two-phase phenomenon", Some(120), two_phase_phenomenon),
        ("7 E degradation", Some(180), e_degradation),
        ("8 linear speedup", Some(120), linear_speedup),
        ("9 two-phase benefit", Some(120), two_phase_benefit),
        ("10 numerics", Some(1), numerics),
        ("11 determinism", None, determinism),
    ];
    let mut failed = Vec::new();
    for (name, limit, f) in criteria {
        let v = in_pool(None, || timed(limit.map(Duration::from_secs), f));
        println!("criterion {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
