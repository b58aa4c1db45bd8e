//! Closed-form error dynamics of the two-state identity/swap construction.
//!
//! With one action, agents alternating between the identity and the swap
//! kernel, and a constant stepsize `λ`, the averaged error after `r` rounds of
//! `E` local steps is an explicit function of
//!
//! * `ν₁ = 1 − (1+γ)λ`, `ν₂ = 1 − (1−γ)λ`,
//! * `α_E = ½(ν₁^E + ν₂^E)`, `β_E = ν₂^E`,
//! * `κ_E = −(γ/2)·((1−ν₂^E)/(1−γ) − (1−ν₁^E)/(1+γ))`,
//!
//! namely `Δ_rE = β_E^r·P̄Q* + (α_E^r + (1−α_E^r)/(1−α_E)·κ_E)·(I−P̄)Q*` from a
//! zero start. This module evaluates those quantities, the horizon threshold
//! built on `W₋₁`, the `Ω(E/T)` floor, and numeric checks of the `κ_E`
//! properties. The general between-sync recursion for arbitrary kernels is
//! in [`sync_round_update`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lambert::lambert_w_minus1;

/// Largest round count accepted by [`closed_form_delta`].
pub const MAX_ROUNDS: u64 = 10_000_000;

/// Largest admissible stepsize, `1/(1+γ)`.
pub fn max_stepsize(gamma: f64) -> f64 {
    1.0 / (1.0 + gamma)
}

/// `1 − (1 − x)^n` without cancellation for small `x`.
fn one_minus_pow(x: f64, n: f64) -> f64 {
    if x >= 1.0 {
        return 1.0;
    }
    -(n * (-x).ln_1p()).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbCoefficients {
    pub lambda: f64,
    pub gamma: f64,
    pub sync_period: usize,
    pub nu1: f64,
    pub nu2: f64,
    pub alpha_e: f64,
    pub beta_e: f64,
    pub kappa_e: f64,
    /// `1 − α_E`, evaluated without cancellation.
    pub one_minus_alpha_e: f64,
}

impl LbCoefficients {
    pub fn new(lambda: f64, gamma: f64, sync_period: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Domain(format!("gamma {gamma} outside [0, 1)")));
        }
        if !(lambda > 0.0 && lambda <= max_stepsize(gamma)) {
            return Err(Error::Domain(format!(
                "stepsize {lambda} outside (0, 1/(1+gamma)] = (0, {}]",
                max_stepsize(gamma)
            )));
        }
        if sync_period == 0 {
            return Err(Error::Domain("synchronization period must be at least 1".into()));
        }
        let e = sync_period as f64;
        let fast = (1.0 + gamma) * lambda;
        let slow = (1.0 - gamma) * lambda;
        let nu1 = 1.0 - fast;
        let nu2 = 1.0 - slow;
        let drop1 = one_minus_pow(fast, e);
        let drop2 = one_minus_pow(slow, e);
        let one_minus_alpha_e = 0.5 * (drop1 + drop2);
        let kappa_e = if sync_period == 1 {
            0.0
        } else {
            -0.5 * gamma * (drop2 / (1.0 - gamma) - drop1 / (1.0 + gamma))
        };
        Ok(Self {
            lambda,
            gamma,
            sync_period,
            nu1,
            nu2,
            alpha_e: 0.5 * (nu1.powi(sync_period as i32) + nu2.powi(sync_period as i32)),
            beta_e: nu2.powi(sync_period as i32),
            kappa_e,
            one_minus_alpha_e,
        })
    }

    /// `κ_E` as the finite sum `−(λγ/2)·Σ_{i=1}^{E−1}(ν₂^i − ν₁^i)`.
    pub fn kappa_sum_form(&self) -> f64 {
        let mut p1 = 1.0;
        let mut p2 = 1.0;
        let mut sum = 0.0;
        for _ in 1..self.sync_period {
            p1 *= self.nu1;
            p2 *= self.nu2;
            sum += p2 - p1;
        }
        -0.5 * self.lambda * self.gamma * sum
    }

    /// `κ_E/(1−α_E)`: the non-vanishing residual coefficient.
    pub fn kappa_ratio(&self) -> f64 {
        self.kappa_e / self.one_minus_alpha_e
    }

    /// Coefficient of `(I−P̄)Q*` after `r` rounds from a zero start.
    pub fn residual_coefficient(&self, rounds: u64) -> f64 {
        let r = rounds as f64;
        // α_E^r and 1 − α_E^r through log(α_E) = log1p(−(1−α_E)).
        let log_alpha = (-self.one_minus_alpha_e).ln_1p();
        let alpha_r = (r * log_alpha).exp();
        let drop = -(r * log_alpha).exp_m1();
        alpha_r + drop / self.one_minus_alpha_e * self.kappa_e
    }

    /// `β_E^r = ν₂^{rE}`.
    pub fn beta_power(&self, rounds: u64) -> f64 {
        let steps = rounds as f64 * self.sync_period as f64;
        (steps * (-(1.0 - self.gamma) * self.lambda).ln_1p()).exp()
    }
}

/// `λ₀ = log r/((1−γ)·r·E)`, separating the small-stepsize and heterogeneity regimes.
pub fn lambda0(rounds: u64, sync_period: usize, gamma: f64) -> f64 {
    let r = rounds as f64;
    r.ln() / ((1.0 - gamma) * r * sync_period as f64)
}

/// Projections of `Q*` for the two-state global MDP with `P̄ = ½·11ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStateTarget {
    pub q_star: [f64; 2],
    /// `P̄Q*`.
    pub averaged: [f64; 2],
    /// `(I−P̄)Q*`.
    pub contrast: [f64; 2],
}

impl TwoStateTarget {
    pub fn new(reward: [f64; 2], gamma: f64) -> Self {
        let mean = 0.5 * (reward[0] + reward[1]);
        let level = mean / (1.0 - gamma);
        let contrast = [reward[0] - mean, reward[1] - mean];
        Self {
            q_star: [contrast[0] + level, contrast[1] + level],
            averaged: [level, level],
            contrast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormDelta {
    pub delta: [f64; 2],
    pub linf: f64,
}

/// Exact `Δ_rE = Q* − Q̄_rE` of the two-state construction started from zero.
pub fn closed_form_delta(
    rounds: u64,
    sync_period: usize,
    lambda: f64,
    gamma: f64,
    reward: [f64; 2],
) -> Result<ClosedFormDelta> {
    if rounds > MAX_ROUNDS {
        return Err(Error::Domain(format!("round count {rounds} exceeds {MAX_ROUNDS}")));
    }
    let c = LbCoefficients::new(lambda, gamma, sync_period)?;
    let target = TwoStateTarget::new(reward, gamma);
    let (b, a) = if rounds == 0 {
        (1.0, 1.0)
    } else {
        (c.beta_power(rounds), c.residual_coefficient(rounds))
    };
    let delta = [
        b * target.averaged[0] + a * target.contrast[0],
        b * target.averaged[1] + a * target.contrast[1],
    ];
    Ok(ClosedFormDelta {
        delta,
        linf: delta[0].abs().max(delta[1].abs()),
    })
}

/// `c_R = min{‖(I−P̄)Q*‖₂, ‖P̄Q*‖₂}` for the two-state construction.
pub fn reward_constant(reward: [f64; 2], gamma: f64) -> Result<f64> {
    let contrast = (reward[0] - reward[1]).abs() / 2f64.sqrt();
    let average = (reward[0] + reward[1]).abs() / 2f64.sqrt() / (1.0 - gamma);
    if contrast == 0.0 || average == 0.0 {
        return Err(Error::Domain(format!(
            "reward ({}, {}) is not in general position; the floor would be vacuous",
            reward[0], reward[1]
        )));
    }
    Ok(contrast.min(average))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinHorizon {
    /// `exp(−W₋₁(−(1−γ)/(2(1+γ))))`, the threshold on the number of rounds.
    pub round_factor: f64,
    /// `E·round_factor`.
    pub exact: f64,
    /// Smallest multiple of `E` not below `exact`; `None` if it overflows `u64`.
    pub steps: Option<u64>,
}

/// Horizon beyond which the `Ω(E/T)` floor is claimed.
pub fn min_horizon(sync_period: usize, gamma: f64) -> Result<MinHorizon> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma {gamma} outside (0, 1)")));
    }
    let arg = -(1.0 - gamma) / (2.0 * (1.0 + gamma));
    if arg < -1.0 / std::f64::consts::E {
        return Err(Error::Domain(format!(
            "gamma {gamma} puts the W-1 argument {arg} below -1/e"
        )));
    }
    let round_factor = if arg == 0.0 {
        f64::INFINITY
    } else {
        (-lambert_w_minus1(arg)?).exp()
    };
    let e = sync_period as f64;
    let rounds = round_factor.ceil();
    let steps = rounds * e;
    let steps = (steps.is_finite() && steps < u64::MAX as f64).then_some(steps as u64);
    Ok(MinHorizon {
        round_factor,
        exact: e * round_factor,
        steps,
    })
}

/// `(c_R/√2)·E/((1−γ)T)`: the explicit floor on `‖Δ_T‖∞`.
pub fn lower_bound_floor(horizon: u64, sync_period: usize, gamma: f64, reward: [f64; 2]) -> Result<f64> {
    if sync_period == 0 || horizon % sync_period as u64 != 0 {
        return Err(Error::Inapplicable(format!(
            "T = {horizon} is not a multiple of E = {sync_period}"
        )));
    }
    let threshold = min_horizon(sync_period, gamma)?;
    match threshold.steps {
        Some(steps) if horizon >= steps => {}
        _ => {
            return Err(Error::Inapplicable(format!(
                "T = {horizon} is below the horizon threshold {:.3}",
                threshold.exact
            )))
        }
    }
    let c_r = reward_constant(reward, gamma)?;
    Ok(c_r / 2f64.sqrt() * sync_period as f64 / ((1.0 - gamma) * horizon as f64))
}

/// One named numeric check and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub params: serde_json::Value,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn extend(&mut self, other: VerificationReport) {
        self.checks.extend(other.checks);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Agreement allowed between the closed and finite-sum forms of `κ_E`.
pub const KAPPA_FORM_TOL: f64 = 1e-12;

/// Checks negativity, monotonicity, the `γ²/(1−γ²)` ceiling and the
/// `λγ²(E−1)/4` floor of `κ_E/(1−α_E)` on a stepsize grid.
pub fn verify_kappa_properties(gamma: f64, sync_period: usize, lambdas: &[f64]) -> Result<VerificationReport> {
    let mut grid = lambdas.to_vec();
    grid.sort_by(f64::total_cmp);
    let coeffs = grid
        .iter()
        .map(|&l| LbCoefficients::new(l, gamma, sync_period))
        .collect::<Result<Vec<_>>>()?;
    let e = sync_period as f64;
    let ceiling = gamma * gamma / (1.0 - gamma * gamma);
    let mut report = VerificationReport::default();
    let params = |l: f64| serde_json::json!({"gamma": gamma, "E": sync_period, "lambda": l});

    for c in &coeffs {
        let l = c.lambda;
        let sum_form = c.kappa_sum_form();
        report.checks.push(CheckRecord {
            name: "kappa_closed_vs_sum".into(),
            params: params(l),
            measured: (c.kappa_e - sum_form).abs(),
            bound: KAPPA_FORM_TOL,
            pass: (c.kappa_e - sum_form).abs() <= KAPPA_FORM_TOL,
        });
        if sync_period >= 2 {
            report.checks.push(CheckRecord {
                name: "negativity".into(),
                params: params(l),
                measured: c.kappa_e,
                bound: 0.0,
                pass: c.kappa_e < 0.0,
            });
        } else {
            report.checks.push(CheckRecord {
                name: "kappa_one_is_zero".into(),
                params: params(l),
                measured: c.kappa_e,
                bound: 0.0,
                pass: c.kappa_e == 0.0,
            });
        }
        let ratio = c.kappa_ratio().abs();
        report.checks.push(CheckRecord {
            name: "upper_bound".into(),
            params: params(l),
            measured: ratio,
            bound: ceiling,
            pass: ratio <= ceiling,
        });
        if (1.0 + gamma) * l <= 1.0 / (2.0 * e) {
            let floor = l * gamma * gamma * (e - 1.0) / 4.0;
            report.checks.push(CheckRecord {
                name: "lower_bound".into(),
                params: params(l),
                measured: ratio,
                bound: floor,
                pass: ratio >= floor,
            });
        }
    }
    for pair in coeffs.windows(2) {
        let (a, b) = (pair[0].kappa_ratio(), pair[1].kappa_ratio());
        report.checks.push(CheckRecord {
            name: "monotonicity".into(),
            params: serde_json::json!({
                "gamma": gamma, "E": sync_period,
                "lambda_lo": pair[0].lambda, "lambda_hi": pair[1].lambda
            }),
            measured: b,
            bound: a,
            pass: b <= a,
        });
    }
    Ok(report)
}

/// One synchronization round of the averaged error for single-action agents:
///
/// `Δ' = Ā⁽ᴱ⁾Δ + ((I − Ā⁽ᴱ⁾) − (I + Ā⁽¹⁾ + … + Ā⁽ᴱ⁻¹⁾)(I − Ā⁽¹⁾))Q*`
///
/// with `Aᵏ = (1−λ)I + λγPᵏ` and `Ā⁽ℓ⁾` the agent mean of `(Aᵏ)^ℓ`.
/// `kernels` are row-major `|S|×|S|` matrices.
pub fn sync_round_update(
    kernels: &[Vec<f64>],
    lambda: f64,
    gamma: f64,
    sync_period: usize,
    q_star: &[f64],
    delta: &[f64],
) -> Vec<f64> {
    let n = q_star.len();
    let k = kernels.len() as f64;
    let identity = DMatrix::<f64>::identity(n, n);
    let steps: Vec<DMatrix<f64>> = kernels
        .iter()
        .map(|p| &identity * (1.0 - lambda) + DMatrix::from_row_slice(n, n, p) * (lambda * gamma))
        .collect();
    // mean_powers[ℓ] = Ā⁽ℓ⁾ for ℓ = 0..=E.
    let mut powers: Vec<DMatrix<f64>> = vec![identity.clone(); steps.len()];
    let mut mean_powers = vec![identity.clone()];
    for _ in 0..sync_period {
        let mut mean = DMatrix::<f64>::zeros(n, n);
        for (power, step) in powers.iter_mut().zip(&steps) {
            *power = &*power * step;
            mean += &*power;
        }
        mean_powers.push(mean / k);
    }
    let partial: DMatrix<f64> = mean_powers[..sync_period].iter().sum();
    let residual = (&identity - &mean_powers[sync_period]) - partial * (&identity - &mean_powers[1]);
    let q = nalgebra::DVector::from_column_slice(q_star);
    let d = nalgebra::DVector::from_column_slice(delta);
    (&mean_powers[sync_period] * d + residual * q).as_slice().to_vec()
}
