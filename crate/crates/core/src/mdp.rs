//! Tabular MDPs, agent ensembles and exact optimal Q-functions.
//!
//! Kernels are stored as flat `(|S|·|A|) × |S|` row-major matrices. The row of
//! the pair `(s, a)` has index `s·|A| + a`; this layout is fixed because the
//! JSON ensemble format and the trace files depend on it.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Tolerance used when checking that a kernel row is a probability vector.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Default accuracy target of [`optimal_q`].
pub const DEFAULT_Q_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    kernel: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        kernel: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return config("num_states and num_actions must be positive");
        }
        let pairs = num_states * num_actions;
        if kernel.len() != pairs * num_states {
            return config(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                pairs * num_states
            ));
        }
        if reward.len() != pairs {
            return config(format!("reward has {} entries, expected {pairs}", reward.len()));
        }
        if !(0.0..1.0).contains(&discount) {
            return config(format!("discount {discount} outside [0, 1)"));
        }
        for (pair, row) in kernel.chunks_exact(num_states).enumerate() {
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return config(format!("kernel row {pair} has entry {p} outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return config(format!("kernel row {pair} sums to {sum}"));
            }
        }
        if let Some(r) = reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return config(format!("reward entry {r} outside [0, 1]"));
        }
        Ok(Self {
            num_states,
            num_actions,
            kernel,
            reward,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of state–action pairs.
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// `P(·|s,a)` for the flat pair index `s·|A| + a`.
    pub fn row(&self, pair: usize) -> &[f64] {
        &self.kernel[pair * self.num_states..(pair + 1) * self.num_states]
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Upper bound `1/(1−γ)` on any Q-value when rewards lie in `[0, 1]`.
    pub fn value_ceiling(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    /// `(P V)(s,a) = Σ_{s'} P(s'|s,a) V(s')`.
    pub fn expect(&self, value: &[f64]) -> Vec<f64> {
        assert_eq!(value.len(), self.num_states);
        self.kernel
            .chunks_exact(self.num_states)
            .map(|row| row.iter().zip(value).map(|(p, v)| p * v).sum())
            .collect()
    }
}

/// A real-valued table over state–action pairs, `(s,a)`-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::filled(num_states, num_actions, 0.0)
    }

    pub fn filled(num_states: usize, num_actions: usize, value: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![value; num_states * num_actions],
        }
    }

    pub fn from_vec(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return config(format!(
                "table has {} entries, expected {}",
                values.len(),
                num_states * num_actions
            ));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_shape(&self, other: &QTable) -> bool {
        self.num_states == other.num_states && self.num_actions == other.num_actions
    }

    /// Entrywise `self − other`.
    pub fn sub(&self, other: &QTable) -> QTable {
        assert!(self.same_shape(other), "table shapes differ");
        QTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-state maximum over actions.
pub fn greedy_value(q: &QTable) -> Vec<f64> {
    q.values
        .chunks_exact(q.num_actions)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// `‖q − q_star‖∞`.
pub fn linf_error(q: &QTable, q_star: &QTable) -> f64 {
    assert!(q.same_shape(q_star), "table shapes differ");
    q.values
        .iter()
        .zip(&q_star.values)
        .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// One application of the Bellman optimality operator.
pub fn bellman_apply(mdp: &TabularMdp, q: &QTable) -> QTable {
    assert_eq!(q.num_states, mdp.num_states, "state count mismatch");
    assert_eq!(q.num_actions, mdp.num_actions, "action count mismatch");
    let value = greedy_value(q);
    let next = mdp.expect(&value);
    let values = mdp
        .reward
        .iter()
        .zip(next)
        .map(|(r, pv)| r + mdp.discount * pv)
        .collect();
    QTable {
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        values,
    }
}

/// Optimal Q-function by value iteration from the zero table.
///
/// Iteration stops once a sweep changes the table by at most
/// `tolerance·(1−γ)/γ`, which bounds the distance to the true fixed point by
/// `tolerance` and the Bellman residual of the result by `tolerance·(1−γ)`.
pub fn optimal_q(mdp: &TabularMdp, tolerance: f64, max_iters: usize) -> Result<QTable> {
    if !(tolerance > 0.0) {
        return config(format!("tolerance must be positive, got {tolerance}"));
    }
    let gamma = mdp.discount;
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    if gamma == 0.0 {
        return Ok(bellman_apply(mdp, &q));
    }
    let stop = tolerance * (1.0 - gamma) / gamma;
    let mut change = f64::INFINITY;
    for _ in 0..max_iters {
        let next = bellman_apply(mdp, &q);
        change = linf_error(&next, &q);
        q = next;
        if change <= stop {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        residual: change,
    })
}

/// Which vector norm measures the per-row gap in [`heterogeneity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeterogeneityNorm {
    /// Largest absolute entry of `P̄(·|s,a) − P^k(·|s,a)`.
    MaxEntry,
    /// Sum of absolute entries of `P̄(·|s,a) − P^k(·|s,a)`.
    L1,
}

/// K agent MDPs that differ only in their transition kernels, plus the
/// global MDP whose kernel is the entrywise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    agents: Vec<TabularMdp>,
    global: TabularMdp,
    kappa_inf: f64,
    kappa_l1: f64,
}

impl Ensemble {
    pub fn new(agents: Vec<TabularMdp>) -> Result<Self> {
        let kernel = global_kernel(&agents)?;
        let first = &agents[0];
        for (k, agent) in agents.iter().enumerate().skip(1) {
            if agent.reward != first.reward {
                return config(format!("agent {k} has a different reward table"));
            }
            if agent.discount != first.discount {
                return config(format!("agent {k} has a different discount"));
            }
        }
        let global = TabularMdp::new(
            first.num_states,
            first.num_actions,
            kernel,
            first.reward.clone(),
            first.discount,
        )?;
        let kappa_inf = kappa(&agents, &global, HeterogeneityNorm::MaxEntry);
        let kappa_l1 = kappa(&agents, &global, HeterogeneityNorm::L1);
        Ok(Self {
            agents,
            global,
            kappa_inf,
            kappa_l1,
        })
    }

    /// Builds agents from raw kernels sharing one reward table and discount.
    pub fn from_kernels(
        num_states: usize,
        num_actions: usize,
        kernels: Vec<Vec<f64>>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        let agents = kernels
            .into_iter()
            .map(|k| TabularMdp::new(num_states, num_actions, k, reward.clone(), discount))
            .collect::<Result<Vec<_>>>()?;
        Self::new(agents)
    }

    pub fn agents(&self) -> &[TabularMdp] {
        &self.agents
    }

    pub fn agent(&self, k: usize) -> &TabularMdp {
        &self.agents[k]
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn global(&self) -> &TabularMdp {
        &self.global
    }

    pub fn reward(&self) -> &[f64] {
        self.global.reward()
    }

    pub fn discount(&self) -> f64 {
        self.global.discount()
    }

    pub fn num_states(&self) -> usize {
        self.global.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.global.num_actions()
    }

    pub fn num_pairs(&self) -> usize {
        self.global.num_pairs()
    }

    pub fn kappa_inf(&self) -> f64 {
        self.kappa_inf
    }

    pub fn kappa_l1(&self) -> f64 {
        self.kappa_l1
    }

    pub fn to_doc(&self) -> EnsembleDoc {
        EnsembleDoc {
            num_states: self.num_states(),
            num_actions: self.num_actions(),
            gamma: self.discount(),
            reward: self.reward().to_vec(),
            kernels: self.agents.iter().map(|a| a.kernel.clone()).collect(),
        }
    }

    pub fn from_doc(doc: EnsembleDoc) -> Result<Self> {
        Self::from_kernels(doc.num_states, doc.num_actions, doc.kernels, doc.reward, doc.gamma)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnsembleDoc =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("ensemble json: {e}")))?;
        Self::from_doc(doc)
    }
}

/// On-disk form of an [`Ensemble`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDoc {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub reward: Vec<f64>,
    pub kernels: Vec<Vec<f64>>,
}

/// Entrywise mean of the agents' kernels.
pub fn global_kernel(agents: &[TabularMdp]) -> Result<Vec<f64>> {
    let Some(first) = agents.first() else {
        return config("ensemble needs at least one agent");
    };
    for (k, a) in agents.iter().enumerate() {
        if a.num_states != first.num_states || a.num_actions != first.num_actions {
            return config(format!(
                "agent {k} has shape ({}, {}), expected ({}, {})",
                a.num_states, a.num_actions, first.num_states, first.num_actions
            ));
        }
    }
    let scale = 1.0 / agents.len() as f64;
    let mut mean = vec![0.0; first.kernel.len()];
    for a in agents {
        for (m, p) in mean.iter_mut().zip(&a.kernel) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m *= scale);
    Ok(mean)
}

/// `sup_{k,s,a} ‖P̄(·|s,a) − P^k(·|s,a)‖` under the chosen norm.
pub fn heterogeneity(ensemble: &Ensemble, norm: HeterogeneityNorm) -> f64 {
    match norm {
        HeterogeneityNorm::MaxEntry => ensemble.kappa_inf,
        HeterogeneityNorm::L1 => ensemble.kappa_l1,
    }
}

fn kappa(agents: &[TabularMdp], global: &TabularMdp, norm: HeterogeneityNorm) -> f64 {
    let mut worst: f64 = 0.0;
    for agent in agents {
        for (a_row, g_row) in agent
            .kernel
            .chunks_exact(global.num_states)
            .zip(global.kernel.chunks_exact(global.num_states))
        {
            let gaps = a_row.iter().zip(g_row).map(|(p, q)| (q - p).abs());
            let gap = match norm {
                HeterogeneityNorm::MaxEntry => gaps.fold(0.0, f64::max),
                HeterogeneityNorm::L1 => gaps.sum(),
            };
            worst = worst.max(gap);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state(kernel: Vec<f64>, reward: Vec<f64>, gamma: f64) -> TabularMdp {
        TabularMdp::new(2, 1, kernel, reward, gamma).unwrap()
    }

    #[test]
    fn global_kernel_of_identity_and_swap() {
        let ens = Ensemble::from_kernels(
            2,
            1,
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]],
            vec![1.0, 0.0],
            0.5,
        )
        .unwrap();
        assert_eq!(ens.global().kernel(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(heterogeneity(&ens, HeterogeneityNorm::MaxEntry), 0.5);
        assert_eq!(heterogeneity(&ens, HeterogeneityNorm::L1), 1.0);
    }

    #[test]
    fn single_and_homogeneous_ensembles() {
        let k = vec![0.3, 0.7, 0.6, 0.4];
        let one = Ensemble::from_kernels(2, 1, vec![k.clone()], vec![0.0, 1.0], 0.9).unwrap();
        assert_eq!(one.global().kernel(), k.as_slice());
        let many = Ensemble::from_kernels(2, 1, vec![k.clone(); 3], vec![0.0, 1.0], 0.9).unwrap();
        for (g, p) in many.global().kernel().iter().zip(&k) {
            assert_abs_diff_eq!(g, p, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(many.kappa_inf(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(many.kappa_l1(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 0.5).unwrap();
        let b = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0], 0.5).unwrap();
        assert!(matches!(Ensemble::new(vec![a, b]), Err(Error::Config(_))));
        assert!(matches!(global_kernel(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_mdps_are_rejected() {
        assert!(TabularMdp::new(2, 1, vec![0.5, 0.6, 1.0, 0.0], vec![0.0; 2], 0.5).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 1.0, 0.0], vec![1.5, 0.0], 0.5).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 2], 1.0).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 2], 0.0).is_ok());
    }

    #[test]
    fn optimal_q_two_state_closed_form() {
        let mdp = two_state(vec![0.5; 4], vec![1.0, 0.0], 0.5);
        let q = optimal_q(&mdp, 1e-12, 10_000).unwrap();
        assert_abs_diff_eq!(q.values()[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(q.values()[1], 0.5, epsilon = 1e-12);
        assert_eq!(greedy_value(&q).len(), 2);
        // 10^4 plain sweeps land on the same point.
        let mut brute = QTable::zeros(2, 1);
        for _ in 0..10_000 {
            brute = bellman_apply(&mdp, &brute);
        }
        assert!(linf_error(&q, &brute) <= 1e-12);
    }

    #[test]
    fn optimal_q_without_discount_is_reward() {
        let mdp = two_state(vec![0.2, 0.8, 1.0, 0.0], vec![0.25, 0.75], 0.0);
        let q = optimal_q(&mdp, 1e-10, 1).unwrap();
        assert_eq!(q.values(), &[0.25, 0.75]);
        assert_eq!(bellman_apply(&mdp, &QTable::filled(2, 1, 9.0)).values(), &[0.25, 0.75]);
    }

    #[test]
    fn optimal_q_residual_and_nonconvergence() {
        let mdp = two_state(vec![0.1, 0.9, 0.7, 0.3], vec![0.4, 1.0], 0.95);
        let tol = 1e-9;
        let q = optimal_q(&mdp, tol, 100_000).unwrap();
        let residual = linf_error(&bellman_apply(&mdp, &q), &q);
        assert!(residual <= tol * (1.0 - 0.95));
        match optimal_q(&mdp, tol, 3) {
            Err(Error::NoConvergence { iters, residual }) => {
                assert_eq!(iters, 3);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
        assert!(optimal_q(&mdp, 0.0, 10).is_err());
    }

    #[test]
    fn bellman_apply_examples() {
        let mdp = two_state(vec![0.5; 4], vec![1.0, 0.0], 0.5);
        assert_eq!(bellman_apply(&mdp, &QTable::zeros(2, 1)).values(), &[1.0, 0.0]);
        let q_star = QTable::from_vec(2, 1, vec![1.5, 0.5]).unwrap();
        assert!(linf_error(&bellman_apply(&mdp, &q_star), &q_star) <= 1e-12);
    }

    #[test]
    fn greedy_value_and_linf_error() {
        let q = QTable::from_vec(2, 2, vec![0.2, 0.7, 0.9, 0.1]).unwrap();
        assert_eq!(greedy_value(&q), vec![0.7, 0.9]);
        let col = QTable::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(greedy_value(&col), vec![1.0, 2.0, 3.0]);

        let a = QTable::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let b = QTable::from_vec(2, 1, vec![1.5, 0.5]).unwrap();
        assert_eq!(linf_error(&a, &b), 1.5);
        assert_eq!(linf_error(&b, &b), 0.0);
        let gamma: f64 = 0.9;
        let ceiling = QTable::filled(2, 1, 1.0 / (1.0 - gamma));
        assert_eq!(linf_error(&QTable::zeros(2, 1), &ceiling), 1.0 / (1.0 - gamma));
    }

    #[test]
    fn json_round_trip() {
        let ens = Ensemble::from_kernels(
            2,
            2,
            vec![vec![1.0, 0.0, 0.25, 0.75, 0.0, 1.0, 0.5, 0.5]],
            vec![0.1, 0.2, 0.3, 0.4],
            0.9,
        )
        .unwrap();
        let text = ens.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["num_states", "num_actions", "gamma", "reward", "kernels"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(Ensemble::from_json(&text).unwrap(), ens);
    }
}
