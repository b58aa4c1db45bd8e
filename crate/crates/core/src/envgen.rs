//! Environment generators: random maze ensembles, Bernoulli rewards and the
//! two-state identity/swap construction.
//!
//! A maze is a square grid whose cells are the states. Each agent draws its
//! own wall layout (every cell independently with probability
//! `wall_density`). Action `a` moves to the intended neighbour with mass
//! `1 − 3·drift` and to each of the three other neighbours with mass `drift`.
//! A move that leaves the grid or enters a wall cell stays put, so agents
//! differ both in probability values and in the supports of their rows.

use rand::distributions::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::mdp::Ensemble;
use crate::sampler::derive_seed;

/// Actions in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Up,
    Right,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Up, Direction::Right, Direction::Down];

    fn offset(self) -> (isize, isize) {
        match self {
            Direction::Left => (0, -1),
            Direction::Up => (-1, 0),
            Direction::Right => (0, 1),
            Direction::Down => (1, 0),
        }
    }
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
    /// Mass sent to each non-intended direction.
    #[serde(default = "default_drift")]
    pub drift: f64,
    #[serde(default = "default_wall_density")]
    pub wall_density: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MazeSpec {
    fn default() -> Self {
        Self {
            grid_side: default_grid_side(),
            drift: default_drift(),
            wall_density: default_wall_density(),
            seed: 0,
        }
    }
}

impl MazeSpec {
    pub fn num_states(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states() * Direction::ALL.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 {
            return config(format!("grid_side must be at least 2, got {}", self.grid_side));
        }
        if !(0.0..=1.0).contains(&self.drift) || 3.0 * self.drift > 1.0 {
            return config(format!(
                "drift {} cannot be normalized: need 0 <= 3*drift <= 1",
                self.drift
            ));
        }
        if !(0.0..=1.0).contains(&self.wall_density) {
            return config(format!("wall_density {} outside [0, 1]", self.wall_density));
        }
        Ok(())
    }

    /// Wall layout of agent `agent`, one flag per cell.
    pub fn walls(&self, agent: usize) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("walls/{agent}")));
        (0..self.num_states())
            .map(|_| rng.gen_bool(self.wall_density))
            .collect()
    }

    /// Transition kernel for a given wall layout.
    pub fn kernel(&self, walls: &[bool]) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.grid_side;
        let states = self.num_states();
        if walls.len() != states {
            return config(format!("wall layout has {} cells, expected {states}", walls.len()));
        }
        let target = |s: usize, d: Direction| -> usize {
            let (dr, dc) = d.offset();
            let r = (s / n) as isize + dr;
            let c = (s % n) as isize + dc;
            if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
                return s;
            }
            let next = r as usize * n + c as usize;
            if walls[next] {
                s
            } else {
                next
            }
        };
        let intended = 1.0 - 3.0 * self.drift;
        let mut kernel = vec![0.0; states * Direction::ALL.len() * states];
        for s in 0..states {
            for (a, &action) in Direction::ALL.iter().enumerate() {
                let row = &mut kernel[(s * 4 + a) * states..(s * 4 + a + 1) * states];
                for &d in &Direction::ALL {
                    let mass = if d == action { intended } else { self.drift };
                    row[target(s, d)] += mass;
                }
            }
        }
        Ok(kernel)
    }
}

/// `num_agents` mazes with independently drawn walls, sharing `reward` and `gamma`.
pub fn make_maze_ensemble(
    spec: &MazeSpec,
    num_agents: usize,
    reward: &[f64],
    gamma: f64,
) -> Result<Ensemble> {
    if num_agents == 0 {
        return config("num_agents must be at least 1");
    }
    spec.validate()?;
    let kernels = (0..num_agents)
        .map(|k| spec.kernel(&spec.walls(k)))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_kernels(spec.num_states(), 4, kernels, reward.to_vec(), gamma)
}

/// Agent 0's maze copied to every agent.
pub fn make_homogeneous_ensemble(
    spec: &MazeSpec,
    num_agents: usize,
    reward: &[f64],
    gamma: f64,
) -> Result<Ensemble> {
    if num_agents == 0 {
        return config("num_agents must be at least 1");
    }
    let kernel = spec.kernel(&spec.walls(0))?;
    Ensemble::from_kernels(
        spec.num_states(),
        4,
        vec![kernel; num_agents],
        reward.to_vec(),
        gamma,
    )
}

/// Independent 0/1 rewards with success probability `p`.
pub fn make_bernoulli_reward(seed: u64, p: f64, size: usize) -> Result<Vec<f64>> {
    let dist = Bernoulli::new(p).or_else(|_| config(format!("probability {p} outside [0, 1]")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "reward"));
    Ok((0..size)
        .map(|_| if dist.sample(&mut rng) { 1.0 } else { 0.0 })
        .collect())
}

/// Two states, one action, an even number of agents alternating between the
/// identity kernel and the swap kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundSpec {
    pub num_agents: usize,
    pub reward: [f64; 2],
    pub gamma: f64,
}

impl LowerBoundSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 || self.num_agents % 2 != 0 {
            return config(format!(
                "the construction needs an even number of agents, got {}",
                self.num_agents
            ));
        }
        let [r0, r1] = self.reward;
        if r0 == r1 || r0 + r1 == 0.0 {
            return config(format!(
                "reward ({r0}, {r1}) is not in general position: need r0 != r1 and r0 + r1 != 0"
            ));
        }
        Ok(())
    }
}

pub const IDENTITY_KERNEL: [f64; 4] = [1.0, 0.0, 0.0, 1.0];
pub const SWAP_KERNEL: [f64; 4] = [0.0, 1.0, 1.0, 0.0];

pub fn make_lower_bound_ensemble(spec: &LowerBoundSpec) -> Result<Ensemble> {
    spec.validate()?;
    let kernels = (0..spec.num_agents)
        .map(|k| {
            // Agents are 1-indexed in the construction: odd ones keep the identity.
            if k % 2 == 0 {
                IDENTITY_KERNEL.to_vec()
            } else {
                SWAP_KERNEL.to_vec()
            }
        })
        .collect();
    Ensemble::from_kernels(2, 1, kernels, spec.reward.to_vec(), spec.gamma)
}
