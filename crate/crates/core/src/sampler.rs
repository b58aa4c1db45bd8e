//! Synchronous generative-model sampling.
//!
//! Every draw is addressed by `(master seed, agent, iteration, pair)`: the
//! agent selects a ChaCha stream and `(iteration, pair)` selects the word
//! position inside it. Draws therefore do not depend on the order in which
//! agents or iterations are simulated, nor on the number of threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::mdp::{Ensemble, TabularMdp};

/// Derives an independent 64-bit seed from `seed` and a tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Counter-based random source for successor draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Generator positioned at the first draw of `(agent, iteration)`;
    /// successive `next_u64` calls yield pairs `0, 1, 2, …`.
    fn positioned(&self, agent: usize, iteration: usize, num_pairs: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(agent as u64);
        rng.set_word_pos(iteration as u128 * num_pairs as u128 * 2);
        rng
    }

    /// The uniform variate in `[0, 1)` used for one `(agent, iteration, pair)`.
    pub fn uniform(&self, agent: usize, iteration: usize, pair: usize, num_pairs: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(agent as u64);
        rng.set_word_pos((iteration as u128 * num_pairs as u128 + pair as u128) * 2);
        to_unit(rng.next_u64())
    }
}

fn to_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverse-CDF lookup with ascending cumulative sums.
fn invert(row: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (s, &p) in row.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = s;
            if u < cum {
                return s;
            }
        }
    }
    // Rounding left the cumulative sum just under u.
    last_positive
}

/// One successor per state–action pair, drawn for agent `agent` at `iteration`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleDraw {
    pub iteration: usize,
    pub agent: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub successors: Vec<usize>,
}

pub fn sample_draw(ensemble: &Ensemble, agent: usize, iteration: usize, rng: &RngStream) -> SampleDraw {
    assert!(agent < ensemble.num_agents(), "agent {agent} out of range");
    let mdp = ensemble.agent(agent);
    let mut successors = vec![0; mdp.num_pairs()];
    fill_successors(mdp, agent, iteration, rng, &mut successors);
    SampleDraw {
        iteration,
        agent,
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        successors,
    }
}

/// Writes the successors of `(agent, iteration)` into `out` without allocating.
pub fn fill_successors(
    mdp: &TabularMdp,
    agent: usize,
    iteration: usize,
    rng: &RngStream,
    out: &mut [usize],
) {
    let pairs = mdp.num_pairs();
    assert_eq!(out.len(), pairs);
    let mut gen = rng.positioned(agent, iteration, pairs);
    for (pair, slot) in out.iter_mut().enumerate() {
        *slot = invert(mdp.row(pair), to_unit(gen.next_u64()));
    }
}

/// One-hot `(|S|·|A|) × |S|` matrix of the sampled successors.
pub fn empirical_matrix(draw: &SampleDraw) -> Vec<f64> {
    let mut m = vec![0.0; draw.successors.len() * draw.num_states];
    for (pair, &s) in draw.successors.iter().enumerate() {
        m[pair * draw.num_states + s] = 1.0;
    }
    m
}

/// `(s,a) ↦ V(successor(s,a))`, i.e. the empirical matrix applied to `value`.
pub fn apply_empirical(draw: &SampleDraw, value: &[f64]) -> Vec<f64> {
    assert_eq!(value.len(), draw.num_states);
    draw.successors.iter().map(|&s| value[s]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lower_bound_pair() -> Ensemble {
        Ensemble::from_kernels(
            2,
            1,
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]],
            vec![1.0, 0.0],
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn point_masses_are_reproduced_exactly() {
        let ens = lower_bound_pair();
        let rng = RngStream::new(17);
        for t in 0..50 {
            let id = sample_draw(&ens, 0, t, &rng);
            assert_eq!(id.successors, vec![0, 1]);
            assert_eq!(empirical_matrix(&id), vec![1.0, 0.0, 0.0, 1.0]);
            let swap = sample_draw(&ens, 1, t, &rng);
            assert_eq!(empirical_matrix(&swap), ens.agent(1).kernel());
        }
    }

    #[test]
    fn apply_empirical_examples() {
        let ens = lower_bound_pair();
        let rng = RngStream::new(3);
        let id = sample_draw(&ens, 0, 0, &rng);
        assert_eq!(apply_empirical(&id, &[1.5, 0.5]), vec![1.5, 0.5]);
        let swap = sample_draw(&ens, 1, 0, &rng);
        assert_eq!(apply_empirical(&swap, &[1.5, 0.5]), vec![0.5, 1.5]);
        assert_eq!(apply_empirical(&swap, &[2.0, 2.0]), vec![2.0, 2.0]);
    }

    #[test]
    fn draws_are_addressed_not_sequential() {
        let ens = Ensemble::from_kernels(
            3,
            1,
            vec![vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]; 2],
            vec![0.0; 3],
            0.9,
        )
        .unwrap();
        let rng = RngStream::new(99);
        let forward: Vec<_> = (0..20).map(|t| sample_draw(&ens, 1, t, &rng)).collect();
        let backward: Vec<_> = (0..20).rev().map(|t| sample_draw(&ens, 1, t, &rng)).collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a, b);
        }
        for t in 0..20 {
            for pair in 0..3 {
                let u = rng.uniform(1, t, pair, 3);
                assert_eq!(invert(ens.agent(1).row(pair), u), forward[t].successors[pair]);
            }
        }
    }

    #[test]
    fn every_empirical_row_is_one_hot() {
        let ens = Ensemble::from_kernels(2, 2, vec![vec![0.5; 8]], vec![0.0; 4], 0.5).unwrap();
        let draw = sample_draw(&ens, 0, 4, &RngStream::new(1));
        for row in empirical_matrix(&draw).chunks(2) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
        }
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_eq!(derive_seed(5, "maze"), derive_seed(5, "maze"));
        assert_ne!(derive_seed(5, "maze"), derive_seed(5, "reward"));
        assert_ne!(derive_seed(5, "maze"), derive_seed(6, "maze"));
    }
}
