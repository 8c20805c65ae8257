//! Small named instances and random instance generators.

use rand::Rng;

use crate::mdp::{RewardLaw, TabularMdp};

/// The two-step chain: one layer-1 state, two actions, action `a` leads to
/// layer-2 state `a`, and only layer-2 state 1 pays reward 1 (for any action).
pub fn twochain() -> TabularMdp {
    let t1 = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]];
    let rewards = vec![
        vec![vec![0.0, 0.0]],
        vec![vec![0.0, 0.0], vec![1.0, 1.0]],
    ];
    TabularMdp::new(vec![1, 2], 2, vec![1.0], vec![t1], rewards, RewardLaw::DeterministicMean)
        .expect("twochain is valid")
}

/// `n` states per layer, action-independent identity dynamics, uniform start.
pub fn identity_chain(n: usize, horizon: usize, num_actions: usize) -> TabularMdp {
    let eye: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|x| {
            let mut row = vec![0.0; n];
            row[x] = 1.0;
            vec![row; num_actions]
        })
        .collect();
    TabularMdp::new(
        vec![n; horizon],
        num_actions,
        vec![1.0 / n as f64; n],
        vec![eye; horizon - 1],
        vec![vec![vec![0.0; num_actions]; n]; horizon],
        RewardLaw::DeterministicMean,
    )
    .expect("identity chain is valid")
}

/// Random probability row of length `n`; with `sparsity > 0` each entry is
/// zeroed with that probability (at least one entry always survives).
pub fn random_row<R: Rng + ?Sized>(rng: &mut R, n: usize, sparsity: f64) -> Vec<f64> {
    let keep = rng.gen_range(0..n);
    let mut row: Vec<f64> = (0..n)
        .map(|i| {
            if i != keep && rng.gen::<f64>() < sparsity {
                0.0
            } else {
                rng.gen::<f64>() + 1e-3
            }
        })
        .collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

/// A random layered MDP with the given shape.
pub fn random_mdp<R: Rng + ?Sized>(
    rng: &mut R,
    states_per_layer: &[usize],
    num_actions: usize,
    sparsity: f64,
    law: RewardLaw,
) -> TabularMdp {
    let horizon = states_per_layer.len();
    let init = random_row(rng, states_per_layer[0], sparsity);
    let transitions = (0..horizon - 1)
        .map(|h| {
            (0..states_per_layer[h])
                .map(|_| {
                    (0..num_actions)
                        .map(|_| random_row(rng, states_per_layer[h + 1], sparsity))
                        .collect()
                })
                .collect()
        })
        .collect();
    let rewards = states_per_layer
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| (0..num_actions).map(|_| rng.gen::<f64>()).collect())
                .collect()
        })
        .collect();
    TabularMdp::new(states_per_layer.to_vec(), num_actions, init, transitions, rewards, law)
        .expect("random rows are normalized")
}
