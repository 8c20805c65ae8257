use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlls_core::instances::{identity_chain, random_mdp, twochain};
use rlls_core::mdp::{PolicyTable, RewardLaw, TabularMdp};
use rlls_core::oracle::{
    benchmark_bar_policy, coverability, expected_return, min_gap, occupancy, performance_difference,
    pushforward_coverability, value_iteration,
};

/// Every deterministic policy of a small instance.
fn all_policies(mdp: &TabularMdp) -> Vec<PolicyTable> {
    let slots: Vec<(usize, usize)> = (1..=mdp.horizon())
        .flat_map(|h| (0..mdp.num_states(h)).map(move |x| (h, x)))
        .collect();
    let a = mdp.num_actions();
    let total = a.pow(slots.len() as u32);
    (0..total)
        .map(|mut code| {
            let mut acts: Vec<Vec<usize>> = (1..=mdp.horizon()).map(|h| vec![0; mdp.num_states(h)]).collect();
            for &(h, x) in &slots {
                acts[h - 1][x] = code % a;
                code /= a;
            }
            PolicyTable::from_actions(&acts, a)
        })
        .collect()
}

fn tiny(seed: u64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.gen_range(1..=3);
    let states: Vec<usize> = (0..horizon).map(|_| rng.gen_range(1..=2)).collect();
    let actions = rng.gen_range(1..=2);
    random_mdp(&mut rng, &states, actions, 0.4, RewardLaw::BernoulliMean)
}

#[test]
fn value_iteration_on_twochain() {
    let mdp = twochain();
    let sol = value_iteration(&mdp);
    assert_eq!(sol.q.row(1, 0), &[0.0, 1.0]);
    assert_eq!(sol.v.get(1, 0), 1.0);
    assert_eq!(sol.policy.action(1, 0), 1);
    assert_eq!(sol.q.greedy(), sol.policy);
}

#[test]
fn zero_rewards_pick_action_zero() {
    let mdp = identity_chain(3, 3, 2);
    let sol = value_iteration(&mdp);
    assert!(sol.q.0.iter().flatten().flatten().all(|&q| q == 0.0));
    assert!(sol.policy.actions().iter().flatten().all(|&a| a == 0));
}

#[test]
fn value_iteration_beats_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mdp = random_mdp(&mut rng, &[1, 2, 1, 1], 3, 0.0, RewardLaw::BernoulliMean);
    let best = all_policies(&mdp)
        .iter()
        .map(|p| expected_return(&mdp, p))
        .fold(f64::NEG_INFINITY, f64::max);
    let sol = value_iteration(&mdp);
    assert!((sol.value(&mdp) - best).abs() < 1e-12);
}

#[test]
fn policy_eval_examples() {
    let mdp = twochain();
    let sol = value_iteration(&mdp);
    assert_eq!(expected_return(&mdp, &sol.policy), 1.0);
    assert!((expected_return(&mdp, &PolicyTable::uniform(&mdp)) - 0.5).abs() < 1e-15);
    for seed in 0..20 {
        let mdp = tiny(seed);
        let occ = occupancy(&mdp, &PolicyTable::uniform(&mdp));
        for h in 1..=mdp.horizon() {
            assert!((occ.state(h).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn coefficient_examples() {
    let mdp = twochain();
    assert_eq!(coverability(&mdp).per_layer, vec![2.0, 4.0]);
    assert_eq!(pushforward_coverability(&mdp).max, 2.0);
    assert_eq!(pushforward_coverability(&identity_chain(4, 3, 2)).max, 4.0);
}

#[test]
fn gap_examples() {
    let g = min_gap(&identity_chain(2, 2, 2));
    assert!(!g.unique);
    // Both actions at layer 2 of twochain pay the same reward.
    let g = min_gap(&twochain());
    assert!(!g.unique && g.delta == 0.0);
    let rows = vec![vec![vec![1.0, 0.4]]; 1];
    let mdp = TabularMdp::new(vec![1], 2, vec![1.0], vec![], rows, RewardLaw::DeterministicMean).unwrap();
    let g = min_gap(&mdp);
    assert!(g.unique && (g.delta - 0.6).abs() < 1e-12);
}

#[test]
fn benchmark_examples() {
    let mdp = twochain();
    let b = benchmark_bar_policy(&mdp, 0.2, &[0.25, 0.25]);
    assert_eq!(b.policy.action(1, 0), 1);
    let coarse = benchmark_bar_policy(&mdp, 2.5, &[0.25, 0.25]);
    assert!(coarse.policy.actions().iter().flatten().all(|&a| a == 0));
}

#[test]
fn performance_difference_examples() {
    let mdp = twochain();
    let star = value_iteration(&mdp).policy;
    let zero = PolicyTable::constant(&mdp, 0);
    assert_eq!(performance_difference(&mdp, &star, &star), 0.0);
    assert!((performance_difference(&mdp, &star, &zero) - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn coverability_matches_policy_enumeration(seed in 0u64..500) {
        let mdp = tiny(seed);
        let policies = all_policies(&mdp);
        let occs: Vec<_> = policies.iter().map(|p| occupancy(&mdp, p)).collect();
        let cov = coverability(&mdp);
        for h in 1..=mdp.horizon() {
            let mut total = 0.0;
            for x in 0..mdp.num_states(h) {
                for a in 0..mdp.num_actions() {
                    total += occs.iter().map(|o| o.0[h - 1][x][a]).fold(0.0, f64::max);
                }
            }
            prop_assert!((total - cov.per_layer[h - 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn structural_bounds(seed in 0u64..500) {
        let mdp = tiny(seed);
        let a = mdp.num_actions() as f64;
        let cov = coverability(&mdp);
        let push = pushforward_coverability(&mdp);
        let widest = mdp.states_per_layer().iter().copied().max().unwrap() as f64;
        prop_assert!(cov.max <= widest * a + 1e-9);
        prop_assert!(cov.max <= push.max * a + 1e-9);
        let sol = value_iteration(&mdp);
        prop_assert_eq!(sol.q.greedy(), sol.policy.clone());
        let u = PolicyTable::uniform(&mdp);
        let lhs = expected_return(&mdp, &sol.policy) - expected_return(&mdp, &u);
        prop_assert!((performance_difference(&mdp, &sol.policy, &u) - lhs).abs() < 1e-9);
        prop_assert!((occupancy(&mdp, &u).expected_return(&mdp) - expected_return(&mdp, &u)).abs() < 1e-9);
    }
}
