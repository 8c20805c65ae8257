use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlls_core::backup::{greedy_action, phat, rounded_action, BackupParams};
use rlls_core::classes::{FinitePolicyClass, FiniteQClass, FiniteVClass};
use rlls_core::imitation::{behavior_cloning, erm, mistakes, CloneParams};
use rlls_core::instances::{identity_chain, random_mdp, twochain};
use rlls_core::mdp::{LocalSimSession, PolicyTable, RewardLaw, TabularMdp};
use rlls_core::oracle::{expected_return, value_iteration, QTable, VTable};
use rlls_core::rvfs::{
    check_recursion_order, confidence_member, exact_greedy_policy, least_squares, rvfs, rvfs_bc, Overrides,
    RvfsParams, RvfsState, TraceKind,
};
use rlls_core::rvfs_exo::{rvfs_exo, BoostConfig};
use rlls_core::simgolf::{confidence_update, optimistic_select, run_simgolf, ConfidenceState, SimGolfParams};

fn bandit(means: &[f64], law: RewardLaw) -> TabularMdp {
    TabularMdp::new(vec![1], means.len(), vec![1.0], vec![], vec![vec![means.to_vec()]], law).unwrap()
}

#[test]
fn phat_is_exact_without_noise() {
    let mdp = Arc::new(bandit(&[0.3, 0.7], RewardLaw::DeterministicMean));
    let mut s = LocalSimSession::new(mdp, 0);
    s.start_episode();
    let p = BackupParams::new(0.2, 0.1).unwrap();
    assert!((phat(&mut s, 1, None, 0, 1, &p).unwrap() - 0.7).abs() < 1e-12);
}

#[test]
fn phat_concentrates_on_bernoulli() {
    let mdp = Arc::new(bandit(&[0.5], RewardLaw::BernoulliMean));
    let mut s = LocalSimSession::new(mdp, 4);
    s.start_episode();
    let p = BackupParams::new(0.1, 0.01).unwrap();
    assert_eq!(p.n_sim, 922);
    let good = (0..200)
        .filter(|_| (phat(&mut s, 1, None, 0, 0, &p).unwrap() - 0.5).abs() <= 0.1)
        .count();
    assert!(good >= 198);
}

#[test]
fn greedy_action_examples() {
    let mdp = Arc::new(twochain());
    let vstar = value_iteration(&mdp).v;
    let mut s = LocalSimSession::new(Arc::clone(&mdp), 1);
    s.start_episode();
    let p = BackupParams::new(0.5, 0.5).unwrap();
    let before = s.ledger();
    assert_eq!(greedy_action(&mut s, 1, vstar.next(1), 0, &p).unwrap(), 1);
    let after = s.ledger();
    assert_eq!(after.transitions_sampled - before.transitions_sampled, 2 * p.n_sim);
    assert_eq!(after.resets - before.resets, 2 * p.n_sim);

    let flat = Arc::new(bandit(&[0.4, 0.4, 0.4], RewardLaw::DeterministicMean));
    let mut s = LocalSimSession::new(flat, 1);
    s.start_episode();
    assert_eq!(greedy_action(&mut s, 1, None, 0, &p).unwrap(), 0);
}

#[test]
fn rounded_action_examples() {
    let mdp = Arc::new(bandit(&[0.3, 0.7], RewardLaw::DeterministicMean));
    let mut s = LocalSimSession::new(mdp, 0);
    s.start_episode();
    let p = BackupParams::new(0.04, 0.1).unwrap().with_n_sim(3);
    assert_eq!(rounded_action(&mut s, 1, None, 0, &p, 0.25, 0.2).unwrap(), 1);
    let close = Arc::new(bandit(&[0.31, 0.35], RewardLaw::DeterministicMean));
    let mut s = LocalSimSession::new(close, 0);
    s.start_episode();
    assert_eq!(rounded_action(&mut s, 1, None, 0, &p, 0.25, 0.2).unwrap(), 0);
}

#[test]
fn phat_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mdp = Arc::new(random_mdp(&mut rng, &[2, 3], 2, 0.0, RewardLaw::BernoulliMean));
    let f = [0.2, 1.4, 0.9];
    let mut s = LocalSimSession::new(mdp, 2);
    let x = s.start_episode();
    let p = BackupParams::new(0.5, 0.5).unwrap();
    for a in 0..2 {
        let v = phat(&mut s, 1, Some(&f), x, a, &p).unwrap();
        assert!((0.0..=2.4).contains(&v));
    }
}

fn twochain_q_bad() -> QTable {
    let mut bad = value_iteration(&twochain()).q;
    bad.0[0] = vec![vec![1.0, 0.0]];
    bad
}

#[test]
fn simgolf_singleton_and_ledger() {
    let mdp = Arc::new(twochain());
    let class = FiniteQClass::hand_built(vec![value_iteration(&mdp).q]).unwrap();
    let p = SimGolfParams::with_counts(12, 4, 0.1, 2, 1);
    let mut s = LocalSimSession::new(Arc::clone(&mdp), 3);
    let out = run_simgolf(&mut s, &class, &p).unwrap();
    assert!(out.diagnostics.iter().all(|r| r.active_set_size == 1 && r.j_pi_t_exact == 1.0));
    assert_eq!(out.ledger.transitions_sampled, 12 * 2 + 12 * 2 * 4);
}

#[test]
fn simgolf_elimination_time_follows_beta() {
    // Per-iteration squared residual of Q_bad on the path of pi* is exactly 1
    // on this noise-free chain, so it leaves once the sum exceeds beta.
    let mdp = Arc::new(twochain());
    let class = FiniteQClass::hand_built(vec![value_iteration(&mdp).q, twochain_q_bad()]).unwrap();
    let p = SimGolfParams::with_counts(400, 5, 0.1, 2, 2);
    let mut s = LocalSimSession::new(Arc::clone(&mdp), 0);
    let out = run_simgolf(&mut s, &class, &p).unwrap();
    let left = out.diagnostics.iter().position(|r| r.active_set_size == 1).unwrap() as u64 + 1;
    assert_eq!(left, p.beta.floor() as u64 + 1);
    let sizes: Vec<usize> = out.diagnostics.iter().map(|r| r.active_set_size).collect();
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn residual_sums_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q: Vec<QTable> = (0..4)
        .map(|_| QTable((0..2).map(|_| (0..2).map(|_| (0..2).map(|_| rng.gen::<f64>()).collect()).collect()).collect()))
        .collect();
    let class = FiniteQClass::hand_built(q.clone()).unwrap();
    let mut st = ConfidenceState::new(4, 2, 0.3);
    let mut reference = vec![[0.0f64; 2]; 4];
    for _ in 0..5 {
        let path = vec![(rng.gen_range(0..2), rng.gen_range(0..2)), (rng.gen_range(0..2), rng.gen_range(0..2))];
        let draws = vec![
            (0..3).map(|_| (rng.gen::<f64>(), Some(rng.gen_range(0..2)))).collect::<Vec<_>>(),
            (0..3).map(|_| (rng.gen::<f64>(), None)).collect::<Vec<_>>(),
        ];
        confidence_update(&mut st, &class, &path, &draws, 3).unwrap();
        for (g, acc) in q.iter().zip(reference.iter_mut()) {
            for h in 0..2 {
                let (x, a) = path[h];
                let mut target = 0.0;
                for &(r, y) in &draws[h] {
                    target += r;
                    if let Some(y) = y {
                        target += g.0[h + 1][y].iter().copied().fold(f64::MIN, f64::max);
                    }
                }
                target /= 3.0;
                acc[h] += (g.0[h][x][a] - target).powi(2);
            }
        }
    }
    for (gi, acc) in reference.iter().enumerate() {
        for h in 0..2 {
            assert!((st.residuals[gi][h] - acc[h]).abs() < 1e-12);
        }
        assert_eq!(st.active[gi], acc.iter().all(|&r| r <= 0.3));
    }
    assert!(confidence_update(&mut st, &class, &[(0, 0)], &[vec![(0.0, None); 2]], 3).is_err());
}

proptest! {
    #[test]
    fn optimistic_select_matches_scan(scores in prop::collection::vec(0u8..4, 1..100), mask in prop::collection::vec(any::<bool>(), 100)) {
        let mut st = ConfidenceState::new(scores.len(), 1, 1.0);
        for (i, &sc) in scores.iter().enumerate() {
            st.optimism[i] = sc as f64;
            st.active[i] = mask[i];
        }
        let scan = (0..scores.len())
            .filter(|&i| mask[i])
            .fold(None::<usize>, |best, i| match best {
                Some(b) if scores[b] >= scores[i] => Some(b),
                _ => Some(i),
            });
        match scan {
            Some(b) => prop_assert_eq!(optimistic_select(&st).unwrap(), b),
            None => prop_assert!(optimistic_select(&st).is_err()),
        }
    }
}

fn small_ov() -> Overrides {
    Overrides {
        scale: 1e-3,
        n_sim: Some(16),
        n_test: Some(8),
        n_reg: Some(8),
        n_est: Some(4),
        trace_passes: true,
        ..Overrides::default()
    }
}

fn twochain_v_class() -> (Arc<TabularMdp>, FiniteVClass) {
    let mdp = Arc::new(twochain());
    let vstar = value_iteration(&mdp).v;
    let mut bad = vstar.clone();
    bad.0[1] = vec![1.0, 0.0];
    (mdp, FiniteVClass::hand_built(vec![bad, vstar]).unwrap())
}

#[test]
fn rvfs_twochain_recovers_pi_star() {
    let (mdp, class) = twochain_v_class();
    let params = RvfsParams::greedy(0.25, 0.1, 2.0, 2, 2, class.len(), &small_ov()).unwrap();
    for seed in 0..50 {
        let mut s = LocalSimSession::new(Arc::clone(&mdp), seed);
        let state = rvfs(&mut s, 0, RvfsState::new(2, class.len()), &class, &params).unwrap();
        let pi = exact_greedy_policy(&mdp, &state.value_table(&class));
        assert_eq!(pi.action(1, 0), 1, "seed {seed}");
        assert!(state.core_sets.iter().all(|c| c.len() as u64 <= params.m));
        assert!(check_recursion_order(&state.trace));
    }
}

#[test]
fn rvfs_single_layer_singleton() {
    let mdp = Arc::new(bandit(&[0.2, 0.9], RewardLaw::DeterministicMean));
    let class = FiniteVClass::hand_built(vec![VTable(vec![vec![0.9]])]).unwrap();
    let params = RvfsParams::greedy(0.25, 0.1, 1.0, 1, 2, 1, &small_ov()).unwrap();
    let mut s = LocalSimSession::new(mdp, 0);
    let state = rvfs(&mut s, 1, RvfsState::new(1, 1), &class, &params).unwrap();
    assert_eq!(s.ledger().transitions_sampled, 0);
    let refits = state.trace.iter().filter(|e| e.kind == TraceKind::Refit).count();
    assert_eq!(refits, 1);
    assert!(state.core_sets[1].is_empty());
}

#[test]
fn confidence_and_regression_reference() {
    let v_hat = [0.2, 0.8, 0.5];
    let data = vec![vec![(0, 0.1), (2, 0.6)], vec![(1, 0.7)]];
    let f = [0.3, 0.8, 0.1];
    let direct = ((0.2f64 - 0.3).powi(2) + (0.5f64 - 0.1).powi(2)) / 2.0 + 0.0;
    assert_eq!(confidence_member(&v_hat, &f, &data, 2, direct + 1e-12), true);
    assert_eq!(confidence_member(&v_hat, &f, &data, 2, direct - 1e-6), false);
    assert!(confidence_member(&v_hat, &f, &[], 2, 0.0));

    let class = FiniteVClass::hand_built(vec![
        VTable(vec![vec![0.0, 0.0, 0.0]]),
        VTable(vec![vec![0.1, 0.7, 0.6]]),
        VTable(vec![vec![0.1, 0.7, 0.6]]),
    ])
    .unwrap();
    assert_eq!(least_squares(&class, 1, &data), 1);
}

#[test]
fn rvfs_bc_on_twochain() {
    let (mdp, values) = twochain_v_class();
    let star = value_iteration(&mdp).policy;
    let policies = FinitePolicyClass::new(vec![PolicyTable::constant(&mdp, 0), star]).unwrap();
    let eps = 0.25;
    let mut good = 0;
    for seed in 0..50 {
        let mut s = LocalSimSession::new(Arc::clone(&mdp), seed);
        let out = rvfs_bc(&mut s, &policies, &values, eps, 0.1, 2.0, &small_ov(), Some(20)).unwrap();
        if 1.0 - expected_return(&mdp, &out.policy) <= 2.0 * eps {
            good += 1;
        }
        let total = s.ledger();
        assert_eq!(total, out.clone.ledger);
        let n_bc = out.clone.corpus.len() as u64;
        assert_eq!(total.episodes_started - out.rvfs_ledger.episodes_started, n_bc);
        let per_step = 1 + 2 * out.params.backup.n_sim;
        assert_eq!(total.transitions_sampled - out.rvfs_ledger.transitions_sampled, n_bc * 2 * per_step);
    }
    assert!(good >= 45);
}

#[test]
fn exo_degenerate_and_boost_counts() {
    let cfg = BoostConfig::new(0.3, 0.1, 3, 2, 2, 32).unwrap();
    assert_eq!(cfg.n_boost, 22);
    assert_eq!(cfg.i_opt, 1);
    assert!(BoostConfig::new(0.9, 0.1, 4, 3, 4, 32).is_err());

    let mdp = Arc::new(identity_chain(2, 2, 2));
    let class = FiniteVClass::hand_built(vec![VTable(vec![vec![0.0; 2]; 2])]).unwrap();
    let params = RvfsParams::rounded(0.9, 0.1, 1.0, 2, 2, 2, 1, vec![0.25, 0.25], &small_ov()).unwrap();
    let mut s = LocalSimSession::new(mdp, 0);
    let state = rvfs_exo(&mut s, 0, RvfsState::new(2, 1), &class, &params).unwrap();
    assert!(state.core_sets[1..].iter().all(|c| c.is_empty()));
    let greedy = RvfsParams::greedy(0.25, 0.1, 2.0, 2, 2, 1, &small_ov()).unwrap();
    assert!(rvfs_exo(&mut s, 0, RvfsState::new(2, 1), &class, &greedy).is_err());
}

#[test]
fn cloning_examples() {
    let mdp = Arc::new(twochain());
    let star = value_iteration(&mdp).policy;
    let single = FinitePolicyClass::new(vec![star.clone()]).unwrap();
    let p = CloneParams::new(0.2, 0.1, 2, 1).unwrap();
    let mut s = LocalSimSession::new(Arc::clone(&mdp), 0);
    let out = behavior_cloning(&mut s, &single, &mut star.clone(), &p).unwrap();
    assert_eq!(mistakes(&out.policy, &out.corpus), 0);

    let anti = PolicyTable::constant(&mdp, 0);
    let pair = FinitePolicyClass::new(vec![anti, star.clone()]).unwrap();
    let p1 = p.capped(Some(1));
    let mut s = LocalSimSession::new(Arc::clone(&mdp), 0);
    let out = behavior_cloning(&mut s, &pair, &mut star.clone(), &p1).unwrap();
    assert_eq!(out.selected, 1);
    assert_eq!(out.corpus.len(), 1);
}

#[test]
fn erm_is_monotone_on_growing_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mdp = Arc::new(random_mdp(&mut rng, &[2, 2, 2], 2, 0.0, RewardLaw::BernoulliMean));
    let expert = value_iteration(&mdp).policy;
    let members: Vec<PolicyTable> = (0..8)
        .map(|_| {
            let acts: Vec<Vec<usize>> = (0..3).map(|_| (0..2).map(|_| rng.gen_range(0..2)).collect()).collect();
            PolicyTable::from_actions(&acts, 2)
        })
        .collect();
    let class = FinitePolicyClass::new(members).unwrap();
    let mut s = LocalSimSession::new(Arc::clone(&mdp), 1);
    let mut corpus = Vec::new();
    let mut prev = None;
    for _ in 0..30 {
        corpus.push(s.run_episode(&mut expert.clone()).unwrap());
        let (best, counts) = erm(&class, &corpus);
        assert_eq!(counts[best], *counts.iter().min().unwrap());
        if let Some((old_best, old_counts)) = prev.take() {
            let old_counts: Vec<u64> = old_counts;
            for (i, &c) in old_counts.iter().enumerate() {
                if c > old_counts[old_best] {
                    assert!(counts[i] >= counts[best]);
                }
            }
        }
        prev = Some((best, counts));
    }
}
