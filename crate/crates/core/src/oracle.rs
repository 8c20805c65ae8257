//! Exact dynamic programming on a [`TabularMdp`].
//!
//! Everything here is a pure function of its inputs and is used as ground
//! truth for the sampling-based algorithms.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::mdp::{PolicyTable, TabularMdp};
use crate::TIE_TOL;

/// Per-layer `Q_h[x][a]`, stored with layer `h` at index `h - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable(pub Vec<Vec<Vec<f64>>>);

/// Per-layer `V_h[x]`, stored with layer `h` at index `h - 1`. `V_{H+1} = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VTable(pub Vec<Vec<f64>>);

impl QTable {
    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.0[h - 1][x][a]
    }

    pub fn row(&self, h: usize, x: usize) -> &[f64] {
        &self.0[h - 1][x]
    }

    /// Greedy closure `V_h(x) = max_a Q_h(x, a)`.
    pub fn max_values(&self) -> VTable {
        VTable(
            self.0
                .iter()
                .map(|l| l.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect())
                .collect(),
        )
    }

    /// Deterministic greedy policy with smallest-index ties.
    pub fn greedy(&self) -> PolicyTable {
        let actions: Vec<Vec<usize>> =
            self.0.iter().map(|l| l.iter().map(|r| argmax(r)).collect()).collect();
        let num_actions = self.0[0][0].len();
        PolicyTable::from_actions(&actions, num_actions)
    }
}

impl VTable {
    pub fn get(&self, h: usize, x: usize) -> f64 {
        self.0[h - 1][x]
    }

    pub fn layer(&self, h: usize) -> &[f64] {
        &self.0[h - 1]
    }

    /// `V_{h+1}`, or `None` past the horizon.
    pub fn next(&self, h: usize) -> Option<&[f64]> {
        self.0.get(h).map(Vec::as_slice)
    }
}

/// Smallest index whose value is within [`TIE_TOL`] of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&v| v >= max - TIE_TOL).unwrap_or(0)
}

/// Smallest index attaining the maximum of an integer row.
pub fn argmax_int(row: &[i64]) -> usize {
    let max = row.iter().copied().max().unwrap_or(0);
    row.iter().position(|&v| v == max).unwrap_or(0)
}

/// The rounding bin `ceil(q / eps + zeta)`.
///
/// Values within a relative `1e-9` of an integer are treated as that integer
/// so that equal backups computed along different floating-point paths land
/// in the same bin.
pub fn rounding_bin(q: f64, eps: f64, zeta: f64) -> i64 {
    let y = q / eps + zeta;
    let r = y.round();
    if (y - r).abs() <= 1e-9 * y.abs().max(1.0) {
        r as i64
    } else {
        y.ceil() as i64
    }
}

fn backup_layer(mdp: &TabularMdp, h: usize, next: Option<&[f64]>) -> Vec<Vec<f64>> {
    (0..mdp.num_states(h))
        .map(|x| (0..mdp.num_actions()).map(|a| mdp.backup(h, x, a, next)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    pub q: QTable,
    pub v: VTable,
    pub policy: PolicyTable,
}

impl OptimalSolution {
    /// `J(pi*) = sum_x init(x) V*_1(x)`.
    pub fn value(&self, mdp: &TabularMdp) -> f64 {
        dot(mdp.init_dist(), self.v.layer(1))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backward induction `Q*_h = T_h[Q*_{h+1}]`.
pub fn value_iteration(mdp: &TabularMdp) -> OptimalSolution {
    let horizon = mdp.horizon();
    let mut q = vec![Vec::new(); horizon];
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); horizon];
    for h in (1..=horizon).rev() {
        let next = if h < horizon { Some(v[h].as_slice()) } else { None };
        let layer = backup_layer(mdp, h, next);
        v[h - 1] = layer.iter().map(|r| r[argmax(r)]).collect();
        q[h - 1] = layer;
    }
    let q = QTable(q);
    let policy = q.greedy();
    OptimalSolution { q, v: VTable(v), policy }
}

/// Exact `Q^pi` and `V^pi` by backward recursion.
pub fn policy_eval(mdp: &TabularMdp, policy: &PolicyTable) -> (QTable, VTable) {
    let horizon = mdp.horizon();
    let mut q = vec![Vec::new(); horizon];
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); horizon];
    for h in (1..=horizon).rev() {
        let next = if h < horizon { Some(v[h].as_slice()) } else { None };
        let layer = backup_layer(mdp, h, next);
        v[h - 1] = layer.iter().enumerate().map(|(x, r)| dot(policy.probs(h, x), r)).collect();
        q[h - 1] = layer;
    }
    (QTable(q), VTable(v))
}

/// `J(pi)`.
pub fn expected_return(mdp: &TabularMdp, policy: &PolicyTable) -> f64 {
    let (_, v) = policy_eval(mdp, policy);
    dot(mdp.init_dist(), v.layer(1))
}

/// State-action occupancies `d_h[x][a]`, layer `h` at index `h - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occupancy(pub Vec<Vec<Vec<f64>>>);

impl Occupancy {
    /// State marginal `d_h(x) = sum_a d_h(x, a)`.
    pub fn state(&self, h: usize) -> Vec<f64> {
        self.0[h - 1].iter().map(|r| r.iter().sum()).collect()
    }

    /// `J(pi) = sum_h sum_{x,a} d_h(x,a) R_h(x,a)`.
    pub fn expected_return(&self, mdp: &TabularMdp) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.iter()
                    .enumerate()
                    .map(|(x, r)| r.iter().enumerate().map(|(a, d)| d * mdp.reward_mean(i + 1, x, a)).sum::<f64>())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Forward recursion for `d^pi`.
pub fn occupancy(mdp: &TabularMdp, policy: &PolicyTable) -> Occupancy {
    let horizon = mdp.horizon();
    let mut out = Vec::with_capacity(horizon);
    let mut state = mdp.init_dist().to_vec();
    for h in 1..=horizon {
        let layer: Vec<Vec<f64>> = state
            .iter()
            .enumerate()
            .map(|(x, &p)| policy.probs(h, x).iter().map(|pa| p * pa).collect())
            .collect();
        if h < horizon {
            let mut next = vec![0.0; mdp.num_states(h + 1)];
            for (x, row) in layer.iter().enumerate() {
                for (a, &d) in row.iter().enumerate() {
                    if d > 0.0 {
                        let t = mdp.next_dist(h, x, a).expect("h < H");
                        next.iter_mut().zip(t).for_each(|(n, p)| *n += d * p);
                    }
                }
            }
            state = next;
        }
        out.push(layer);
    }
    Occupancy(out)
}

/// `sup_pi P^pi[x_h = x]` for every `x` in layer `h`.
pub fn max_reachability(mdp: &TabularMdp, h: usize) -> Vec<f64> {
    (0..mdp.num_states(h))
        .map(|target| {
            let mut w = vec![0.0; mdp.num_states(h)];
            w[target] = 1.0;
            for k in (1..h).rev() {
                w = (0..mdp.num_states(k))
                    .map(|y| {
                        (0..mdp.num_actions())
                            .map(|a| dot(mdp.next_dist(k, y, a).expect("k < h"), &w))
                            .fold(0.0, f64::max)
                    })
                    .collect();
            }
            dot(mdp.init_dist(), &w)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub per_layer: Vec<f64>,
    pub max: f64,
}

impl Coefficient {
    fn from_layers(per_layer: Vec<f64>) -> Self {
        let max = per_layer.iter().copied().fold(0.0, f64::max);
        Self { per_layer, max }
    }
}

/// Coverability `C_cov`, per layer `sum_{x,a} sup_pi d_h^pi(x, a)`.
///
/// Since a policy can pick any action once it reaches `x`, the inner sup is the
/// max-reachability of `x`, so each layer equals `A * sum_x reach_h(x)`.
pub fn coverability(mdp: &TabularMdp) -> Coefficient {
    Coefficient::from_layers(
        (1..=mdp.horizon())
            .map(|h| mdp.num_actions() as f64 * max_reachability(mdp, h).iter().sum::<f64>())
            .collect(),
    )
}

/// Pushforward coverability `C_push`, per layer the sum of column maxima of
/// the incoming kernel. Layer 1 uses the initial distribution.
pub fn pushforward_coverability(mdp: &TabularMdp) -> Coefficient {
    let per_layer = (1..=mdp.horizon())
        .map(|h| {
            let prev = h - 1;
            (0..mdp.num_states(h))
                .map(|y| {
                    let mut best: f64 = 0.0;
                    for x in 0..mdp.num_states(prev) {
                        for a in 0..mdp.num_actions() {
                            best = best.max(mdp.next_dist(prev, x, a).expect("prev < H")[y]);
                        }
                    }
                    best
                })
                .sum()
        })
        .collect();
    Coefficient::from_layers(per_layer)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Smallest margin between the optimal and the best other action;
    /// infinite with a single action.
    pub delta: f64,
    pub unique: bool,
}

/// Minimum suboptimality gap of `Q*` over all `(h, x)`.
pub fn min_gap(mdp: &TabularMdp) -> GapReport {
    let sol = value_iteration(mdp);
    let mut delta = f64::INFINITY;
    for layer in &sol.q.0 {
        for row in layer {
            let best = argmax(row);
            for (a, &q) in row.iter().enumerate() {
                if a != best {
                    delta = delta.min(row[best] - q);
                }
            }
        }
    }
    GapReport {
        delta,
        unique: delta > TIE_TOL,
    }
}

/// Weak-correlation coefficient of an exogenous chain with initial
/// distribution `init` and kernels `kernels[h][xi][xi']` (one per transition).
///
/// Equals the max over layers and positive-probability consecutive pairs of
/// `P[xi_h, xi_{h+1}] / (P[xi_h] P[xi_{h+1}])`.
pub fn weak_correlation_coeff(init: &[f64], kernels: &[Vec<Vec<f64>>]) -> f64 {
    let mut marginal = init.to_vec();
    let mut coeff: f64 = 1.0;
    for kernel in kernels {
        let next: Vec<f64> = (0..kernel[0].len())
            .map(|j| marginal.iter().zip(kernel).map(|(p, row)| p * row[j]).sum())
            .collect();
        for (i, row) in kernel.iter().enumerate() {
            for (j, &k) in row.iter().enumerate() {
                let joint = marginal[i] * k;
                if joint > 0.0 {
                    coeff = coeff.max(joint / (marginal[i] * next[j]));
                }
            }
        }
        marginal = next;
    }
    coeff
}

/// The deterministic rounded benchmark policy together with its exact
/// backups `P_h[V_{h+1}](x, a)` and values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPolicy {
    pub policy: PolicyTable,
    pub backups: QTable,
    pub values: VTable,
}

/// Backward recursion `pi_h(x) = argmax_a ceil(P_h[V_{h+1}](x,a)/eps + zeta_h)`
/// with `V` the value of the policy being built.
pub fn benchmark_bar_policy(mdp: &TabularMdp, eps: f64, zeta: &[f64]) -> BenchmarkPolicy {
    let horizon = mdp.horizon();
    assert_eq!(zeta.len(), horizon, "one zeta per layer");
    let mut q = vec![Vec::new(); horizon];
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); horizon];
    let mut actions = vec![Vec::new(); horizon];
    for h in (1..=horizon).rev() {
        let next = if h < horizon { Some(v[h].as_slice()) } else { None };
        let layer = backup_layer(mdp, h, next);
        let chosen: Vec<usize> = layer
            .iter()
            .map(|r| {
                let bins: Vec<i64> = r.iter().map(|&g| rounding_bin(g, eps, zeta[h - 1])).collect();
                argmax_int(&bins)
            })
            .collect();
        v[h - 1] = layer.iter().zip(&chosen).map(|(r, &a)| r[a]).collect();
        actions[h - 1] = chosen;
        q[h - 1] = layer;
    }
    BenchmarkPolicy {
        policy: PolicyTable::from_actions(&actions, mdp.num_actions()),
        backups: QTable(q),
        values: VTable(v),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapReport {
    pub snapped: bool,
    /// Latent triples `(h, s, a)` whose rounding margin condition fails.
    pub violations: Vec<(usize, usize, usize)>,
}

/// Whether `(u, zeta)` with `u = g / eps` falls in the rounding danger zone:
/// either the margin condition of width `4 eps` around the bin fails, or
/// `zeta` lies in one of the two excluded bands
/// `|u + zeta - ceil(u)| <= 4 eps` and `zeta <= 4 eps`.
pub fn snap_violation(g: f64, eps: f64, zeta: f64) -> bool {
    let u = g / eps;
    let nu = 4.0 * eps;
    let c = rounding_bin(g, eps, zeta) as f64;
    let margin_fails = u + zeta + nu > c || u + zeta - nu <= c - 1.0;
    let cu = rounding_bin(g, eps, 0.0) as f64;
    let band = (u + zeta - cu).abs() <= nu || zeta <= nu;
    margin_fails || band
}

/// Checks the snapping event for the benchmark policy on a flattened ExBMDP.
///
/// `decoder[h - 1][x]` is the latent state of observation `x` at layer `h`.
/// Backups of the benchmark are functions of the latent state, so each latent
/// `(h, s, a)` is checked once, on its first observation.
pub fn snap_check(mdp: &TabularMdp, decoder: &[Vec<usize>], eps: f64, zeta: &[f64]) -> SnapReport {
    let bench = benchmark_bar_policy(mdp, eps, zeta);
    let mut seen = BTreeSet::new();
    let mut violations = Vec::new();
    for h in 1..=mdp.horizon() {
        for (x, &s) in decoder[h - 1].iter().enumerate() {
            if !seen.insert((h, s)) {
                continue;
            }
            for a in 0..mdp.num_actions() {
                if snap_violation(bench.backups.get(h, x, a), eps, zeta[h - 1]) {
                    violations.push((h, s, a));
                }
            }
        }
    }
    SnapReport {
        snapped: violations.is_empty(),
        violations,
    }
}

/// `sum_h E^pi[Q^other_h(x_h, pi) - Q^other_h(x_h, other)]`, which equals
/// `J(pi) - J(other)`.
pub fn performance_difference(mdp: &TabularMdp, pi: &PolicyTable, other: &PolicyTable) -> f64 {
    let (q, v) = policy_eval(mdp, other);
    let occ = occupancy(mdp, pi);
    let mut total = 0.0;
    for h in 1..=mdp.horizon() {
        for (x, d) in occ.state(h).iter().enumerate() {
            if *d > 0.0 {
                total += d * (dot(pi.probs(h, x), q.row(h, x)) - v.get(h, x));
            }
        }
    }
    total
}
