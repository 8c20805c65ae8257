//! Global optimism over a finite Q-class with squared Bellman residuals
//! estimated from local-simulator draws.

use serde::{Deserialize, Serialize};

use crate::backup::ceil_count;
use crate::classes::FiniteQClass;
use crate::mdp::{LocalSimSession, PolicyTable, SampleLedger, TabularMdp};
use crate::oracle::{expected_return, QTable};
use crate::{Error, Result, TIE_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimGolfParams {
    pub c_cov: f64,
    pub eps: f64,
    pub delta: f64,
    pub scale_n: f64,
    pub scale_k: f64,
    pub n: u64,
    pub k: u64,
    pub beta_stat: f64,
    pub beta: f64,
}

fn beta_stat(horizon: usize, n: u64, class_size: usize, delta: f64) -> f64 {
    16.0 * ((2 * horizon) as f64 * n as f64 * class_size as f64 / delta).ln()
}

impl SimGolfParams {
    /// Derives `N`, `K` and `beta`.
    ///
    /// `N = ceil(scale_n * H^2 C_cov beta / eps^2)` depends on `beta`, which
    /// depends on `N` through `beta_stat = 16 ln(2 H N |Q| / delta)`. The
    /// fixed point is approximated by one pass: `beta` at `N = 1`, then `N`,
    /// then `beta` at that `N`, then the final `N`. `K = ceil(scale_k * 8 N /
    /// beta_stat)`.
    pub fn new(
        c_cov: f64,
        eps: f64,
        delta: f64,
        horizon: usize,
        class_size: usize,
        scale_n: f64,
        scale_k: f64,
    ) -> Result<Self> {
        if !(eps > 0.0) || !(delta > 0.0 && delta < 1.0) || !(c_cov > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need eps > 0, delta in (0,1), C_cov > 0 (got {eps}, {delta}, {c_cov})"
            )));
        }
        if !(scale_n > 0.0 && scale_k > 0.0) {
            return Err(Error::InvalidConfig("scales must be positive".into()));
        }
        let n_for = |beta: f64| ceil_count(scale_n * (horizon * horizon) as f64 * c_cov * beta / (eps * eps));
        let n0 = n_for(2.0 * beta_stat(horizon, 1, class_size, delta));
        let bs = beta_stat(horizon, n0, class_size, delta);
        let n = n_for(2.0 * bs);
        let k = ceil_count(scale_k * 8.0 * n as f64 / bs);
        Ok(Self {
            c_cov,
            eps,
            delta,
            scale_n,
            scale_k,
            n,
            k,
            beta_stat: bs,
            beta: 2.0 * bs,
        })
    }

    /// Parameters with explicit `N` and `K`; `beta` follows from `N`.
    pub fn with_counts(n: u64, k: u64, delta: f64, horizon: usize, class_size: usize) -> Self {
        let bs = beta_stat(horizon, n, class_size, delta);
        Self {
            c_cov: f64::NAN,
            eps: f64::NAN,
            delta,
            scale_n: f64::NAN,
            scale_k: f64::NAN,
            n: n.max(1),
            k: k.max(1),
            beta_stat: bs,
            beta: 2.0 * bs,
        }
    }
}

/// Cumulative residuals and the active set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceState {
    /// `residuals[g][h - 1]`: summed squared residual of member `g` at layer `h`.
    pub residuals: Vec<Vec<f64>>,
    pub active: Vec<bool>,
    /// `sum_{s<t} max_a g_1(x_1^s, a)` per member.
    pub optimism: Vec<f64>,
    pub beta: f64,
}

impl ConfidenceState {
    pub fn new(class_size: usize, horizon: usize, beta: f64) -> Self {
        Self {
            residuals: vec![vec![0.0; horizon]; class_size],
            active: vec![true; class_size],
            optimism: vec![0.0; class_size],
            beta,
        }
    }

    pub fn active_ids(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&g| self.active[g]).collect()
    }

    pub fn record_start(&mut self, class: &FiniteQClass, x1: usize) {
        for (score, g) in self.optimism.iter_mut().zip(&class.members) {
            *score += max_of(g.row(1, x1));
        }
    }
}

fn max_of(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest active id maximizing the accumulated optimism score.
pub fn optimistic_select(state: &ConfidenceState) -> Result<usize> {
    let mut best: Option<usize> = None;
    for g in state.active_ids() {
        match best {
            Some(b) if state.optimism[g] <= state.optimism[b] + TIE_TOL => {}
            _ => best = Some(g),
        }
    }
    best.ok_or(Error::EmptyActiveSet { iteration: 0 })
}

/// Local draws at one layer: `(reward, next state)` pairs.
pub type LayerDraws = Vec<(f64, Option<usize>)>;

/// Squared residual of `g` at `(h, x, a)` against the draws.
pub fn residual(g: &QTable, h: usize, x: usize, a: usize, draws: &[(f64, Option<usize>)]) -> f64 {
    let target: f64 = draws
        .iter()
        .map(|&(r, y)| r + y.map_or(0.0, |y| max_of(g.row(h + 1, y))))
        .sum::<f64>()
        / draws.len() as f64;
    let d = g.get(h, x, a) - target;
    d * d
}

/// Adds this iteration's residuals for every member and shrinks the active set.
pub fn confidence_update(
    state: &mut ConfidenceState,
    class: &FiniteQClass,
    path: &[(usize, usize)],
    draws: &[LayerDraws],
    k: usize,
) -> Result<()> {
    if draws.len() != path.len() || draws.iter().any(|d| d.len() != k) {
        return Err(Error::Shape(format!(
            "expected {} x {k} draws, got {} layers",
            path.len(),
            draws.len()
        )));
    }
    for (gi, g) in class.members.iter().enumerate() {
        for (i, (&(x, a), d)) in path.iter().zip(draws).enumerate() {
            state.residuals[gi][i] += residual(g, i + 1, x, a, d);
        }
        if state.residuals[gi].iter().any(|&s| s > state.beta) {
            state.active[gi] = false;
        }
    }
    Ok(())
}

/// Uniform mixture over deterministic policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePolicy {
    pub components: Vec<PolicyTable>,
}

impl MixturePolicy {
    pub fn expected_return(&self, mdp: &TabularMdp) -> f64 {
        self.components.iter().map(|p| expected_return(mdp, p)).sum::<f64>() / self.components.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimGolfRow {
    pub t: u64,
    pub active_set_size: usize,
    pub j_pi_t_exact: f64,
    /// Largest per-layer cumulative residual among members still active.
    pub residual_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimGolfOutput {
    pub mixture: MixturePolicy,
    pub selected: Vec<usize>,
    pub state: ConfidenceState,
    pub diagnostics: Vec<SimGolfRow>,
    pub ledger: SampleLedger,
}

/// Runs `N` iterations of optimistic selection, one on-policy episode and `K`
/// local draws per visited `(x_h, a_h)`.
pub fn run_simgolf(session: &mut LocalSimSession, class: &FiniteQClass, params: &SimGolfParams) -> Result<SimGolfOutput> {
    if class.is_empty() {
        return Err(Error::EmptyClass);
    }
    let horizon = session.mdp().horizon();
    let mdp = session.mdp_arc();
    let k = usize::try_from(params.k).map_err(|_| Error::InvalidConfig("K too large".into()))?;
    let mut state = ConfidenceState::new(class.len(), horizon, params.beta);
    let mut components = Vec::new();
    let mut selected = Vec::new();
    let mut diagnostics = Vec::new();
    for t in 1..=params.n {
        let g = optimistic_select(&state).map_err(|_| Error::EmptyActiveSet { iteration: t })?;
        let mut pi = class.members[g].greedy();
        let traj = session.run_episode(&mut pi)?;
        let path: Vec<(usize, usize)> = traj.steps.iter().map(|s| (s.state, s.action)).collect();
        let mut draws = Vec::with_capacity(horizon);
        for (i, &(x, a)) in path.iter().enumerate() {
            let layer: LayerDraws = (0..k)
                .map(|_| session.sample_from(i + 1, x, a))
                .collect::<Result<_>>()?;
            draws.push(layer);
        }
        state.record_start(class, path[0].0);
        confidence_update(&mut state, class, &path, &draws, k)?;
        let residual_max = state
            .active_ids()
            .iter()
            .flat_map(|&m| state.residuals[m].iter().copied())
            .fold(0.0, f64::max);
        diagnostics.push(SimGolfRow {
            t,
            active_set_size: state.active_ids().len(),
            j_pi_t_exact: expected_return(&mdp, &pi),
            residual_max,
        });
        components.push(pi);
        selected.push(g);
    }
    Ok(SimGolfOutput {
        mixture: MixturePolicy { components },
        selected,
        state,
        diagnostics,
        ledger: session.ledger(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::twochain;
    use crate::oracle::value_iteration;
    use std::sync::Arc;

    #[test]
    fn params_scale_one_matches_formulas() {
        let p = SimGolfParams::new(4.0, 0.5, 0.1, 2, 2, 1.0, 1.0).unwrap();
        let n0 = (4.0 * 4.0 * 2.0 * 16.0 * (8.0f64 / 0.1).ln() / 0.25).ceil();
        let bs = 16.0 * (8.0 * n0 / 0.1).ln();
        assert!((p.beta_stat - bs).abs() < 1e-9);
        assert_eq!(p.beta, 2.0 * p.beta_stat);
        assert_eq!(p.n, (4.0 * 4.0 * p.beta / 0.25).ceil() as u64);
        assert_eq!(p.k, (8.0 * p.n as f64 / p.beta_stat).ceil() as u64);
    }

    #[test]
    fn select_first_active_on_empty_history() {
        let mut st = ConfidenceState::new(3, 2, 1.0);
        st.active[0] = false;
        assert_eq!(optimistic_select(&st).unwrap(), 1);
        st.active = vec![false; 3];
        assert!(optimistic_select(&st).is_err());
    }

    #[test]
    fn singleton_class_reproduces_optimum() {
        let mdp = Arc::new(twochain());
        let qstar = value_iteration(&mdp).q;
        let class = FiniteQClass::hand_built(vec![qstar]).unwrap();
        let params = SimGolfParams::with_counts(5, 3, 0.1, 2, 1);
        let mut s = LocalSimSession::new(mdp.clone(), 1);
        let out = run_simgolf(&mut s, &class, &params).unwrap();
        assert_eq!(out.state.active, vec![true]);
        assert!((out.mixture.expected_return(&mdp) - 1.0).abs() < 1e-12);
        assert_eq!(out.ledger.transitions_sampled, 5 * 2 + 5 * 2 * 3);
    }
}
