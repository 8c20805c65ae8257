//! Monte-Carlo Bellman backups through the local simulator.

use serde::{Deserialize, Serialize};

use crate::mdp::{ActionSource, LocalSimSession};
use crate::oracle::{argmax, argmax_int, rounding_bin};
use crate::{Error, Result};

/// Converts a nonnegative real count to an integer, saturating at `u64::MAX`.
pub fn ceil_count(x: f64) -> u64 {
    if x.is_nan() || x <= 1.0 {
        1
    } else if x >= u64::MAX as f64 {
        u64::MAX
    } else {
        x.ceil() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackupParams {
    pub eps: f64,
    /// `ln(1/delta)`; stored in log form because confidence levels used by
    /// the recursive algorithms underflow `f64`.
    pub ln_inv_delta: f64,
    pub n_sim: u64,
}

impl BackupParams {
    /// `N_sim = ceil(2 ln(1/delta) / eps^2)`.
    pub fn new(eps: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {delta}")));
        }
        Self::from_log(eps, -delta.ln())
    }

    pub fn from_log(eps: f64, ln_inv_delta: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
        }
        if !(ln_inv_delta > 0.0) {
            return Err(Error::InvalidConfig("ln(1/delta) must be positive".into()));
        }
        Ok(Self {
            eps,
            ln_inv_delta,
            n_sim: ceil_count(2.0 * ln_inv_delta / (eps * eps)),
        })
    }

    /// Replaces the derived sample count, e.g. to cap it at desk scale.
    pub fn with_n_sim(mut self, n_sim: u64) -> Self {
        self.n_sim = n_sim.max(1);
        self
    }

    /// Caps `n_sim` at `cap` when given.
    pub fn capped(self, cap: Option<u64>) -> Self {
        match cap {
            Some(c) if c < self.n_sim => self.with_n_sim(c),
            _ => self,
        }
    }
}

/// Mean of `r + f(x')` over `n_sim` fresh draws from `(h, x, a)`.
///
/// `next_values` is `f_{h+1}`; pass `None` at the last layer. At `h = 0` the
/// draws are fresh episode starts from the initial distribution.
pub fn phat(
    session: &mut LocalSimSession,
    h: usize,
    next_values: Option<&[f64]>,
    x: usize,
    a: usize,
    params: &BackupParams,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..params.n_sim {
        let (r, next) = session.sample_from(h, x, a)?;
        total += r;
        if let (Some(f), Some(y)) = (next_values, next) {
            total += f[y];
        }
    }
    Ok(total / params.n_sim as f64)
}

/// `phat` for every action.
pub fn phat_all(
    session: &mut LocalSimSession,
    h: usize,
    next_values: Option<&[f64]>,
    x: usize,
    params: &BackupParams,
) -> Result<Vec<f64>> {
    (0..session.mdp().num_actions())
        .map(|a| phat(session, h, next_values, x, a, params))
        .collect()
}

/// Smallest-index argmax of the estimated backups.
pub fn greedy_action(
    session: &mut LocalSimSession,
    h: usize,
    next_values: Option<&[f64]>,
    x: usize,
    params: &BackupParams,
) -> Result<usize> {
    Ok(argmax(&phat_all(session, h, next_values, x, params)?))
}

/// Smallest-index argmax of `ceil(phat / eps_round + zeta)`.
///
/// `params` should carry accuracy `eps_round^2`.
pub fn rounded_action(
    session: &mut LocalSimSession,
    h: usize,
    next_values: Option<&[f64]>,
    x: usize,
    params: &BackupParams,
    zeta: f64,
    eps_round: f64,
) -> Result<usize> {
    let bins: Vec<i64> = phat_all(session, h, next_values, x, params)?
        .into_iter()
        .map(|q| rounding_bin(q, eps_round, zeta))
        .collect();
    Ok(argmax_int(&bins))
}

/// How a [`BackupPolicy`] turns estimated backups into an action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Selector {
    Greedy,
    Rounded { zeta: Vec<f64>, eps: f64 },
}

/// The non-executable policy `pi_h(x) = select_a phat[V_{h+1}](x, a)`.
///
/// `values[h - 1]` is `V_h` for `h = 1..=H`; layers with `None` have not been
/// fitted and are treated as zero.
pub struct BackupPolicy<'a> {
    pub values: Vec<Option<&'a [f64]>>,
    pub params: BackupParams,
    pub selector: Selector,
}

impl BackupPolicy<'_> {
    fn next_values(&self, h: usize) -> Option<&[f64]> {
        self.values.get(h).copied().flatten()
    }
}

impl ActionSource for BackupPolicy<'_> {
    fn act(&mut self, session: &mut LocalSimSession, h: usize, x: usize) -> Result<usize> {
        let next = self.next_values(h);
        let zero;
        let next = match (next, h < session.mdp().horizon()) {
            (Some(v), _) => Some(v),
            (None, true) => {
                zero = vec![0.0; session.mdp().num_states(h + 1)];
                Some(zero.as_slice())
            }
            (None, false) => None,
        };
        match &self.selector {
            Selector::Greedy => greedy_action(session, h, next, x, &self.params),
            Selector::Rounded { zeta, eps } => rounded_action(session, h, next, x, &self.params, zeta[h - 1], *eps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::twochain;
    use crate::oracle::value_iteration;
    use std::sync::Arc;

    #[test]
    fn n_sim_formula() {
        assert_eq!(BackupParams::new(0.1, 0.01).unwrap().n_sim, 922);
        assert_eq!(BackupParams::new(0.1, 0.05).unwrap().n_sim, 600);
        assert!(BackupParams::new(0.1, 1.5).is_err());
    }

    #[test]
    fn greedy_on_twochain_and_charges() {
        let mdp = Arc::new(twochain());
        let vstar = value_iteration(&mdp).v;
        let mut s = LocalSimSession::new(mdp, 0);
        s.start_episode();
        let params = BackupParams::new(0.5, 0.1).unwrap();
        let before = s.ledger();
        assert_eq!(greedy_action(&mut s, 1, vstar.next(1), 0, &params).unwrap(), 1);
        let after = s.ledger();
        assert_eq!(after.transitions_sampled - before.transitions_sampled, 2 * params.n_sim);
        assert_eq!(after.resets - before.resets, 2 * params.n_sim);
    }

    #[test]
    fn rounded_bins_pick_larger() {
        let mdp = crate::mdp::TabularMdp::new(
            vec![1],
            2,
            vec![1.0],
            vec![],
            vec![vec![vec![0.3, 0.7]]],
            crate::RewardLaw::DeterministicMean,
        )
        .unwrap();
        let mut s = LocalSimSession::new(Arc::new(mdp), 0);
        s.start_episode();
        let params = BackupParams::new(0.04, 0.1).unwrap();
        assert_eq!(rounded_action(&mut s, 1, None, 0, &params, 0.25, 0.2).unwrap(), 1);
        assert_eq!(rounded_action(&mut s, 1, None, 0, &params, 0.25, 2.0).unwrap(), 0);
    }
}
