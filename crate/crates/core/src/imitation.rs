//! Behavior cloning by 0-1 loss minimization over a finite policy class.

use serde::{Deserialize, Serialize};

use crate::backup::ceil_count;
use crate::classes::FinitePolicyClass;
use crate::mdp::{ActionSource, LocalSimSession, PolicyTable, SampleLedger, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneParams {
    pub eps: f64,
    pub delta: f64,
    pub n_bc: u64,
}

impl CloneParams {
    /// `N_bc = ceil(16 H^2 ln(|Pi| / delta) / eps)`.
    pub fn new(eps: f64, delta: f64, horizon: usize, class_size: usize) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eps and delta must lie in (0, 1), got {eps}, {delta}"
            )));
        }
        let h2 = (horizon * horizon) as f64;
        Ok(Self {
            eps,
            delta,
            n_bc: ceil_count(16.0 * h2 * (class_size as f64 / delta).ln() / eps),
        })
    }

    pub fn capped(mut self, cap: Option<u64>) -> Self {
        if let Some(c) = cap {
            self.n_bc = self.n_bc.min(c.max(1));
        }
        self
    }
}

/// Number of steps where `policy` disagrees with the recorded action.
pub fn mistakes(policy: &PolicyTable, corpus: &[Trajectory]) -> u64 {
    corpus
        .iter()
        .flat_map(|t| &t.steps)
        .filter(|s| policy.action(s.layer, s.state) != s.action)
        .count() as u64
}

/// Smallest-id empirical risk minimizer and every member's mistake count.
pub fn erm(class: &FinitePolicyClass, corpus: &[Trajectory]) -> (usize, Vec<u64>) {
    let counts: Vec<u64> = class.members.iter().map(|p| mistakes(p, corpus)).collect();
    let best = counts
        .iter()
        .enumerate()
        .min_by_key(|&(i, &c)| (c, i))
        .map(|(i, _)| i)
        .unwrap_or(0);
    (best, counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneOutput {
    pub policy: PolicyTable,
    pub selected: usize,
    pub mistakes: Vec<u64>,
    pub corpus: Vec<Trajectory>,
    pub ledger: SampleLedger,
}

/// Collects `N_bc` expert trajectories and returns the ERM policy.
///
/// The expert may itself sample from the simulator; those draws are charged
/// to the same session.
pub fn behavior_cloning(
    session: &mut LocalSimSession,
    class: &FinitePolicyClass,
    expert: &mut dyn ActionSource,
    params: &CloneParams,
) -> Result<CloneOutput> {
    if class.is_empty() {
        return Err(Error::EmptyClass);
    }
    let corpus = (0..params.n_bc)
        .map(|_| session.run_episode(expert))
        .collect::<Result<Vec<_>>>()?;
    let (selected, mistakes) = erm(class, &corpus);
    Ok(CloneOutput {
        policy: class.members[selected].clone(),
        selected,
        mistakes,
        corpus,
        ledger: session.ledger(),
    })
}

pub fn corpus_to_json(corpus: &[Trajectory]) -> Result<String> {
    Ok(serde_json::to_string(corpus)?)
}

pub fn corpus_from_json(text: &str) -> Result<Vec<Trajectory>> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::twochain;
    use crate::oracle::value_iteration;
    use std::sync::Arc;

    #[test]
    fn n_bc_formula() {
        let p = CloneParams::new(0.2, 0.1, 3, 32).unwrap();
        assert_eq!(p.n_bc, (16.0 * 9.0 * (320.0f64).ln() / 0.2).ceil() as u64);
    }

    #[test]
    fn anti_policy_loses_after_one_trajectory() {
        let mdp = Arc::new(twochain());
        let star = value_iteration(&mdp).policy;
        let anti = PolicyTable::from_actions(
            &star.actions().iter().map(|l| l.iter().map(|a| 1 - a).collect()).collect::<Vec<_>>(),
            2,
        );
        let class = FinitePolicyClass::new(vec![anti, star.clone()]).unwrap();
        let mut s = LocalSimSession::new(mdp, 0);
        let params = CloneParams { eps: 0.5, delta: 0.5, n_bc: 1 };
        let out = behavior_cloning(&mut s, &class, &mut star.clone(), &params).unwrap();
        assert_eq!(out.selected, 1);
        assert_eq!(out.mistakes, vec![2, 0]);
        let back = corpus_from_json(&corpus_to_json(&out.corpus).unwrap()).unwrap();
        assert_eq!(back, out.corpus);
    }
}
