//! The randomized-rounding search for exogenous block MDPs and its
//! boosting + cloning wrapper.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backup::{ceil_count, BackupParams, BackupPolicy, Selector};
use crate::classes::{Decoder, FinitePolicyClass, FiniteVClass};
use crate::imitation::{behavior_cloning, CloneParams};
use crate::mdp::{LocalSimSession, PolicyTable, SampleLedger};
use crate::oracle::expected_return;
use crate::rvfs::{backup_policy, rvfs, Overrides, RvfsParams, RvfsState};
use crate::{Error, Result};

pub use crate::oracle::{snap_check, SnapReport};

/// Parameters of the rounding variant; see [`RvfsParams::rounded`].
pub type ExoParams = RvfsParams;

/// Runs the rounding variant from level `h`.
pub fn rvfs_exo(
    session: &mut LocalSimSession,
    h: usize,
    state: RvfsState,
    class: &FiniteVClass,
    params: &ExoParams,
) -> Result<RvfsState> {
    if !matches!(params.selector, Selector::Rounded { .. }) {
        return Err(Error::InvalidConfig("rvfs_exo needs rounded parameters".into()));
    }
    rvfs(session, h, state, class, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub eps_rvfs: f64,
    pub n_boost: u64,
    pub n_eval: u64,
    pub n_bc: u64,
    /// 1-based index of the selected run.
    pub i_opt: u64,
    pub j_max: f64,
}

impl BoostConfig {
    /// `eps_RVFS = eps / (48 H)`, `N_boost = ceil(ln(1/delta) / ln(1/(24 S A H eps_RVFS)))`,
    /// `N_eval = ceil(16^2 eps^-2 ln(2 N_boost / delta))`, and `N_bc` of the
    /// cloning call at confidence `delta / (2 N_boost)`.
    pub fn new(
        eps: f64,
        delta: f64,
        num_latent: usize,
        num_actions: usize,
        horizon: usize,
        policy_class_size: usize,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eps and delta must lie in (0, 1), got {eps}, {delta}"
            )));
        }
        let eps_rvfs = eps / (48.0 * horizon as f64);
        let fail = 24.0 * (num_latent * num_actions * horizon) as f64 * eps_rvfs;
        if fail >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "24 S A H eps_RVFS = {fail} must be below 1"
            )));
        }
        let n_boost = ceil_count(delta.ln() / fail.ln());
        let n_eval = ceil_count(256.0 / (eps * eps) * (2.0 * n_boost as f64 / delta).ln());
        let n_bc = CloneParams::new(eps, delta / (2.0 * n_boost as f64), horizon, policy_class_size)?.n_bc;
        Ok(Self {
            eps_rvfs,
            n_boost,
            n_eval,
            n_bc,
            i_opt: 1,
            j_max: 0.0,
        })
    }
}

/// Draws `zeta ~ Unif[0, 1/2]^H` for each boosting round.
pub fn draw_zetas<R: Rng + ?Sized>(rng: &mut R, rounds: u64, horizon: usize) -> Vec<Vec<f64>> {
    (0..rounds)
        .map(|_| (0..horizon).map(|_| rng.gen_range(0.0..=0.5)).collect())
        .collect()
}

/// Which non-executable policy is cloned after each search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// `argmax_a phat[V_{h+1}](x, a)` at accuracy `eps_RVFS`.
    #[default]
    Greedy,
    /// The rounded policy used inside the search.
    Rounded,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoostOptions {
    pub overrides: Overrides,
    pub n_bc_cap: Option<u64>,
    pub n_eval_cap: Option<u64>,
    pub expert: ExpertKind,
    /// True decoder, used only to report whether each `zeta` snaps.
    pub oracle_decoder: Option<Decoder>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostRound {
    pub zeta: Vec<f64>,
    pub snapped: Option<bool>,
    pub j_hat: f64,
    pub j_exact: f64,
    pub ledger: SampleLedger,
    pub max_core: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostOutput {
    pub policy: PolicyTable,
    pub config: BoostConfig,
    pub rounds: Vec<BoostRound>,
}

/// Class inputs of the wrapper: value and endogenous policy classes and the
/// pre-drawn `zeta` of every round.
pub struct BoostInputs<'a> {
    pub values: &'a FiniteVClass,
    pub policies: &'a FinitePolicyClass,
    pub zetas: &'a [Vec<f64>],
    pub c_exo: f64,
    pub num_latent: usize,
}

/// For each round: run the rounding search at level 0 with `zeta^(i)`,
/// `eps_RVFS` and `delta / (10 N_boost)`, clone the expert, estimate the
/// clone's return with `N_eval` episodes and keep the best.
pub fn rvfs_exo_bc(
    session: &mut LocalSimSession,
    inputs: &BoostInputs<'_>,
    eps: f64,
    delta: f64,
    opts: &BoostOptions,
) -> Result<BoostOutput> {
    let mdp = session.mdp_arc();
    let horizon = mdp.horizon();
    let num_actions = mdp.num_actions();
    let mut config = BoostConfig::new(eps, delta, inputs.num_latent, num_actions, horizon, inputs.policies.len())?;
    if inputs.zetas.len() as u64 != config.n_boost {
        return Err(Error::Shape(format!(
            "expected {} zeta draws, got {}",
            config.n_boost,
            inputs.zetas.len()
        )));
    }
    let n_boost = config.n_boost as f64;
    let n_eval = opts.n_eval_cap.map_or(config.n_eval, |c| config.n_eval.min(c.max(1)));
    let mut rounds = Vec::new();
    let mut best: Option<PolicyTable> = None;
    for (i, zeta) in inputs.zetas.iter().enumerate() {
        let params = RvfsParams::rounded(
            config.eps_rvfs,
            delta / (10.0 * n_boost),
            inputs.c_exo,
            inputs.num_latent,
            horizon,
            num_actions,
            inputs.values.len(),
            zeta.clone(),
            &opts.overrides,
        )?;
        let state = rvfs_exo(session, 0, RvfsState::new(horizon, inputs.values.len()), inputs.values, &params)?;
        let clone_params = CloneParams::new(eps, delta / (2.0 * n_boost), horizon, inputs.policies.len())?
            .capped(opts.n_bc_cap);
        let clone = match opts.expert {
            ExpertKind::Rounded => {
                let mut expert = backup_policy(inputs.values, &state, &params);
                behavior_cloning(session, inputs.policies, &mut expert, &clone_params)?
            }
            ExpertKind::Greedy => {
                let backup = BackupParams::from_log(config.eps_rvfs, params.ln_inv_delta_prime)?
                    .capped(opts.overrides.n_sim);
                let mut expert = BackupPolicy {
                    selector: Selector::Greedy,
                    params: backup,
                    ..backup_policy(inputs.values, &state, &params)
                };
                behavior_cloning(session, inputs.policies, &mut expert, &clone_params)?
            }
        };
        let mut pi = clone.policy.clone();
        let mut v = 0.0;
        for _ in 0..n_eval {
            v += session.run_episode(&mut pi)?.total_reward();
        }
        let j_hat = v / n_eval as f64;
        if j_hat > config.j_max {
            config.i_opt = i as u64 + 1;
            config.j_max = j_hat;
            best = Some(clone.policy.clone());
        } else if best.is_none() {
            best = Some(clone.policy.clone());
        }
        rounds.push(BoostRound {
            zeta: zeta.clone(),
            snapped: opts
                .oracle_decoder
                .as_ref()
                .map(|d| snap_check(&mdp, d, config.eps_rvfs, zeta).snapped),
            j_hat,
            j_exact: expected_return(&mdp, &clone.policy),
            ledger: session.ledger(),
            max_core: state.core_sets.iter().map(Vec::len).max().unwrap_or(0),
        });
    }
    Ok(BoostOutput {
        policy: best.expect("at least one round"),
        config,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boost_counts() {
        let c = BoostConfig::new(0.3, 0.1, 3, 2, 2, 10).unwrap();
        assert_eq!(c.n_boost, 22);
        assert!(BoostConfig::new(0.9, 0.1, 20, 4, 4, 10).is_err());
    }
}
