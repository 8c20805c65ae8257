//! Exogenous block MDP generators and flattening.
//!
//! Observations pair an endogenous latent state `s` with an exogenous state
//! `xi`; the observation id is `s * |Xi| + xi`, so the true decoder is integer
//! division by `|Xi|`. Rewards depend on the latent state only.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{Decoder, DecoderClass, LatentQ, LatentV};
use crate::instances::random_row;
use crate::mdp::{sample_index, PolicyTable, RewardLaw, TabularMdp};
use crate::oracle::{argmax, weak_correlation_coeff, VTable};
use crate::{Error, Result};

/// Largest flattened layer accepted by default.
pub const DEFAULT_FLATTEN_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndoKind {
    /// Random dense transition rows.
    #[default]
    Random,
    /// Every `(s, a)` leads to a single random successor.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExbmdpTargets {
    pub num_latent: usize,
    pub num_exo: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Stickiness of the exogenous chain; 0 gives i.i.d. noise.
    #[serde(default)]
    pub lambda: f64,
    /// Requested minimum gap of the optimal latent action.
    #[serde(default)]
    pub gap: Option<f64>,
    #[serde(default)]
    pub endo: EndoKind,
    /// Start from a single latent state instead of a random distribution.
    #[serde(default)]
    pub point_mass_init: bool,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
    #[serde(default)]
    pub reward_law: RewardLaw,
}

fn default_distractors() -> usize {
    2
}

impl ExbmdpTargets {
    pub fn new(num_latent: usize, num_exo: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_latent,
            num_exo,
            num_actions,
            horizon,
            lambda: 0.0,
            gap: None,
            endo: EndoKind::Random,
            point_mass_init: false,
            distractors: default_distractors(),
            reward_law: RewardLaw::BernoulliMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExbmdpSpec {
    pub num_latent: usize,
    pub num_exo: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub latent_init: Vec<f64>,
    /// `endo[h - 1][s][a]`: row over latent states at layer `h + 1`.
    pub endo: Vec<Vec<Vec<Vec<f64>>>>,
    pub exo_init: Vec<f64>,
    /// `exo[h - 1][xi]`: row over exogenous states at layer `h + 1`.
    pub exo: Vec<Vec<Vec<f64>>>,
    /// `rewards[h - 1][s][a]`.
    pub rewards: Vec<Vec<Vec<f64>>>,
    pub lambda: f64,
    pub target_gap: Option<f64>,
    pub reward_law: RewardLaw,
}

impl ExbmdpSpec {
    pub fn observation(&self, s: usize, xi: usize) -> usize {
        s * self.num_exo + xi
    }

    pub fn num_observations(&self) -> usize {
        self.num_latent * self.num_exo
    }

    /// `phi*(x) = x / |Xi|` at every layer.
    pub fn true_decoder(&self) -> Decoder {
        vec![(0..self.num_observations()).map(|x| x / self.num_exo).collect(); self.horizon]
    }

    pub fn weak_correlation(&self) -> f64 {
        weak_correlation_coeff(&self.exo_init, &self.exo)
    }

    /// Latent `Q*` by backward induction.
    pub fn latent_q_star(&self) -> LatentQ {
        let mut q = vec![Vec::new(); self.horizon];
        let mut v_next: Option<Vec<f64>> = None;
        for h in (1..=self.horizon).rev() {
            let layer: Vec<Vec<f64>> = (0..self.num_latent)
                .map(|s| {
                    (0..self.num_actions)
                        .map(|a| {
                            let cont = match &v_next {
                                Some(v) => dot(&self.endo[h - 1][s][a], v),
                                None => 0.0,
                            };
                            self.rewards[h - 1][s][a] + cont
                        })
                        .collect()
                })
                .collect();
            v_next = Some(layer.iter().map(|r| r[argmax(r)]).collect());
            q[h - 1] = layer;
        }
        q
    }

    /// Samples one episode directly from the latent and exogenous chains
    /// and returns its total reward under an observation-level policy.
    pub fn sample_return<R: Rng + ?Sized>(&self, policy: &PolicyTable, rng: &mut R) -> f64 {
        let mut s = sample_index(&self.latent_init, rng.gen());
        let mut xi = sample_index(&self.exo_init, rng.gen());
        let mut total = 0.0;
        for h in 1..=self.horizon {
            let x = self.observation(s, xi);
            let a = sample_index(policy.probs(h, x), rng.gen());
            let mean = self.rewards[h - 1][s][a];
            total += match self.reward_law {
                RewardLaw::DeterministicMean => mean,
                RewardLaw::BernoulliMean => f64::from(u8::from(rng.gen::<f64>() < mean)),
            };
            if h < self.horizon {
                s = sample_index(&self.endo[h - 1][s][a], rng.gen());
                xi = sample_index(&self.exo[h - 1][xi], rng.gen());
            }
        }
        total
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `lambda * I + (1 - lambda) * uniform` on `m` states.
pub fn mixture_kernel(m: usize, lambda: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| (1.0 - lambda) / m as f64 + if i == j { lambda } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Generates an ExBMDP and a decoder class containing the true decoder.
pub fn generate_exbmdp(seed: u64, targets: &ExbmdpTargets) -> Result<(ExbmdpSpec, DecoderClass)> {
    let ExbmdpTargets {
        num_latent: s_n,
        num_exo: xi_n,
        num_actions: a_n,
        horizon,
        lambda,
        gap,
        ..
    } = *targets;
    if s_n == 0 || xi_n == 0 || a_n == 0 || horizon == 0 {
        return Err(Error::InvalidConfig("S, |Xi|, A and H must be positive".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if let Some(d) = gap {
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::InfeasibleGap(d));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent_init = if targets.point_mass_init {
        let mut row = vec![0.0; s_n];
        row[rng.gen_range(0..s_n)] = 1.0;
        row
    } else {
        random_row(&mut rng, s_n, 0.0)
    };
    let endo: Vec<Vec<Vec<Vec<f64>>>> = (1..horizon)
        .map(|_| {
            (0..s_n)
                .map(|_| {
                    (0..a_n)
                        .map(|_| match targets.endo {
                            EndoKind::Random => random_row(&mut rng, s_n, 0.0),
                            EndoKind::Deterministic => {
                                let mut row = vec![0.0; s_n];
                                row[rng.gen_range(0..s_n)] = 1.0;
                                row
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let exo_init = vec![1.0 / xi_n as f64; xi_n];
    let exo = vec![mixture_kernel(xi_n, lambda); horizon.saturating_sub(1)];

    let mut rewards = vec![Vec::new(); horizon];
    let mut v_next: Option<Vec<f64>> = None;
    for h in (1..=horizon).rev() {
        let mut layer = Vec::with_capacity(s_n);
        let mut values = Vec::with_capacity(s_n);
        let base: f64 = rng.gen();
        for s in 0..s_n {
            let cont: Vec<f64> = (0..a_n)
                .map(|a| v_next.as_ref().map_or(0.0, |v| dot(&endo[h - 1][s][a], v)))
                .collect();
            let row: Vec<f64> = if s_n == 1 {
                vec![base; a_n]
            } else if let Some(d) = gap {
                let best = argmax(&cont);
                (0..a_n)
                    .map(|a| if a == best { 1.0 } else { rng.gen::<f64>() * (1.0 - d) })
                    .collect()
            } else {
                (0..a_n).map(|_| rng.gen::<f64>()).collect()
            };
            let q: Vec<f64> = row.iter().zip(&cont).map(|(r, c)| r + c).collect();
            values.push(q[argmax(&q)]);
            layer.push(row);
        }
        rewards[h - 1] = layer;
        v_next = Some(values);
    }

    let spec = ExbmdpSpec {
        num_latent: s_n,
        num_exo: xi_n,
        num_actions: a_n,
        horizon,
        latent_init,
        endo,
        exo_init,
        exo,
        rewards,
        lambda,
        target_gap: gap,
        reward_law: targets.reward_law,
    };
    let decoders = decoder_class(&spec, targets.distractors, &mut rng);
    Ok((spec, decoders))
}

/// The true decoder plus up to `count` random surjective decoders, each
/// disagreeing with it on at least a quarter of the observations.
fn decoder_class<R: Rng + ?Sized>(spec: &ExbmdpSpec, count: usize, rng: &mut R) -> DecoderClass {
    let truth = spec.true_decoder();
    let n_obs = spec.num_observations();
    let s_n = spec.num_latent;
    let mut decoders = vec![truth.clone()];
    if s_n > 1 {
        let min_disagree = n_obs.div_ceil(4);
        for _ in 0..count {
            let mut layers = Vec::with_capacity(spec.horizon);
            for h in 0..spec.horizon {
                let map = (0..10_000).find_map(|_| {
                    let map: Vec<usize> = (0..n_obs).map(|_| rng.gen_range(0..s_n)).collect();
                    let surjective = (0..s_n).all(|s| map.contains(&s));
                    let disagree = map.iter().zip(&truth[h]).filter(|(a, b)| a != b).count();
                    (surjective && disagree >= min_disagree).then_some(map)
                });
                match map {
                    Some(m) => layers.push(m),
                    None => break,
                }
            }
            if layers.len() == spec.horizon {
                decoders.push(layers);
            }
        }
    }
    let true_index = rng.gen_range(0..decoders.len());
    decoders.swap(0, true_index);
    DecoderClass { decoders, true_index }
}

/// Observation-level tabular MDP over `(s, xi)` pairs.
pub fn flatten(spec: &ExbmdpSpec, limit: usize) -> Result<TabularMdp> {
    let n_obs = spec.num_observations();
    if n_obs > limit {
        return Err(Error::FlattenBudget { states: n_obs, limit });
    }
    let pairs: Vec<(usize, usize)> = (0..n_obs).map(|x| (x / spec.num_exo, x % spec.num_exo)).collect();
    let init: Vec<f64> = pairs
        .iter()
        .map(|&(s, xi)| spec.latent_init[s] * spec.exo_init[xi])
        .collect();
    let transitions: Vec<Vec<Vec<Vec<f64>>>> = (1..spec.horizon)
        .map(|h| {
            pairs
                .iter()
                .map(|&(s, xi)| {
                    (0..spec.num_actions)
                        .map(|a| {
                            pairs
                                .iter()
                                .map(|&(s2, xi2)| spec.endo[h - 1][s][a][s2] * spec.exo[h - 1][xi][xi2])
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let rewards: Vec<Vec<Vec<f64>>> = (1..=spec.horizon)
        .map(|h| pairs.iter().map(|&(s, _)| spec.rewards[h - 1][s].clone()).collect())
        .collect();
    TabularMdp::new(
        vec![n_obs; spec.horizon],
        spec.num_actions,
        init,
        transitions,
        rewards,
        spec.reward_law,
    )
}

/// Latent values of an observation-level table that is constant on decoder
/// cells; each latent takes the value of its first observation.
pub fn project_v(values: &VTable, phi: &Decoder, num_latent: usize) -> LatentV {
    values
        .0
        .iter()
        .zip(phi)
        .map(|(layer, map)| {
            let mut out = vec![0.0; num_latent];
            let mut seen = vec![false; num_latent];
            for (x, &s) in map.iter().enumerate() {
                if !seen[s] {
                    seen[s] = true;
                    out[s] = layer[x];
                }
            }
            out
        })
        .collect()
}

/// Latent action table of an endogenous deterministic policy.
pub fn project_actions(policy: &PolicyTable, phi: &Decoder, num_latent: usize) -> Vec<Vec<usize>> {
    (1..=policy.horizon())
        .map(|h| {
            let mut out = vec![0; num_latent];
            let mut seen = vec![false; num_latent];
            for (x, &s) in phi[h - 1].iter().enumerate() {
                if !seen[s] {
                    seen[s] = true;
                    out[s] = policy.action(h, x);
                }
            }
            out
        })
        .collect()
}

/// Whether a deterministic policy is constant on every decoder cell.
pub fn is_endogenous(policy: &PolicyTable, phi: &Decoder) -> bool {
    (1..=policy.horizon()).all(|h| {
        let map = &phi[h - 1];
        let mut chosen: Vec<Option<usize>> = Vec::new();
        map.iter().enumerate().all(|(x, &s)| {
            if chosen.len() <= s {
                chosen.resize(s + 1, None);
            }
            let a = policy.action(h, x);
            *chosen[s].get_or_insert(a) == a
        })
    })
}
