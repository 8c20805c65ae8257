//! Layered tabular MDPs and the local-simulator session.
//!
//! Layers are 1-based (`1..=H`) throughout the public API. Layer `0` denotes
//! the virtual root whose single state [`ROOT`] transitions to layer 1 through
//! the initial distribution, which lets algorithms treat `T_0` like any other
//! transition kernel.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::{Error, Result, PROB_TOL};

/// The single state of the virtual layer 0.
pub const ROOT: usize = 0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardLaw {
    /// Rewards equal their mean exactly.
    DeterministicMean,
    /// Rewards are Bernoulli with the given mean.
    #[default]
    BernoulliMean,
}

/// A finite-horizon MDP with layered state spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    horizon: usize,
    states_per_layer: Vec<usize>,
    num_actions: usize,
    init_dist: Vec<f64>,
    // transitions[h-1][x][a] is a row over layer h+1, for h in 1..H
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    reward_means: Vec<Vec<Vec<f64>>>,
    reward_law: RewardLaw,
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidModel(format!(
            "{what}: expected {len} entries, got {}",
            row.len()
        )));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidModel(format!("{what}: negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidModel(format!("{what}: sums to {total}")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        states_per_layer: Vec<usize>,
        num_actions: usize,
        init_dist: Vec<f64>,
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        reward_means: Vec<Vec<Vec<f64>>>,
        reward_law: RewardLaw,
    ) -> Result<Self> {
        let horizon = states_per_layer.len();
        if horizon == 0 {
            return Err(Error::InvalidModel("horizon must be positive".into()));
        }
        if num_actions == 0 {
            return Err(Error::InvalidModel("num_actions must be positive".into()));
        }
        if states_per_layer.iter().any(|&n| n == 0) {
            return Err(Error::InvalidModel("every layer needs at least one state".into()));
        }
        check_row(&init_dist, states_per_layer[0], "init_dist")?;
        if transitions.len() != horizon - 1 {
            return Err(Error::InvalidModel(format!(
                "expected {} transition layers, got {}",
                horizon - 1,
                transitions.len()
            )));
        }
        for (i, layer) in transitions.iter().enumerate() {
            if layer.len() != states_per_layer[i] {
                return Err(Error::InvalidModel(format!("transitions layer {}: wrong state count", i + 1)));
            }
            for (x, rows) in layer.iter().enumerate() {
                if rows.len() != num_actions {
                    return Err(Error::InvalidModel(format!(
                        "transitions layer {} state {x}: wrong action count",
                        i + 1
                    )));
                }
                for (a, row) in rows.iter().enumerate() {
                    check_row(row, states_per_layer[i + 1], &format!("T_{}[{x}][{a}]", i + 1))?;
                }
            }
        }
        if reward_means.len() != horizon {
            return Err(Error::InvalidModel("reward_means must have one entry per layer".into()));
        }
        for (i, layer) in reward_means.iter().enumerate() {
            if layer.len() != states_per_layer[i] || layer.iter().any(|r| r.len() != num_actions) {
                return Err(Error::InvalidModel(format!("reward_means layer {}: wrong shape", i + 1)));
            }
            if layer.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::InvalidModel(format!("reward_means layer {}: outside [0, 1]", i + 1)));
            }
        }
        Ok(Self {
            horizon,
            states_per_layer,
            num_actions,
            init_dist,
            transitions,
            reward_means,
            reward_law,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn states_per_layer(&self) -> &[usize] {
        &self.states_per_layer
    }

    /// Number of states at layer `h`; layer 0 has the single root state.
    pub fn num_states(&self, h: usize) -> usize {
        if h == 0 {
            1
        } else {
            self.states_per_layer[h - 1]
        }
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn reward_law(&self) -> RewardLaw {
        self.reward_law
    }

    pub fn with_reward_law(mut self, law: RewardLaw) -> Self {
        self.reward_law = law;
        self
    }

    /// Next-state distribution from `(x, a)` at layer `h`.
    ///
    /// For `h = 0` this is the initial distribution. Returns `None` at the last
    /// layer, whose successor is terminal.
    pub fn next_dist(&self, h: usize, x: usize, a: usize) -> Option<&[f64]> {
        if h == 0 {
            Some(&self.init_dist)
        } else if h < self.horizon {
            Some(&self.transitions[h - 1][x][a])
        } else {
            None
        }
    }

    /// Mean reward at `(h, x, a)`; zero at the virtual root.
    pub fn reward_mean(&self, h: usize, x: usize, a: usize) -> f64 {
        if h == 0 {
            0.0
        } else {
            self.reward_means[h - 1][x][a]
        }
    }

    /// `r(h,x,a) + E[f(x') | x, a]`, the exact evaluation backup.
    pub fn backup(&self, h: usize, x: usize, a: usize, next_values: Option<&[f64]>) -> f64 {
        let r = self.reward_mean(h, x, a);
        match (self.next_dist(h, x, a), next_values) {
            (Some(row), Some(v)) => r + row.iter().zip(v).map(|(p, v)| p * v).sum::<f64>(),
            _ => r,
        }
    }

    pub fn to_file(&self) -> MdpFile {
        let num = |v: f64| Num::F(v);
        MdpFile {
            horizon: self.horizon,
            states_per_layer: self.states_per_layer.clone(),
            num_actions: self.num_actions,
            init_dist: self.init_dist.iter().copied().map(num).collect(),
            transitions: self
                .transitions
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|rows| rows.iter().map(|r| r.iter().copied().map(num).collect()).collect())
                        .collect()
                })
                .collect(),
            reward_means: self
                .reward_means
                .iter()
                .map(|l| l.iter().map(|r| r.iter().copied().map(num).collect()).collect())
                .collect(),
            reward_law: self.reward_law,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        file.into_mdp()
    }
}

/// A probability or reward written either as a JSON number or a decimal string.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Num {
    F(f64),
    S(String),
}

impl Num {
    fn value(&self) -> Result<f64> {
        match self {
            Num::F(v) => Ok(*v),
            Num::S(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidModel(format!("bad number {s:?}: {e}"))),
        }
    }
}

/// On-disk instance format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpFile {
    pub horizon: usize,
    pub states_per_layer: Vec<usize>,
    pub num_actions: usize,
    pub init_dist: Vec<Num>,
    pub transitions: Vec<Vec<Vec<Vec<Num>>>>,
    pub reward_means: Vec<Vec<Vec<Num>>>,
    #[serde(default)]
    pub reward_law: RewardLaw,
}

impl MdpFile {
    pub fn into_mdp(self) -> Result<TabularMdp> {
        fn vals(v: &[Num]) -> Result<Vec<f64>> {
            v.iter().map(Num::value).collect()
        }
        if self.horizon != self.states_per_layer.len() {
            return Err(Error::InvalidModel(format!(
                "horizon {} disagrees with states_per_layer (len {})",
                self.horizon,
                self.states_per_layer.len()
            )));
        }
        let transitions = self
            .transitions
            .iter()
            .map(|l| l.iter().map(|rows| rows.iter().map(|r| vals(r)).collect()).collect())
            .collect::<Result<Vec<Vec<Vec<Vec<f64>>>>>>()?;
        let rewards = self
            .reward_means
            .iter()
            .map(|l| l.iter().map(|r| vals(r)).collect())
            .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
        TabularMdp::new(
            self.states_per_layer,
            self.num_actions,
            vals(&self.init_dist)?,
            transitions,
            rewards,
            self.reward_law,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub layer: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// A Markov policy: per layer, per state, a distribution over actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    probs: Vec<Vec<Vec<f64>>>,
    deterministic: bool,
}

impl PolicyTable {
    /// Deterministic policy from per-layer action choices.
    pub fn from_actions(actions: &[Vec<usize>], num_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&a| {
                        let mut row = vec![0.0; num_actions];
                        row[a] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        Self {
            probs,
            deterministic: true,
        }
    }

    pub fn constant(mdp: &TabularMdp, action: usize) -> Self {
        let actions: Vec<Vec<usize>> = mdp.states_per_layer().iter().map(|&n| vec![action; n]).collect();
        Self::from_actions(&actions, mdp.num_actions())
    }

    pub fn uniform(mdp: &TabularMdp) -> Self {
        let a = mdp.num_actions();
        let probs = mdp
            .states_per_layer()
            .iter()
            .map(|&n| vec![vec![1.0 / a as f64; a]; n])
            .collect();
        Self {
            probs,
            deterministic: a == 1,
        }
    }

    pub fn from_probs(probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mut deterministic = true;
        for (h, layer) in probs.iter().enumerate() {
            for (x, row) in layer.iter().enumerate() {
                check_row(row, row.len(), &format!("policy layer {} state {x}", h + 1))?;
                if row.iter().filter(|&&p| p > 0.0).count() != 1 || !row.contains(&1.0) {
                    deterministic = false;
                }
            }
        }
        Ok(Self { probs, deterministic })
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn horizon(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self, h: usize, x: usize) -> &[f64] {
        &self.probs[h - 1][x]
    }

    /// Most likely action (smallest index on ties); the action itself for
    /// deterministic policies.
    pub fn action(&self, h: usize, x: usize) -> usize {
        let row = &self.probs[h - 1][x];
        let mut best = 0;
        for (a, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = a;
            }
        }
        best
    }

    /// Per-layer greedy actions.
    pub fn actions(&self) -> Vec<Vec<usize>> {
        (1..=self.horizon())
            .map(|h| (0..self.probs[h - 1].len()).map(|x| self.action(h, x)).collect())
            .collect()
    }

    pub fn matches_shape(&self, mdp: &TabularMdp) -> bool {
        self.probs.len() == mdp.horizon()
            && self
                .probs
                .iter()
                .zip(mdp.states_per_layer())
                .all(|(l, &n)| l.len() == n && l.iter().all(|r| r.len() == mdp.num_actions()))
    }
}

/// Something that chooses actions during a rollout.
///
/// Implementations may draw from the simulator themselves (non-executable
/// policies); every such draw is charged to the session ledger. The session
/// cursor may be moved by `act`; [`LocalSimSession::rollout`] restores it.
pub trait ActionSource {
    fn act(&mut self, session: &mut LocalSimSession, h: usize, x: usize) -> Result<usize>;
}

impl ActionSource for PolicyTable {
    fn act(&mut self, session: &mut LocalSimSession, h: usize, x: usize) -> Result<usize> {
        if self.deterministic {
            return Ok(self.action(h, x));
        }
        let row = &self.probs[h - 1][x];
        Ok(sample_index(row, session.policy_rng().gen::<f64>()))
    }
}

impl<F> ActionSource for F
where
    F: FnMut(&mut LocalSimSession, usize, usize) -> Result<usize>,
{
    fn act(&mut self, session: &mut LocalSimSession, h: usize, x: usize) -> Result<usize> {
        self(session, h, x)
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_index(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Exact accounting of simulator usage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLedger {
    pub episodes_started: u64,
    pub transitions_sampled: u64,
    pub resets: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cursor {
    Idle,
    At { layer: usize, state: usize },
    Terminal,
}

#[derive(Clone, Debug)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn contains(&self, i: usize) -> bool {
        self.words.get(i / 64).is_some_and(|w| w & (1 << (i % 64)) != 0)
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_TRANSITION: u64 = 1;
const STREAM_REWARD: u64 = 2;
const STREAM_POLICY: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A stateful local-simulator session.
///
/// The session only ever samples from `(h, x)` pairs that it has itself
/// produced: layer-1 states become observed when an episode starts, later
/// states when a step lands on them. [`reset_to`](Self::reset_to) refuses any
/// other target.
///
/// Randomness comes from ChaCha8 streams derived from the session seed, one
/// stream per draw site (initial state, transition, reward, policy).
pub struct LocalSimSession {
    mdp: Arc<TabularMdp>,
    observed: Vec<BitSet>,
    cursor: Cursor,
    ledger: SampleLedger,
    init_rng: ChaCha8Rng,
    transition_rng: ChaCha8Rng,
    reward_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
}

impl LocalSimSession {
    pub fn new(mdp: Arc<TabularMdp>, seed: u64) -> Self {
        let observed = mdp.states_per_layer().iter().map(|&n| BitSet::new(n)).collect();
        Self {
            mdp,
            observed,
            cursor: Cursor::Idle,
            ledger: SampleLedger::default(),
            init_rng: stream(seed, STREAM_INIT),
            transition_rng: stream(seed, STREAM_TRANSITION),
            reward_rng: stream(seed, STREAM_REWARD),
            policy_rng: stream(seed, STREAM_POLICY),
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn mdp_arc(&self) -> Arc<TabularMdp> {
        Arc::clone(&self.mdp)
    }

    pub fn ledger(&self) -> SampleLedger {
        self.ledger
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    /// Randomness reserved for stochastic policies.
    pub fn policy_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.policy_rng
    }

    pub fn is_observed(&self, h: usize, x: usize) -> bool {
        h >= 1 && h <= self.mdp.horizon() && self.observed[h - 1].contains(x)
    }

    /// Draws `x_1` from the initial distribution and places the cursor there.
    pub fn start_episode(&mut self) -> usize {
        let x = sample_index(self.mdp.init_dist(), self.init_rng.gen::<f64>());
        self.observed[0].insert(x);
        self.cursor = Cursor::At { layer: 1, state: x };
        self.ledger.episodes_started += 1;
        x
    }

    /// Takes `action` at the cursor. Returns the reward and the next state, or
    /// `None` when the step leaves the last layer.
    pub fn step(&mut self, action: usize) -> Result<(f64, Option<usize>)> {
        let (h, x) = match self.cursor {
            Cursor::At { layer, state } => (layer, state),
            Cursor::Terminal => return Err(Error::TerminalCursor),
            Cursor::Idle => return Err(Error::NoEpisode),
        };
        let num_actions = self.mdp.num_actions();
        if action >= num_actions {
            return Err(Error::InvalidAction { action, num_actions });
        }
        let mean = self.mdp.reward_mean(h, x, action);
        let reward = match self.mdp.reward_law() {
            RewardLaw::DeterministicMean => mean,
            RewardLaw::BernoulliMean => {
                if self.reward_rng.gen::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let next = match self.mdp.next_dist(h, x, action) {
            Some(row) => {
                let y = sample_index(row, self.transition_rng.gen::<f64>());
                self.observed[h].insert(y);
                self.cursor = Cursor::At { layer: h + 1, state: y };
                Some(y)
            }
            None => {
                self.cursor = Cursor::Terminal;
                None
            }
        };
        self.ledger.transitions_sampled += 1;
        Ok((reward, next))
    }

    /// Moves the cursor to a previously observed state.
    pub fn reset_to(&mut self, h: usize, x: usize) -> Result<()> {
        let horizon = self.mdp.horizon();
        if h == 0 || h > horizon {
            return Err(Error::InvalidLayer { layer: h, horizon });
        }
        if !self.observed[h - 1].contains(x) {
            return Err(Error::UnobservedState { layer: h, state: x });
        }
        self.cursor = Cursor::At { layer: h, state: x };
        self.ledger.resets += 1;
        Ok(())
    }

    /// One draw of `(r, x')` from `(h, x, a)`.
    ///
    /// At layer 0 this starts a fresh episode (reward 0). Otherwise it resets
    /// to `(h, x)` and steps.
    pub fn sample_from(&mut self, h: usize, x: usize, a: usize) -> Result<(f64, Option<usize>)> {
        if h == 0 {
            return Ok((0.0, Some(self.start_episode())));
        }
        self.reset_to(h, x)?;
        self.step(a)
    }

    /// Places the cursor on `(h, x)`, starting from wherever it is. Layer 0
    /// leaves the cursor idle.
    fn ensure_at(&mut self, h: usize, x: usize) -> Result<()> {
        if h == 0 {
            self.cursor = Cursor::Idle;
            return Ok(());
        }
        if self.cursor != (Cursor::At { layer: h, state: x }) {
            self.reset_to(h, x)?;
        }
        Ok(())
    }

    /// Executes `policy` from the cursor (which must be at `from_layer`) until
    /// the episode ends and returns the visited suffix.
    pub fn rollout(&mut self, policy: &mut dyn ActionSource, from_layer: usize) -> Result<Trajectory> {
        let (mut h, mut x) = match self.cursor {
            Cursor::At { layer, state } => (layer, state),
            Cursor::Terminal => return Err(Error::TerminalCursor),
            Cursor::Idle => return Err(Error::NoEpisode),
        };
        if h != from_layer {
            return Err(Error::CursorMismatch {
                expected: from_layer,
                actual: h,
            });
        }
        let mut traj = Trajectory::default();
        loop {
            let a = policy.act(self, h, x)?;
            self.ensure_at(h, x)?;
            let (reward, next) = self.step(a)?;
            traj.steps.push(Step {
                layer: h,
                state: x,
                action: a,
                reward,
            });
            match next {
                Some(y) => {
                    h += 1;
                    x = y;
                }
                None => return Ok(traj),
            }
        }
    }

    /// Starts a fresh episode and runs `policy` to the end.
    pub fn run_episode(&mut self, policy: &mut dyn ActionSource) -> Result<Trajectory> {
        self.start_episode();
        self.rollout(policy, 1)
    }

    /// From state `x` at layer `h` (layer 0 meaning "before the episode"),
    /// follows `policy` until reaching `target` and returns the state there.
    /// No action is taken at `target`. Rewards along the way are returned in
    /// the second component.
    pub fn advance(
        &mut self,
        policy: &mut dyn ActionSource,
        h: usize,
        x: usize,
        target: usize,
    ) -> Result<(usize, f64)> {
        debug_assert!(target >= h && target <= self.mdp.horizon());
        let (mut layer, mut state) = (h, x);
        let mut total = 0.0;
        if layer == 0 {
            if target == 0 {
                return Ok((ROOT, 0.0));
            }
            state = self.start_episode();
            layer = 1;
        } else {
            self.ensure_at(layer, state)?;
        }
        while layer < target {
            let a = policy.act(self, layer, state)?;
            self.ensure_at(layer, state)?;
            let (r, next) = self.step(a)?;
            total += r;
            state = next.expect("target is within the horizon");
            layer += 1;
        }
        Ok((state, total))
    }

    /// Sum of rewards from following `policy` from `(h, x)` to the end.
    pub fn return_from(&mut self, policy: &mut dyn ActionSource, h: usize, x: usize) -> Result<f64> {
        let horizon = self.mdp.horizon();
        let (state, mut total) = self.advance(policy, h, x, horizon)?;
        let a = policy.act(self, horizon, state)?;
        self.ensure_at(horizon, state)?;
        let (r, _) = self.step(a)?;
        total += r;
        Ok(total)
    }
}
