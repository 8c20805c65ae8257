//! Recursive value function search with core-sets, regression-based
//! confidence sets and a distribution-shift test.
//!
//! The same engine runs both the greedy variant and the randomized-rounding
//! variant used for exogenous block MDPs; they differ only in how backups are
//! turned into actions and in the test threshold (see [`RvfsParams`]).

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::backup::{ceil_count, BackupParams, BackupPolicy, Selector};
use crate::classes::{FinitePolicyClass, FiniteVClass};
use crate::imitation::{behavior_cloning, CloneOutput, CloneParams};
use crate::mdp::{LocalSimSession, PolicyTable, SampleLedger, TabularMdp, ROOT};
use crate::oracle::{argmax, VTable};
use crate::{Error, Result, TIE_TOL};

/// Desk-scale adjustments applied on top of the theoretical parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    /// Multiplies `N_test` and `N_reg`.
    pub scale: f64,
    pub n_sim: Option<u64>,
    pub n_test: Option<u64>,
    pub n_reg: Option<u64>,
    pub n_est: Option<u64>,
    /// Caps the core-set size below `M`.
    pub max_core: Option<u64>,
    /// Record one trace event per passed test.
    pub trace_passes: bool,
}

impl Default for Overrides {
    fn default() -> Self {
        Self {
            scale: 1.0,
            n_sim: None,
            n_test: None,
            n_reg: None,
            n_est: None,
            max_core: None,
            trace_passes: false,
        }
    }
}

fn capped(x: u64, cap: Option<u64>) -> u64 {
    cap.map_or(x, |c| x.min(c.max(1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvfsParams {
    pub eps: f64,
    pub delta: f64,
    pub horizon: usize,
    pub num_actions: usize,
    pub class_size: usize,
    pub m: u64,
    /// Unscaled `N_test` and `N_reg`, which also define the thresholds.
    pub n_test_theory: f64,
    pub n_reg_theory: f64,
    pub n_test: u64,
    pub n_reg: u64,
    pub n_est_cap: Option<u64>,
    pub ln_inv_delta_prime: f64,
    pub eps_reg_sq: f64,
    /// 2 for the greedy variant, 1 for the rounding variant.
    pub beta_factor: f64,
    /// Test threshold is `base + base * beta(t)`.
    pub threshold_base: f64,
    pub backup: BackupParams,
    pub selector: Selector,
    pub core_limit: u64,
    pub trace_passes: bool,
}

impl RvfsParams {
    /// Greedy variant: `M = ceil(8 C_push H / eps)`,
    /// `N_test = 2^8 M^2 H eps^-1 ln(8 M^6 H^8 eps^-2 / delta)`,
    /// `N_reg = 2^8 M^2 eps^-1 ln(8 |V|^2 H M^2 / delta)`,
    /// `delta' = delta / (8 M^7 N_test^2 H^8 |V|)`.
    pub fn greedy(
        eps: f64,
        delta: f64,
        c_push: f64,
        horizon: usize,
        num_actions: usize,
        class_size: usize,
        ov: &Overrides,
    ) -> Result<Self> {
        validate(eps, delta, class_size)?;
        let h = horizon as f64;
        let v = class_size as f64;
        let m = ceil_count(8.0 * c_push * h / eps);
        let mf = m as f64;
        let ln_d = -delta.ln();
        let n_test_theory =
            256.0 * mf * mf * h / eps * (8f64.ln() + 6.0 * mf.ln() + 8.0 * h.ln() - 2.0 * eps.ln() + ln_d);
        let n_reg_theory = 256.0 * mf * mf / eps * (8f64.ln() + 2.0 * v.ln() + h.ln() + 2.0 * mf.ln() + ln_d);
        let ln_inv_delta_prime =
            8f64.ln() + 7.0 * mf.ln() + 2.0 * n_test_theory.ln() + 8.0 * h.ln() + v.ln() + ln_d;
        let eps_reg_sq = eps_reg_sq(mf, h, v, 2.0, n_reg_theory, n_test_theory, ln_d);
        let backup = BackupParams::from_log(eps, ln_inv_delta_prime)?.capped(ov.n_sim);
        Ok(Self::assemble(
            eps,
            delta,
            horizon,
            num_actions,
            class_size,
            m,
            n_test_theory,
            n_reg_theory,
            ln_inv_delta_prime,
            eps_reg_sq,
            2.0,
            eps,
            backup,
            Selector::Greedy,
            ov,
        ))
    }

    /// Rounding variant: `M = ceil(8 eps^-2 C_exo S A H)`,
    /// `N_test = 2^8 M^2 H eps^-2 ln(8 M^6 H^8 eps^-2 / delta)`,
    /// `N_reg = 2^8 M^2 eps^-2 ln(8 |V| H M^2 / delta)`,
    /// `delta' = delta / (4 M^7 N_test^2 H^8 |V|)`, backups at accuracy
    /// `eps^2`, actions `argmax ceil(P/eps + zeta)`.
    #[allow(clippy::too_many_arguments)]
    pub fn rounded(
        eps: f64,
        delta: f64,
        c_exo: f64,
        num_latent: usize,
        horizon: usize,
        num_actions: usize,
        class_size: usize,
        zeta: Vec<f64>,
        ov: &Overrides,
    ) -> Result<Self> {
        validate(eps, delta, class_size)?;
        if zeta.len() != horizon || zeta.iter().any(|z| !(0.0..=0.5).contains(z)) {
            return Err(Error::InvalidConfig("need one zeta in [0, 1/2] per layer".into()));
        }
        let h = horizon as f64;
        let v = class_size as f64;
        let e2 = eps * eps;
        let m = ceil_count(8.0 * c_exo * (num_latent * num_actions) as f64 * h / e2);
        let mf = m as f64;
        let ln_d = -delta.ln();
        let n_test_theory =
            256.0 * mf * mf * h / e2 * (8f64.ln() + 6.0 * mf.ln() + 8.0 * h.ln() - 2.0 * eps.ln() + ln_d);
        let n_reg_theory = 256.0 * mf * mf / e2 * (8f64.ln() + v.ln() + h.ln() + 2.0 * mf.ln() + ln_d);
        let ln_inv_delta_prime =
            4f64.ln() + 7.0 * mf.ln() + 2.0 * n_test_theory.ln() + 8.0 * h.ln() + v.ln() + ln_d;
        let eps_reg_sq = eps_reg_sq(mf, h, v, 1.0, n_reg_theory, n_test_theory, ln_d);
        let backup = BackupParams::from_log(e2, ln_inv_delta_prime)?.capped(ov.n_sim);
        Ok(Self::assemble(
            eps,
            delta,
            horizon,
            num_actions,
            class_size,
            m,
            n_test_theory,
            n_reg_theory,
            ln_inv_delta_prime,
            eps_reg_sq,
            1.0,
            e2,
            backup,
            Selector::Rounded { zeta, eps },
            ov,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        eps: f64,
        delta: f64,
        horizon: usize,
        num_actions: usize,
        class_size: usize,
        m: u64,
        n_test_theory: f64,
        n_reg_theory: f64,
        ln_inv_delta_prime: f64,
        eps_reg_sq: f64,
        beta_factor: f64,
        threshold_base: f64,
        backup: BackupParams,
        selector: Selector,
        ov: &Overrides,
    ) -> Self {
        Self {
            eps,
            delta,
            horizon,
            num_actions,
            class_size,
            m,
            n_test_theory,
            n_reg_theory,
            n_test: capped(ceil_count(ov.scale * n_test_theory), ov.n_test),
            n_reg: capped(ceil_count(ov.scale * n_reg_theory), ov.n_reg),
            n_est_cap: ov.n_est,
            ln_inv_delta_prime,
            eps_reg_sq,
            beta_factor,
            threshold_base,
            backup,
            selector,
            core_limit: capped(m, ov.max_core),
            trace_passes: ov.trace_passes,
        }
    }

    /// `N_est(k) = ceil(2 N_reg^2 ln(8 A N_reg H k^3 / delta))`.
    pub fn n_est(&self, k: usize) -> u64 {
        let n = self.n_reg as f64;
        let inner = (8.0 * self.num_actions as f64 * n * self.horizon as f64 / self.delta).ln()
            + 3.0 * (k.max(1) as f64).ln();
        capped(ceil_count(2.0 * n * n * inner), self.n_est_cap)
    }

    /// `beta(t) = sqrt(c log_{1/delta'}(8 A M |V| t^2 / delta))`.
    pub fn beta(&self, t: u64) -> f64 {
        let num = (8.0 * (self.num_actions as f64) * self.m as f64 * self.class_size as f64 / self.delta).ln()
            + 2.0 * (t.max(1) as f64).ln();
        (self.beta_factor * num / self.ln_inv_delta_prime).sqrt()
    }

    pub fn threshold(&self, t: u64) -> f64 {
        self.threshold_base * (1.0 + self.beta(t))
    }
}

fn validate(eps: f64, delta: f64, class_size: usize) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "eps and delta must lie in (0, 1), got {eps}, {delta}"
        )));
    }
    if class_size == 0 {
        return Err(Error::EmptyClass);
    }
    Ok(())
}

/// `9 M H^2 ln(8 M^2 H |V|^p / delta) / N_reg + 34 M H^3 ln(8 M^6 N_test^2 H^8 / delta) / N_test`.
fn eps_reg_sq(m: f64, h: f64, v: f64, v_pow: f64, n_reg: f64, n_test: f64, ln_d: f64) -> f64 {
    let a = 9.0 * m * h * h * (8f64.ln() + 2.0 * m.ln() + h.ln() + v_pow * v.ln() + ln_d) / n_reg;
    let b = 34.0 * m * h.powi(3) * (8f64.ln() + 6.0 * m.ln() + 2.0 * n_test.ln() + 8.0 * h.ln() + ln_d) / n_test;
    a + b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Enter,
    TestPass,
    TestFail,
    Refit,
    Recurse,
    Return,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Enter => "enter",
            TraceKind::TestPass => "test_pass",
            TraceKind::TestFail => "test_fail",
            TraceKind::Refit => "refit",
            TraceKind::Recurse => "recurse",
            TraceKind::Return => "return",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: TraceKind,
    pub layer: usize,
    pub core_size: usize,
    pub counter: u64,
    pub ledger: SampleLedger,
}

/// CSV rendering of a trace.
pub fn trace_csv(trace: &[TraceEvent]) -> String {
    let mut out = String::from("event,layer,core_size,counter,episodes_started,transitions_sampled,resets\n");
    for e in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.kind.as_str(),
            e.layer,
            e.core_size,
            e.counter,
            e.ledger.episodes_started,
            e.ledger.transitions_sampled,
            e.ledger.resets
        );
    }
    out
}

/// Checks that within every invocation, once the last direct sub-call at
/// level `h` has returned, no sub-call at a level above `h` follows.
pub fn check_recursion_order(trace: &[TraceEvent]) -> bool {
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    for e in trace {
        match e.kind {
            TraceKind::Enter => {
                stack.last_mut().expect("root frame").push(e.layer);
                stack.push(Vec::new());
            }
            TraceKind::Return => {
                let children = stack.pop().expect("balanced trace");
                if !children_ordered(&children) {
                    return false;
                }
            }
            _ => {}
        }
    }
    stack.len() == 1 && children_ordered(&stack[0])
}

fn children_ordered(levels: &[usize]) -> bool {
    levels.iter().enumerate().all(|(i, &h)| {
        let last = levels.iter().rposition(|&l| l == h).expect("present");
        i != last || levels[last + 1..].iter().all(|&l| l <= h)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub state: usize,
    pub action: usize,
    pub v_hat: usize,
    /// Number of refits of the layer when the entry was recorded; identifies
    /// the confidence set in force.
    pub confidence_version: u64,
    pub counter: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvfsState {
    /// Selected class member for `V_h`, at index `h - 1`.
    pub v_hat: Vec<usize>,
    /// `datasets[h - 1][i]`: `(x_h, label)` pairs for the `i`-th core pair.
    pub datasets: Vec<Vec<Vec<(usize, f64)>>>,
    /// `core_sets[h]` for `h = 0..=H`: pairs `(x_{h-1}, a_{h-1})`.
    pub core_sets: Vec<Vec<(usize, usize)>>,
    pub buffers: Vec<Vec<BufferEntry>>,
    /// `counters[h]` for `h = 0..=H`.
    pub counters: Vec<u64>,
    /// Confidence membership per layer, at index `h - 1`.
    pub confidence: Vec<Vec<bool>>,
    pub refits: Vec<u64>,
    pub trace: Vec<TraceEvent>,
}

impl RvfsState {
    /// Arbitrary initial estimates (member 0), full confidence sets, and the
    /// root pair in `C_0`.
    pub fn new(horizon: usize, class_size: usize) -> Self {
        let mut core_sets = vec![Vec::new(); horizon + 1];
        core_sets[0].push((ROOT, 0));
        Self {
            v_hat: vec![0; horizon],
            datasets: vec![Vec::new(); horizon],
            core_sets,
            buffers: vec![Vec::new(); horizon + 1],
            counters: vec![0; horizon + 1],
            confidence: vec![vec![true; class_size]; horizon],
            refits: vec![0; horizon],
            trace: Vec::new(),
        }
    }

    /// The selected value tables as a [`VTable`].
    pub fn value_table(&self, class: &FiniteVClass) -> VTable {
        VTable(
            self.v_hat
                .iter()
                .enumerate()
                .map(|(i, &id)| class.members[id].0[i].clone())
                .collect(),
        )
    }
}

/// Confidence-set discrepancy of `f` against `V_hat` on a layer's datasets.
pub fn confidence_discrepancy(v_hat: &[f64], f: &[f64], datasets: &[Vec<(usize, f64)>], n_reg: u64) -> f64 {
    datasets
        .iter()
        .map(|d| d.iter().map(|&(x, _)| (v_hat[x] - f[x]).powi(2)).sum::<f64>() / n_reg as f64)
        .sum()
}

/// Whether `f` belongs to the confidence set; every `f` does when no data
/// has been collected.
pub fn confidence_member(v_hat: &[f64], f: &[f64], datasets: &[Vec<(usize, f64)>], n_reg: u64, eps_reg_sq: f64) -> bool {
    datasets.iter().all(Vec::is_empty) || confidence_discrepancy(v_hat, f, datasets, n_reg) <= eps_reg_sq
}

/// Smallest-id least-squares fit at `layer` over the whole class.
pub fn least_squares(class: &FiniteVClass, layer: usize, datasets: &[Vec<(usize, f64)>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (id, m) in class.members.iter().enumerate() {
        let f = m.layer(layer);
        let loss: f64 = datasets.iter().flatten().map(|&(x, y)| (f[x] - y).powi(2)).sum();
        if loss < best.1 - TIE_TOL {
            best = (id, loss);
        }
    }
    best.0
}

struct Engine<'a> {
    session: &'a mut LocalSimSession,
    class: &'a FiniteVClass,
    params: &'a RvfsParams,
    state: RvfsState,
}

impl<'a> Engine<'a> {
    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn policy(&self) -> BackupPolicy<'a> {
        backup_policy(self.class, &self.state, self.params)
    }

    fn event(&mut self, kind: TraceKind, layer: usize) {
        self.state.trace.push(TraceEvent {
            kind,
            layer,
            core_size: self.state.core_sets[layer].len(),
            counter: self.state.counters[layer],
            ledger: self.session.ledger(),
        });
    }

    /// One distribution-shift test at `(l - 1, x, a)`; true on failure.
    fn test(&mut self, l: usize, x: usize, a: usize) -> Result<bool> {
        let n_states = self.session.mdp().num_states(l);
        let mut counts = vec![0u64; n_states];
        let n = self.params.backup.n_sim;
        for _ in 0..n {
            let (_, y) = self.session.sample_from(l - 1, x, a)?;
            counts[y.expect("layer l exists")] += 1;
        }
        let v_hat = self.class.members[self.state.v_hat[l - 1]].layer(l);
        let mut sup: f64 = 0.0;
        for (id, member) in self.class.members.iter().enumerate() {
            if !self.state.confidence[l - 1][id] {
                continue;
            }
            let f = member.layer(l);
            let diff: f64 = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(y, &c)| c as f64 * (v_hat[y] - f[y]))
                .sum::<f64>()
                / n as f64;
            sup = sup.max(diff.abs());
        }
        Ok(sup > self.params.threshold(self.state.counters[l]))
    }

    fn draw_start(&mut self, h: usize, xp: usize, ap: usize) -> Result<usize> {
        if h == 0 {
            return Ok(ROOT);
        }
        let (_, y) = self.session.sample_from(h - 1, xp, ap)?;
        Ok(y.expect("layer h exists"))
    }

    fn run(&mut self, h: usize) -> Result<()> {
        self.event(TraceKind::Enter, h);
        let horizon = self.horizon();
        let num_actions = self.params.num_actions;
        'sweep: loop {
            let core = self.state.core_sets[h].clone();
            for &(xp, ap) in &core {
                for l in (h + 1..=horizon).rev() {
                    for _ in 0..self.params.n_test {
                        let xh = self.draw_start(h, xp, ap)?;
                        let x = if l - 1 == h {
                            xh
                        } else {
                            let mut pi = self.policy();
                            self.session.advance(&mut pi, h, xh, l - 1)?.0
                        };
                        for a in 0..num_actions {
                            self.state.counters[l] += 1;
                            if !self.test(l, x, a)? {
                                if self.params.trace_passes {
                                    self.event(TraceKind::TestPass, l);
                                }
                                continue;
                            }
                            self.fail(l, x, a)?;
                            for tau in (h + 1..=l).rev() {
                                self.event(TraceKind::Recurse, tau);
                                self.run(tau)?;
                            }
                            continue 'sweep;
                        }
                    }
                }
            }
            break;
        }
        if h > 0 {
            self.refit(h)?;
        }
        self.event(TraceKind::Return, h);
        Ok(())
    }

    fn fail(&mut self, l: usize, x: usize, a: usize) -> Result<()> {
        let size = self.state.core_sets[l].len() + 1;
        if size as u64 > self.params.core_limit {
            return Err(Error::BudgetExceeded {
                layer: l,
                size,
                limit: self.params.core_limit,
            });
        }
        self.state.core_sets[l].push((x, a));
        self.state.buffers[l].push(BufferEntry {
            state: x,
            action: a,
            v_hat: self.state.v_hat[l - 1],
            confidence_version: self.state.refits[l - 1],
            counter: self.state.counters[l],
        });
        self.event(TraceKind::TestFail, l);
        Ok(())
    }

    fn refit(&mut self, h: usize) -> Result<()> {
        let core = self.state.core_sets[h].clone();
        let n_est = self.params.n_est(core.len());
        let mut datasets = Vec::with_capacity(core.len());
        for &(xp, ap) in &core {
            let mut d = Vec::with_capacity(self.params.n_reg.min(1 << 16) as usize);
            for _ in 0..self.params.n_reg {
                let xh = self.draw_start(h, xp, ap)?;
                let mut total = 0.0;
                for _ in 0..n_est {
                    let mut pi = self.policy();
                    total += self.session.return_from(&mut pi, h, xh)?;
                }
                d.push((xh, total / n_est as f64));
            }
            datasets.push(d);
        }
        let id = least_squares(self.class, h, &datasets);
        let v_hat = self.class.members[id].layer(h);
        self.state.confidence[h - 1] = self
            .class
            .members
            .iter()
            .map(|f| confidence_member(v_hat, f.layer(h), &datasets, self.params.n_reg, self.params.eps_reg_sq))
            .collect();
        self.state.v_hat[h - 1] = id;
        self.state.datasets[h - 1] = datasets;
        self.state.refits[h - 1] += 1;
        self.event(TraceKind::Refit, h);
        Ok(())
    }
}

/// The non-executable policy `argmax_a phat[V_hat_{h+1}](x, a)` (or its
/// rounded version) for the current estimates.
pub fn backup_policy<'a>(class: &'a FiniteVClass, state: &RvfsState, params: &RvfsParams) -> BackupPolicy<'a> {
    BackupPolicy {
        values: state
            .v_hat
            .iter()
            .enumerate()
            .map(|(i, &id)| Some(class.members[id].layer(i + 1)))
            .collect(),
        params: params.backup,
        selector: params.selector.clone(),
    }
}

/// Runs the search from level `h` on `state`.
pub fn rvfs(
    session: &mut LocalSimSession,
    h: usize,
    state: RvfsState,
    class: &FiniteVClass,
    params: &RvfsParams,
) -> Result<RvfsState> {
    if class.is_empty() {
        return Err(Error::EmptyClass);
    }
    if h > params.horizon {
        return Err(Error::InvalidLayer {
            layer: h,
            horizon: params.horizon,
        });
    }
    let mut engine = Engine {
        session,
        class,
        params,
        state,
    };
    engine.run(h)?;
    Ok(engine.state)
}

/// Greedy policy with respect to exact backups of the estimates, used to
/// compare the learned (non-executable) policy with oracle policies.
pub fn exact_greedy_policy(mdp: &TabularMdp, values: &VTable) -> PolicyTable {
    let actions: Vec<Vec<usize>> = (1..=mdp.horizon())
        .map(|h| {
            (0..mdp.num_states(h))
                .map(|x| {
                    let row: Vec<f64> = (0..mdp.num_actions())
                        .map(|a| mdp.backup(h, x, a, values.next(h)))
                        .collect();
                    argmax(&row)
                })
                .collect()
        })
        .collect();
    PolicyTable::from_actions(&actions, mdp.num_actions())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvfsBcOutput {
    pub policy: PolicyTable,
    pub params: RvfsParams,
    pub state: RvfsState,
    pub clone: CloneOutput,
    pub rvfs_ledger: SampleLedger,
}

/// Runs the search at level 0 with `eps / (48 H)` and `delta / 10`, then
/// clones the backup-greedy policy into `policies` with `(eps, delta / 2)`.
pub fn rvfs_bc(
    session: &mut LocalSimSession,
    policies: &FinitePolicyClass,
    values: &FiniteVClass,
    eps: f64,
    delta: f64,
    c_push: f64,
    ov: &Overrides,
    n_bc_cap: Option<u64>,
) -> Result<RvfsBcOutput> {
    let horizon = session.mdp().horizon();
    let num_actions = session.mdp().num_actions();
    let eps_rvfs = eps / (48.0 * horizon as f64);
    let params = RvfsParams::greedy(eps_rvfs, delta / 10.0, c_push, horizon, num_actions, values.len(), ov)?;
    let state = rvfs(session, 0, RvfsState::new(horizon, values.len()), values, &params)?;
    let rvfs_ledger = session.ledger();
    let mut expert = backup_policy(values, &state, &params);
    let clone_params = CloneParams::new(eps, delta / 2.0, horizon, policies.len())?.capped(n_bc_cap);
    let clone = behavior_cloning(session, policies, &mut expert, &clone_params)?;
    Ok(RvfsBcOutput {
        policy: clone.policy.clone(),
        params,
        state,
        clone,
        rvfs_ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::twochain;
    use crate::oracle::value_iteration;
    use std::sync::Arc;

    fn ev(kind: TraceKind, layer: usize) -> TraceEvent {
        TraceEvent {
            kind,
            layer,
            core_size: 0,
            counter: 0,
            ledger: SampleLedger::default(),
        }
    }

    #[test]
    fn recursion_order_detects_late_deeper_call() {
        use TraceKind::{Enter, Return};
        let good = [ev(Enter, 0), ev(Enter, 2), ev(Return, 2), ev(Enter, 1), ev(Return, 1), ev(Return, 0)];
        assert!(check_recursion_order(&good));
        let bad = [ev(Enter, 0), ev(Enter, 1), ev(Return, 1), ev(Enter, 2), ev(Return, 2), ev(Return, 0)];
        assert!(!check_recursion_order(&bad));
    }

    #[test]
    fn params_monotone_and_positive() {
        let p = RvfsParams::greedy(0.25, 0.1, 2.0, 2, 2, 2, &Overrides::default()).unwrap();
        assert_eq!(p.m, 128);
        assert!(p.n_test >= 1 && p.n_reg >= 1 && p.n_est(1) >= 1);
        assert!(p.beta(10) > p.beta(1));
        assert!(p.eps_reg_sq > 0.0);
    }

    #[test]
    fn confidence_membership_rules() {
        let v = [0.0, 1.0];
        assert!(confidence_member(&v, &[5.0, 5.0], &[vec![]], 4, 0.0));
        assert!(confidence_member(&v, &v, &[vec![(0, 0.0), (1, 1.0)]], 2, 0.0));
        assert!(!confidence_member(&v, &[0.0, 0.0], &[vec![(1, 1.0)]], 1, 0.5));
    }

    #[test]
    fn twochain_recovers_optimal_policy() {
        let mdp = Arc::new(twochain());
        let vstar = value_iteration(&mdp).v;
        let mut bad = vstar.clone();
        bad.0[1] = vec![1.0, 0.0];
        let class = FiniteVClass::hand_built(vec![bad, vstar.clone()]).unwrap();
        let ov = Overrides {
            n_sim: Some(8),
            n_test: Some(4),
            n_reg: Some(4),
            n_est: Some(2),
            ..Overrides::default()
        };
        let params = RvfsParams::greedy(0.25, 0.1, 2.0, 2, 2, class.len(), &ov).unwrap();
        let mut s = LocalSimSession::new(mdp.clone(), 3);
        let state = rvfs(&mut s, 0, RvfsState::new(2, class.len()), &class, &params).unwrap();
        let pi = exact_greedy_policy(&mdp, &state.value_table(&class));
        assert_eq!(pi.action(1, 0), 1);
        assert!(check_recursion_order(&state.trace));
        assert!(state.core_sets.iter().all(|c| c.len() as u64 <= params.m));
    }
}
