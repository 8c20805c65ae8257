//! Experiment configuration, orchestration and metric emission.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::classes::{
    build_exbmdp_policy_class, build_exbmdp_q_class, build_exbmdp_v_class, ClassShape, DecoderClass, Grid, LatentV,
};
use crate::exbmdp::{flatten, generate_exbmdp, project_actions, project_v, ExbmdpSpec, ExbmdpTargets, DEFAULT_FLATTEN_LIMIT};
use crate::imitation::{behavior_cloning, CloneParams};
use crate::instances::twochain;
use crate::mdp::{LocalSimSession, MdpFile, PolicyTable, SampleLedger, TabularMdp};
use crate::oracle::{
    benchmark_bar_policy, coverability, expected_return, min_gap, pushforward_coverability, value_iteration, GapReport,
    QTable, VTable,
};
use crate::rvfs::{rvfs_bc, Overrides};
use crate::rvfs_exo::{draw_zetas, rvfs_exo_bc, BoostConfig, BoostInputs, BoostOptions, ExpertKind};
use crate::simgolf::{run_simgolf, SimGolfParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceSource {
    Twochain,
    File { path: PathBuf },
    Generator {
        targets: ExbmdpTargets,
        /// Generator seed; defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Simgolf,
    RvfsBc,
    RvfsExoBc,
    BehaviorCloning,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Desk-scale overrides. Unset fields keep the theoretical values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleOverrides {
    /// Multiplies `N_test` and `N_reg`, and `N` of SimGolf unless `scale_n` is set.
    pub scale: f64,
    pub scale_n: Option<f64>,
    pub scale_k: f64,
    pub simgolf_n: Option<u64>,
    pub simgolf_k: Option<u64>,
    pub n_sim: Option<u64>,
    pub n_test: Option<u64>,
    pub n_reg: Option<u64>,
    pub n_est: Option<u64>,
    pub n_bc: Option<u64>,
    pub n_eval: Option<u64>,
    pub max_core: Option<u64>,
}

impl Default for ScaleOverrides {
    fn default() -> Self {
        Self {
            scale: 1.0,
            scale_n: None,
            scale_k: 1.0,
            simgolf_n: None,
            simgolf_k: None,
            n_sim: None,
            n_test: None,
            n_reg: None,
            n_est: None,
            n_bc: None,
            n_eval: None,
            max_core: None,
        }
    }
}

impl ScaleOverrides {
    pub fn rvfs(&self) -> Overrides {
        Overrides {
            scale: self.scale,
            n_sim: self.n_sim,
            n_test: self.n_test,
            n_reg: self.n_reg,
            n_est: self.n_est,
            max_core: self.max_core,
            trace_passes: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassConfig {
    /// Random members per decoder.
    pub budget: usize,
    /// Grid resolution; defaults to the largest divisor step of `H` not above `eps / 4`.
    pub grid_step: Option<f64>,
    pub expert: ExpertKind,
}

impl Default for ClassConfig {
    fn default() -> Self {
        Self {
            budget: 8,
            grid_step: None,
            expert: ExpertKind::Greedy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds of a sweep; a single run uses `seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub instance: InstanceSource,
    pub algorithm: Algorithm,
    pub eps: f64,
    pub delta: f64,
    /// Accuracy values of a sweep; a single run uses `eps`.
    #[serde(default)]
    pub sweep_eps: Vec<f64>,
    #[serde(default)]
    pub scale: ScaleOverrides,
    #[serde(default)]
    pub classes: ClassConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
}

impl ExperimentConfig {
    pub fn new(instance: InstanceSource, algorithm: Algorithm, eps: f64, delta: f64, seed: u64) -> Self {
        Self {
            seed,
            seeds: Vec::new(),
            instance,
            algorithm,
            eps,
            delta,
            sweep_eps: Vec::new(),
            scale: ScaleOverrides::default(),
            classes: ClassConfig::default(),
            output: None,
            format: Format::Csv,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eps and delta must lie in (0, 1), got {} and {}",
                self.eps, self.delta
            )));
        }
        if !(self.scale.scale > 0.0 && self.scale.scale_k > 0.0) || self.scale.scale_n.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("scales must be positive".into()));
        }
        if self.algorithm == Algorithm::RvfsExoBc {
            let InstanceSource::Generator { targets, .. } = &self.instance else {
                return Err(Error::InvalidConfig("rvfs_exo_bc needs a generated ExBMDP instance".into()));
            };
            BoostConfig::new(self.eps, self.delta, targets.num_latent, targets.num_actions, targets.horizon, 1)?;
        }
        Ok(())
    }
}

/// Independent 64-bit seed for a named purpose.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + stream);
    rng.next_u64()
}

const SEED_SESSION: u64 = 0;
const SEED_CLASS: u64 = 1;
const SEED_ZETA: u64 = 2;

/// A tabular instance, with its ExBMDP structure when generated.
pub struct Instance {
    pub mdp: Arc<TabularMdp>,
    pub exbmdp: Option<(ExbmdpSpec, DecoderClass)>,
}

impl Instance {
    pub fn build(source: &InstanceSource, seed: u64) -> Result<Self> {
        match source {
            InstanceSource::Twochain => Ok(Self {
                mdp: Arc::new(twochain()),
                exbmdp: None,
            }),
            InstanceSource::File { path } => {
                let mdp = TabularMdp::from_json(&std::fs::read_to_string(path)?)?;
                Ok(Self {
                    mdp: Arc::new(mdp),
                    exbmdp: None,
                })
            }
            InstanceSource::Generator { targets, seed: gen_seed } => {
                let (spec, decoders) = generate_exbmdp(gen_seed.unwrap_or(seed), targets)?;
                let mdp = flatten(&spec, DEFAULT_FLATTEN_LIMIT)?;
                Ok(Self {
                    mdp: Arc::new(mdp),
                    exbmdp: Some((spec, decoders)),
                })
            }
        }
    }

    pub fn decoders(&self) -> DecoderClass {
        match &self.exbmdp {
            Some((_, d)) => d.clone(),
            None => DecoderClass::identity(&self.mdp),
        }
    }

    pub fn num_latent(&self) -> usize {
        match &self.exbmdp {
            Some((spec, _)) => spec.num_latent,
            None => self.mdp.states_per_layer().iter().copied().max().unwrap_or(1),
        }
    }

    /// Projects an observation-level table onto latents of the true decoder.
    fn latent_v(&self, v: &VTable) -> LatentV {
        let d = self.decoders();
        project_v(v, d.truth(), self.num_latent())
    }

    fn latent_q(&self, q: &QTable) -> Vec<Vec<Vec<f64>>> {
        let d = self.decoders();
        let n = self.num_latent();
        q.0.iter()
            .zip(d.truth())
            .map(|(layer, map)| {
                let mut out = vec![vec![0.0; self.mdp.num_actions()]; n];
                for (x, &s) in map.iter().enumerate().rev() {
                    out[s] = layer[x].clone();
                }
                out
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub step: u64,
    pub event: String,
    pub layer: usize,
    pub size: usize,
    pub metric_a: f64,
    pub metric_b: f64,
    pub transitions: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub eps: f64,
    pub j_star: f64,
    pub j_output: f64,
    pub suboptimality: f64,
    pub ledger: SampleLedger,
    pub diagnostics: Vec<DiagnosticRow>,
    pub output_policy: PolicyTable,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

fn shape(inst: &Instance, config: &ExperimentConfig, seed: u64) -> Result<ClassShape> {
    let h = inst.mdp.horizon();
    let grid_step = match config.classes.grid_step {
        Some(s) => s,
        None => Grid::fitted(h, config.eps / 4.0).step,
    };
    Ok(ClassShape {
        num_latent: inst.num_latent(),
        num_actions: inst.mdp.num_actions(),
        horizon: h,
        grid_step,
        budget: config.classes.budget,
        seed: derive_seed(seed, SEED_CLASS),
    })
}

/// Builds the instance and classes, runs the algorithm through a fresh
/// session and evaluates the output exactly.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let seed = config.seed;
    let inst = Instance::build(&config.instance, seed)?;
    let mdp = Arc::clone(&inst.mdp);
    let optimum = value_iteration(&mdp);
    let j_star = optimum.value(&mdp);
    let decoders = inst.decoders();
    let shape = shape(&inst, config, seed)?;
    let sc = &config.scale;
    let mut session = LocalSimSession::new(Arc::clone(&mdp), derive_seed(seed, SEED_SESSION));
    let (policy_value, output_policy, diagnostics) = match config.algorithm {
        Algorithm::Simgolf => {
            let class = build_exbmdp_q_class(&decoders, shape, &[inst.latent_q(&optimum.q)])?;
            let horizon = mdp.horizon();
            let params = match (sc.simgolf_n, sc.simgolf_k) {
                (Some(n), Some(k)) => SimGolfParams::with_counts(n, k, config.delta, horizon, class.len()),
                _ => SimGolfParams::new(
                    coverability(&mdp).max,
                    config.eps,
                    config.delta,
                    horizon,
                    class.len(),
                    sc.scale_n.unwrap_or(sc.scale),
                    sc.scale_k,
                )?,
            };
            let out = run_simgolf(&mut session, &class, &params)?;
            let rows = out
                .diagnostics
                .iter()
                .map(|r| DiagnosticRow {
                    step: r.t,
                    event: "iteration".into(),
                    layer: 0,
                    size: r.active_set_size,
                    metric_a: r.j_pi_t_exact,
                    metric_b: r.residual_max,
                    transitions: 0,
                })
                .collect();
            let value = out.mixture.expected_return(&mdp);
            let last = out.mixture.components.last().cloned().expect("N >= 1");
            (value, last, rows)
        }
        Algorithm::RvfsBc => {
            let values = build_exbmdp_v_class(&decoders, shape, &[inst.latent_v(&optimum.v)], true)?;
            let star_actions = project_actions(&optimum.policy, decoders.truth(), inst.num_latent());
            let policies = build_exbmdp_policy_class(&decoders, shape, &[star_actions])?;
            let out = rvfs_bc(
                &mut session,
                &policies,
                &values,
                config.eps,
                config.delta,
                pushforward_coverability(&mdp).max,
                &sc.rvfs(),
                sc.n_bc,
            )?;
            let rows = trace_rows(&out.state.trace);
            (expected_return(&mdp, &out.policy), out.policy, rows)
        }
        Algorithm::RvfsExoBc => {
            let (spec, _) = inst.exbmdp.as_ref().expect("validated");
            let star_actions = project_actions(&optimum.policy, decoders.truth(), spec.num_latent);
            let n_boost = BoostConfig::new(config.eps, config.delta, spec.num_latent, spec.num_actions, spec.horizon, 1)?;
            let mut zrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_ZETA));
            let zetas = draw_zetas(&mut zrng, n_boost.n_boost, spec.horizon);
            let mut v_targets = Vec::new();
            let mut pi_targets = vec![star_actions];
            for z in &zetas {
                let bench = benchmark_bar_policy(&mdp, n_boost.eps_rvfs, z);
                v_targets.push(project_v(&bench.values, decoders.truth(), spec.num_latent));
                pi_targets.push(project_actions(&bench.policy, decoders.truth(), spec.num_latent));
            }
            let values = build_exbmdp_v_class(&decoders, shape, &v_targets, true)?;
            let policies = build_exbmdp_policy_class(&decoders, shape, &pi_targets)?;
            let opts = BoostOptions {
                overrides: sc.rvfs(),
                n_bc_cap: sc.n_bc,
                n_eval_cap: sc.n_eval,
                expert: config.classes.expert,
                oracle_decoder: Some(decoders.truth().clone()),
            };
            let inputs = BoostInputs {
                values: &values,
                policies: &policies,
                zetas: &zetas,
                c_exo: spec.weak_correlation(),
                num_latent: spec.num_latent,
            };
            let out = rvfs_exo_bc(&mut session, &inputs, config.eps, config.delta, &opts)?;
            let rows = out
                .rounds
                .iter()
                .enumerate()
                .map(|(i, r)| DiagnosticRow {
                    step: i as u64 + 1,
                    event: "boost".into(),
                    layer: 0,
                    size: r.max_core,
                    metric_a: r.j_hat,
                    metric_b: r.j_exact,
                    transitions: r.ledger.transitions_sampled,
                })
                .collect();
            (expected_return(&mdp, &out.policy), out.policy, rows)
        }
        Algorithm::BehaviorCloning => {
            let star_actions = project_actions(&optimum.policy, decoders.truth(), inst.num_latent());
            let policies = build_exbmdp_policy_class(&decoders, shape, &[star_actions])?;
            let params =
                CloneParams::new(config.eps, config.delta, mdp.horizon(), policies.len())?.capped(sc.n_bc);
            let mut expert = optimum.policy.clone();
            let out = behavior_cloning(&mut session, &policies, &mut expert, &params)?;
            let rows = vec![DiagnosticRow {
                step: 1,
                event: "clone".into(),
                layer: 0,
                size: out.selected,
                metric_a: out.mistakes[out.selected] as f64,
                metric_b: out.corpus.len() as f64,
                transitions: out.ledger.transitions_sampled,
            }];
            (expected_return(&mdp, &out.policy), out.policy, rows)
        }
    };
    Ok(RunReport {
        algorithm: config.algorithm,
        seed,
        eps: config.eps,
        j_star,
        j_output: policy_value,
        suboptimality: j_star - policy_value,
        ledger: session.ledger(),
        diagnostics,
        output_policy,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

fn trace_rows(trace: &[crate::rvfs::TraceEvent]) -> Vec<DiagnosticRow> {
    trace
        .iter()
        .enumerate()
        .map(|(i, e)| DiagnosticRow {
            step: i as u64 + 1,
            event: e.kind.as_str().into(),
            layer: e.layer,
            size: e.core_size,
            metric_a: e.counter as f64,
            metric_b: 0.0,
            transitions: e.ledger.transitions_sampled,
        })
        .collect()
}

/// Runs every `(eps, seed)` combination in parallel; results are ordered by
/// `eps` then seed, independent of scheduling.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let eps_list = if config.sweep_eps.is_empty() {
        vec![config.eps]
    } else {
        config.sweep_eps.clone()
    };
    let seeds = if config.seeds.is_empty() {
        vec![config.seed]
    } else {
        config.seeds.clone()
    };
    let jobs: Vec<ExperimentConfig> = eps_list
        .iter()
        .flat_map(|&eps| {
            seeds.iter().map(move |&seed| {
                let mut c = config.clone();
                c.eps = eps;
                c.seed = seed;
                c.seeds.clear();
                c.sweep_eps.clear();
                c
            })
        })
        .collect();
    jobs.par_iter().map(run_experiment).collect()
}

/// Median suboptimality per accuracy value of a sweep, in input order.
pub fn median_by_eps(reports: &[RunReport]) -> Vec<(f64, f64)> {
    let mut eps_values: Vec<f64> = Vec::new();
    for r in reports {
        if !eps_values.contains(&r.eps) {
            eps_values.push(r.eps);
        }
    }
    eps_values
        .into_iter()
        .map(|eps| {
            let mut subs: Vec<f64> = reports.iter().filter(|r| r.eps == eps).map(|r| r.suboptimality).collect();
            subs.sort_by(f64::total_cmp);
            let n = subs.len();
            let med = if n % 2 == 1 {
                subs[n / 2]
            } else {
                0.5 * (subs[n / 2 - 1] + subs[n / 2])
            };
            (eps, med)
        })
        .collect()
}

pub const CSV_HEADER: [&str; 7] = ["step", "event", "layer", "size", "metric_a", "metric_b", "transitions"];

/// Writes the diagnostics as CSV (fixed header, one row per entry) or the
/// whole report as pretty JSON.
pub fn emit_metrics(report: &RunReport, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Json => std::fs::write(path, serde_json::to_string_pretty(report)?)?,
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
            w.write_record(CSV_HEADER)?;
            for row in &report.diagnostics {
                w.serialize(row)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn load_report_json(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn load_metrics_csv(path: &Path) -> Result<Vec<DiagnosticRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Shape(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Exact coefficients and optimal-policy summary of an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub horizon: usize,
    pub states_per_layer: Vec<usize>,
    pub num_actions: usize,
    pub j_star: f64,
    pub j_uniform: f64,
    pub c_cov: f64,
    pub c_cov_per_layer: Vec<f64>,
    pub c_push: f64,
    pub c_push_per_layer: Vec<f64>,
    pub gap: GapReport,
    pub pi_star: Vec<Vec<usize>>,
    pub q_star: QTable,
}

pub fn oracle_summary(mdp: &TabularMdp) -> OracleSummary {
    let sol = value_iteration(mdp);
    let cov = coverability(mdp);
    let push = pushforward_coverability(mdp);
    OracleSummary {
        horizon: mdp.horizon(),
        states_per_layer: mdp.states_per_layer().to_vec(),
        num_actions: mdp.num_actions(),
        j_star: sol.value(mdp),
        j_uniform: expected_return(mdp, &PolicyTable::uniform(mdp)),
        c_cov: cov.max,
        c_cov_per_layer: cov.per_layer,
        c_push: push.max,
        c_push_per_layer: push.per_layer,
        gap: min_gap(mdp),
        pi_star: sol.policy.actions(),
        q_star: sol.q,
    }
}

/// Generated ExBMDP with its decoder class and flattened tabular form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceBundle {
    pub spec: ExbmdpSpec,
    pub decoders: DecoderClass,
    pub weak_correlation: f64,
    pub flattened: MdpFile,
}

pub fn generate_bundle(seed: u64, targets: &ExbmdpTargets) -> Result<InstanceBundle> {
    let (spec, decoders) = generate_exbmdp(seed, targets)?;
    let flattened = flatten(&spec, DEFAULT_FLATTEN_LIMIT)?.to_file();
    Ok(InstanceBundle {
        weak_correlation: spec.weak_correlation(),
        spec,
        decoders,
        flattened,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 2), derive_seed(5, 2));
    }

    #[test]
    fn rejects_bad_config() {
        let c = ExperimentConfig::new(InstanceSource::Twochain, Algorithm::RvfsExoBc, 0.3, 0.1, 0);
        assert!(run_experiment(&c).is_err());
        let c = ExperimentConfig::new(InstanceSource::Twochain, Algorithm::Simgolf, 1.3, 0.1, 0);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }
}
