//! Finite function, decoder and policy classes.
//!
//! Classes over observations are stored as full tables so that algorithms can
//! evaluate members in O(1). ExBMDP-induced classes lift latent tables through
//! a decoder: a member `f` satisfies `f(x) = g(phi(x))` for some decoder `phi`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{PolicyTable, TabularMdp};
use crate::oracle::{policy_eval, QTable, VTable};
use crate::{Error, Result};

/// Per-layer map from observation id to latent state id.
pub type Decoder = Vec<Vec<usize>>;

/// Latent table `g[h-1][s][a]`.
pub type LatentQ = Vec<Vec<Vec<f64>>>;

/// Latent table `f[h-1][s]`.
pub type LatentV = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrigin {
    HandBuilt,
    ExbmdpInduced,
    Discretized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteQClass {
    pub members: Vec<QTable>,
    pub origin: ClassOrigin,
    /// Ids of members injected as ground truth, in injection order.
    pub injected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteVClass {
    pub members: Vec<VTable>,
    pub origin: ClassOrigin,
    pub injected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinitePolicyClass {
    pub members: Vec<PolicyTable>,
    pub injected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderClass {
    pub decoders: Vec<Decoder>,
    /// Index of the true decoder.
    pub true_index: usize,
}

impl DecoderClass {
    pub fn len(&self) -> usize {
        self.decoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoders.is_empty()
    }

    pub fn truth(&self) -> &Decoder {
        &self.decoders[self.true_index]
    }

    /// The single identity decoder, treating every state as its own latent.
    pub fn identity(mdp: &TabularMdp) -> Self {
        Self {
            decoders: vec![mdp.states_per_layer().iter().map(|&n| (0..n).collect()).collect()],
            true_index: 0,
        }
    }
}

impl FiniteQClass {
    pub fn hand_built(members: Vec<QTable>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyClass);
        }
        Ok(Self {
            members,
            origin: ClassOrigin::HandBuilt,
            injected: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl FiniteVClass {
    pub fn hand_built(members: Vec<VTable>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyClass);
        }
        Ok(Self {
            members,
            origin: ClassOrigin::HandBuilt,
            injected: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl FinitePolicyClass {
    pub fn new(members: Vec<PolicyTable>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyClass);
        }
        Ok(Self {
            members,
            injected: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn lift_q(latent: &LatentQ, phi: &Decoder) -> QTable {
    QTable(
        phi.iter()
            .zip(latent)
            .map(|(map, g)| map.iter().map(|&s| g[s].clone()).collect())
            .collect(),
    )
}

pub fn lift_v(latent: &LatentV, phi: &Decoder) -> VTable {
    VTable(
        phi.iter()
            .zip(latent)
            .map(|(map, f)| map.iter().map(|&s| f[s]).collect())
            .collect(),
    )
}

pub fn lift_policy(latent_actions: &[Vec<usize>], phi: &Decoder, num_actions: usize) -> PolicyTable {
    let actions: Vec<Vec<usize>> = phi
        .iter()
        .zip(latent_actions)
        .map(|(map, act)| map.iter().map(|&s| act[s]).collect())
        .collect();
    PolicyTable::from_actions(&actions, num_actions)
}

/// Grid of values `{0, step, 2 step, ..., H}` used to discretize classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub step: f64,
    pub levels: usize,
}

impl Grid {
    pub fn new(horizon: usize, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::InvalidConfig(format!("grid step must be positive, got {step}")));
        }
        let ratio = horizon as f64 / step;
        let levels = ratio.round();
        if (ratio - levels).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "grid step {step} does not divide H = {horizon}"
            )));
        }
        Ok(Self {
            step,
            levels: levels as usize,
        })
    }

    /// Largest step not exceeding `max_step` that divides `horizon`.
    pub fn fitted(horizon: usize, max_step: f64) -> Self {
        let levels = (horizon as f64 / max_step).ceil().max(1.0) as usize;
        Self {
            step: horizon as f64 / levels as f64,
            levels,
        }
    }

    pub fn round(&self, v: f64) -> f64 {
        let k = (v / self.step).round().clamp(0.0, self.levels as f64);
        k * self.step
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.gen_range(0..=self.levels) as f64 * self.step
    }
}

/// Shared configuration of the ExBMDP class builders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub num_latent: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub grid_step: f64,
    /// Random members per decoder.
    pub budget: usize,
    pub seed: u64,
}

fn shuffled<T>(items: Vec<T>, injected_positions: &[usize], rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<usize>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut new_id = vec![0; items.len()];
    for (new, &old) in order.iter().enumerate() {
        new_id[old] = new;
    }
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let members = order.iter().map(|&old| slots[old].take().expect("permutation")).collect();
    (members, injected_positions.iter().map(|&p| new_id[p]).collect())
}

/// `{(x, a) -> g(phi(x), a)}` over random grid tables `g` for each decoder,
/// plus the grid-rounded `targets` lifted through the true decoder.
pub fn build_exbmdp_q_class(
    decoders: &DecoderClass,
    shape: ClassShape,
    targets: &[LatentQ],
) -> Result<FiniteQClass> {
    if shape.budget == 0 && targets.is_empty() {
        return Err(Error::BudgetZero);
    }
    let grid = Grid::new(shape.horizon, shape.grid_step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
    let mut members = Vec::new();
    for phi in &decoders.decoders {
        for _ in 0..shape.budget {
            let g: LatentQ = (0..shape.horizon)
                .map(|_| {
                    (0..shape.num_latent)
                        .map(|_| (0..shape.num_actions).map(|_| grid.sample(&mut rng)).collect())
                        .collect()
                })
                .collect();
            members.push(lift_q(&g, phi));
        }
    }
    let mut positions = Vec::new();
    for t in targets {
        let g: LatentQ = t
            .iter()
            .map(|l| l.iter().map(|r| r.iter().map(|&v| grid.round(v)).collect()).collect())
            .collect();
        positions.push(members.len());
        members.push(lift_q(&g, decoders.truth()));
    }
    let (members, injected) = shuffled(members, &positions, &mut rng);
    Ok(FiniteQClass {
        members,
        origin: ClassOrigin::ExbmdpInduced,
        injected,
    })
}

/// `{x -> f(phi(x))}` over random grid tables `f` for each decoder, plus the
/// `targets` lifted through the true decoder. Targets are rounded to the grid
/// unless `exact_targets` is set.
pub fn build_exbmdp_v_class(
    decoders: &DecoderClass,
    shape: ClassShape,
    targets: &[LatentV],
    exact_targets: bool,
) -> Result<FiniteVClass> {
    if shape.budget == 0 && targets.is_empty() {
        return Err(Error::BudgetZero);
    }
    let grid = Grid::new(shape.horizon, shape.grid_step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
    let mut members = Vec::new();
    for phi in &decoders.decoders {
        for _ in 0..shape.budget {
            let f: LatentV = (0..shape.horizon)
                .map(|_| (0..shape.num_latent).map(|_| grid.sample(&mut rng)).collect())
                .collect();
            members.push(lift_v(&f, phi));
        }
    }
    let mut positions = Vec::new();
    for t in targets {
        let f: LatentV = if exact_targets {
            t.clone()
        } else {
            t.iter().map(|l| l.iter().map(|&v| grid.round(v)).collect()).collect()
        };
        positions.push(members.len());
        members.push(lift_v(&f, decoders.truth()));
    }
    let (members, injected) = shuffled(members, &positions, &mut rng);
    Ok(FiniteVClass {
        members,
        origin: ClassOrigin::ExbmdpInduced,
        injected,
    })
}

/// Endogenous deterministic policies `{x -> pi(phi(x))}`: random latent action
/// tables for each decoder plus the latent `targets` through the true decoder.
pub fn build_exbmdp_policy_class(
    decoders: &DecoderClass,
    shape: ClassShape,
    targets: &[Vec<Vec<usize>>],
) -> Result<FinitePolicyClass> {
    if shape.budget == 0 && targets.is_empty() {
        return Err(Error::BudgetZero);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
    let mut members = Vec::new();
    for phi in &decoders.decoders {
        for _ in 0..shape.budget {
            let act: Vec<Vec<usize>> = (0..shape.horizon)
                .map(|_| (0..shape.num_latent).map(|_| rng.gen_range(0..shape.num_actions)).collect())
                .collect();
            members.push(lift_policy(&act, phi, shape.num_actions));
        }
    }
    let mut positions = Vec::new();
    for t in targets {
        positions.push(members.len());
        members.push(lift_policy(t, decoders.truth(), shape.num_actions));
    }
    let (members, injected) = shuffled(members, &positions, &mut rng);
    Ok(FinitePolicyClass { members, injected })
}

fn layer_distance_q(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn layer_distance_v(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sup-norm distance between two Q-tables over all layers.
pub fn q_distance(a: &QTable, b: &QTable) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| layer_distance_q(x, y)).fold(0.0, f64::max)
}

/// Sup-norm distance between two V-tables over all layers.
pub fn v_distance(a: &VTable, b: &VTable) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| layer_distance_v(x, y)).fold(0.0, f64::max)
}

/// True iff, for every layer `h`, some member's layer `h` is within `tol` of
/// `Q*_h` in sup norm.
pub fn check_qstar_realizable(class: &FiniteQClass, qstar: &QTable, tol: f64) -> bool {
    (0..qstar.0.len()).all(|i| {
        class
            .members
            .iter()
            .any(|m| layer_distance_q(&m.0[i], &qstar.0[i]) <= tol)
    })
}

/// True iff every `V_h^pi` (for each given policy and layer) is within `tol`
/// of some member's layer `h`.
pub fn check_vpi_realizable(class: &FiniteVClass, mdp: &TabularMdp, policies: &[PolicyTable], tol: f64) -> bool {
    policies.iter().all(|pi| {
        let (_, v) = policy_eval(mdp, pi);
        (0..v.0.len()).all(|i| {
            class
                .members
                .iter()
                .any(|m| layer_distance_v(&m.0[i], &v.0[i]) <= tol)
        })
    })
}

/// Whether `f(x) = f(x')` whenever `phi(x) = phi(x')`, at every layer.
pub fn is_measurable(member: &VTable, phi: &Decoder) -> bool {
    member.0.iter().zip(phi).all(|(vals, map)| {
        let mut seen: Vec<Option<f64>> = Vec::new();
        vals.iter().zip(map).all(|(&v, &s)| {
            if seen.len() <= s {
                seen.resize(s + 1, None);
            }
            match seen[s] {
                Some(w) => w == v,
                None => {
                    seen[s] = Some(v);
                    true
                }
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::twochain;
    use crate::oracle::value_iteration;

    #[test]
    fn grid_rounding_and_fit() {
        let g = Grid::new(2, 0.5).unwrap();
        assert_eq!(g.levels, 4);
        assert_eq!(g.round(0.74), 0.5);
        assert_eq!(g.round(3.0), 2.0);
        assert!(Grid::new(2, 0.3).is_err());
        let f = Grid::fitted(3, 0.075);
        assert!(f.step <= 0.075 && Grid::new(3, f.step).is_ok());
    }

    #[test]
    fn twochain_realizability() {
        let mdp = twochain();
        let qstar = value_iteration(&mdp).q;
        let single = FiniteQClass::hand_built(vec![qstar.clone()]).unwrap();
        assert!(check_qstar_realizable(&single, &qstar, 0.0));
        let zeros = QTable(qstar.0.iter().map(|l| l.iter().map(|r| vec![0.0; r.len()]).collect()).collect());
        let zero_class = FiniteQClass::hand_built(vec![zeros]).unwrap();
        assert!(!check_qstar_realizable(&zero_class, &qstar, 0.5));
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(FiniteVClass::hand_built(vec![]), Err(Error::EmptyClass)));
    }

    #[test]
    fn shuffled_tracks_injected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (items, ids) = shuffled((0..20).collect::<Vec<_>>(), &[3, 17], &mut rng);
        assert_eq!(items[ids[0]], 3);
        assert_eq!(items[ids[1]], 17);
    }
}
