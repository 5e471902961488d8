//! Zero-shot loss estimators and the policy families they evaluate.
//!
//! The loss of an encoder and a code-conditioned policy family is
//! `−E_{r∼β} E_{s0∼ρ0} V_r^{π_{z(r)}}(s0)`. Three estimators are provided:
//! direct Monte Carlo over rewards, the Gaussian form over codes
//! `−E_z E_{s∼d_{π_z}} φ(s)ᵀz / (1−γ)`, and the sparse form over goals
//! `−E Σ c_k w_i d(s_i, z) / (1−γ)`. Every sample draws from its own
//! counter-based stream so results do not depend on the thread pool.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{FeatureSet, LinearEncoder};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::mdp::{enumerate_deterministic_policies, Policy, RewardVector, TabularMdp};
use crate::occupancy::OccupationModel;
use crate::priors::{sample_reward, Prior, ScatteredSpec, SparseReward};
use crate::rng::stream;
use crate::stats::mean_and_stderr;

/// Which reward the exact greedy family optimizes for a code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyTarget {
    /// Optimal policy for `r_z = φz`.
    Projected,
    /// Optimal policy for the sampled reward itself. This family ignores the
    /// code and gives the full-information bound.
    Sampled,
}

/// Write-once memo of optimal policies keyed by the exact bits of the reward.
#[derive(Debug, Default)]
pub struct PolicyCache {
    map: RwLock<HashMap<Vec<u64>, Arc<Policy>>>,
}

impl Clone for PolicyCache {
    fn clone(&self) -> Self {
        Self { map: RwLock::new(self.map.read().expect("cache lock").clone()) }
    }
}

impl PolicyCache {
    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_solve(&self, mdp: &TabularMdp, r: &RewardVector) -> Result<Arc<Policy>> {
        let key: Vec<u64> = r.iter().map(|x| x.to_bits()).collect();
        if let Some(p) = self.map.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(p));
        }
        let (pi, _) = mdp.optimal_policy(r)?;
        let pi = Arc::new(pi);
        // A racing writer computed the same deterministic policy, so keeping
        // whichever entry landed first is safe.
        let mut map = self.map.write().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(pi)))
    }
}

/// Learned `Q(s, a, z_j)` tables over a fixed codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQFamily {
    pub codes: Vec<Vector>,
    pub q: Vec<Mat>,
}

impl TabularQFamily {
    pub fn new(codes: Vec<Vector>, n_states: usize, n_actions: usize) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::InvalidArgument("empty codebook".into()));
        }
        let q = vec![Mat::zeros(n_states, n_actions); codes.len()];
        Ok(Self { codes, q })
    }

    /// Index of the codebook entry nearest to `z` (lowest index on ties).
    pub fn nearest(&self, z: &Vector) -> usize {
        nearest_code(&self.codes, z)
    }

    pub fn policy_for(&self, j: usize) -> Policy {
        greedy_policy(&self.q[j])
    }
}

pub fn nearest_code(codes: &[Vector], z: &Vector) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, c) in codes.iter().enumerate() {
        let dist = (c - z).norm_squared();
        if dist < best_dist {
            best = j;
            best_dist = dist;
        }
    }
    best
}

/// Deterministic argmax policy of a Q table, lowest action on exact ties.
pub fn greedy_policy(q: &Mat) -> Policy {
    let actions: Vec<usize> = (0..q.nrows())
        .map(|s| {
            let mut best = 0;
            for a in 1..q.ncols() {
                if q[(s, a)] > q[(s, best)] {
                    best = a;
                }
            }
            best
        })
        .collect();
    Policy::deterministic(&actions, q.ncols()).expect("actions in range")
}

#[derive(Debug, Clone)]
pub enum PolicyFamily {
    ExactGreedy { phi: FeatureSet, target: GreedyTarget, cache: Option<Arc<PolicyCache>> },
    TabularQ(TabularQFamily),
}

/// Exact greedy family `z ↦ argmax policy for φz`, memoized.
pub fn policy_family_exact(phi: &FeatureSet) -> PolicyFamily {
    PolicyFamily::ExactGreedy {
        phi: phi.clone(),
        target: GreedyTarget::Projected,
        cache: Some(Arc::new(PolicyCache::default())),
    }
}

impl PolicyFamily {
    pub fn exact_uncached(phi: &FeatureSet) -> Self {
        PolicyFamily::ExactGreedy { phi: phi.clone(), target: GreedyTarget::Projected, cache: None }
    }

    pub fn sampled_oracle() -> Self {
        PolicyFamily::ExactGreedy {
            phi: FeatureSet::new(Mat::identity(1, 1)).expect("1x1 identity"),
            target: GreedyTarget::Sampled,
            cache: Some(Arc::new(PolicyCache::default())),
        }
    }

    /// Policy the family assigns to code `z`. `reward` is the reward that
    /// produced the code, needed only by [`GreedyTarget::Sampled`].
    pub fn policy(&self, mdp: &TabularMdp, z: &Vector, reward: Option<&RewardVector>) -> Result<Arc<Policy>> {
        match self {
            PolicyFamily::ExactGreedy { phi, target, cache } => {
                let r = match target {
                    GreedyTarget::Projected => RewardVector::new(phi.matrix() * z)?,
                    GreedyTarget::Sampled => reward
                        .cloned()
                        .ok_or_else(|| Error::InvalidArgument("sampled-reward family needs the reward".into()))?,
                };
                match cache {
                    Some(cache) => cache.get_or_solve(mdp, &r),
                    None => Ok(Arc::new(mdp.optimal_policy(&r)?.0)),
                }
            }
            PolicyFamily::TabularQ(t) => Ok(Arc::new(t.policy_for(t.nearest(z)))),
        }
    }

    /// `π_{cz} = π_z` for every `c > 0`, which licenses the radial
    /// reductions in [`exact_gaussian_loss`].
    pub fn is_scale_invariant(&self) -> bool {
        matches!(self, PolicyFamily::ExactGreedy { target: GreedyTarget::Projected, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub standard_error: f64,
    pub n_samples: usize,
}

impl LossEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (value, standard_error) = mean_and_stderr(xs);
        Self { value, standard_error, n_samples: xs.len() }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, standard_error: 0.0, n_samples: 0 }
    }

    /// `|a − b|` in units of the combined standard error.
    pub fn z_score(&self, other: &LossEstimate) -> f64 {
        let se = (self.standard_error.powi(2) + other.standard_error.powi(2)).sqrt();
        (self.value - other.value).abs() / se.max(1e-300)
    }
}

/// Per-reward negated expected returns `−E_{ρ0} V_r^{π_{z(r)}}`, sample `i`
/// drawn from stream `(seed, i)`.
pub fn direct_values(
    mdp: &TabularMdp,
    prior: &Prior,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let draw = sample_reward(prior, mdp, &mut rng);
            let z = encoder.encode(&draw.dense)?;
            let pi = family.policy(mdp, &z, Some(&draw.dense))?;
            Ok(-mdp.expected_return(&draw.dense, &pi)?)
        })
        .collect()
}

pub fn loss_direct(
    mdp: &TabularMdp,
    prior: &Prior,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    n_samples: usize,
    seed: u64,
) -> Result<LossEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    Ok(LossEstimate::from_samples(&direct_values(mdp, prior, encoder, family, n_samples, seed)?))
}

/// `−d_{π_z}ᵀ(φz) / (1−γ)` for one code.
pub fn gaussian_integrand(mdp: &TabularMdp, encoder: &LinearEncoder, family: &PolicyFamily, z: &Vector) -> Result<f64> {
    let r = encoder.posterior_mean(z);
    let pi = family.policy(mdp, z, Some(&r))?;
    let d = mdp.occupation_measure(&pi)?.dist;
    Ok(-d.dot(&r) / (1.0 - mdp.gamma()))
}

/// Monte Carlo over antithetic pairs `(z, −z)` with `z ∼ N(0, C⁻¹)`; the
/// reported sample count is the number of pairs.
pub fn loss_gaussian_form(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    n_z: usize,
    seed: u64,
) -> Result<LossEstimate> {
    let pairs = (n_z / 2).max(1) as u64;
    let values = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let z = encoder.sample_task(&mut rng);
            let plus = gaussian_integrand(mdp, encoder, family, &z)?;
            let minus = gaussian_integrand(mdp, encoder, family, &(-&z))?;
            Ok(0.5 * (plus + minus))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LossEstimate::from_samples(&values))
}

/// `−Σ c_k w_i d(s_i, z) / (1−γ)` for one sparse reward.
pub fn sparse_integrand(
    mdp: &TabularMdp,
    reward: &SparseReward,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    occ: &OccupationModel,
) -> Result<f64> {
    let z = encoder.encode(&reward.dense)?;
    let pi = family.policy(mdp, &z, Some(&reward.dense))?;
    let d = occ.density(mdp, &pi, &z)?;
    let total: f64 = reward.goals.iter().zip(&reward.weights).map(|(&(s, _), w)| reward.scale * w * d[s]).sum();
    Ok(-total / (1.0 - mdp.gamma()))
}

/// Sparse form. Uses the same per-sample streams as [`loss_direct`] with a
/// scattered prior, so the two estimators see identical draws.
pub fn loss_sparse_form(
    mdp: &TabularMdp,
    spec: &ScatteredSpec,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    occ: &OccupationModel,
    n_samples: usize,
    seed: u64,
) -> Result<LossEstimate> {
    spec.validate()?;
    let prior = Prior::Scattered(spec.clone());
    let values = (0..n_samples.max(1) as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let draw = sample_reward(&prior, mdp, &mut rng);
            let sparse = draw.sparse.expect("scattered prior yields sparse metadata");
            sparse_integrand(mdp, &sparse, encoder, family, occ)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LossEstimate::from_samples(&values))
}

/// Controls the deterministic loss evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactLossOptions {
    /// Quadrature nodes on the circle for two-dimensional codes.
    pub angles: usize,
    /// Fixed-seed sample count where no quadrature applies.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for ExactLossOptions {
    fn default() -> Self {
        Self { angles: 1024, mc_samples: 4000, seed: 0x5eed }
    }
}

/// Deterministic evaluation of the Gaussian-form loss.
///
/// For a scale-invariant family the integrand is positively homogeneous of
/// degree one in `z`, so with `z = L⁻ᵀ ξ` the radius factors out:
/// `E f(z) = E‖ξ‖ · E_{u uniform on the sphere} f(L⁻ᵀ u)`. In one dimension
/// this is a two-point formula, in two dimensions a midpoint rule in the
/// angle. Higher dimensions and other families fall back to a fixed-seed
/// antithetic Monte-Carlo estimate.
pub fn exact_gaussian_loss(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    opts: &ExactLossOptions,
) -> Result<f64> {
    let d = encoder.d();
    if family.is_scale_invariant() && d <= 2 {
        let dirs: Vec<Vector> = if d == 1 {
            vec![Vector::from_element(1, 1.0), Vector::from_element(1, -1.0)]
        } else {
            let n = opts.angles.max(4);
            (0..n)
                .map(|k| {
                    let theta = std::f64::consts::TAU * (k as f64 + 0.5) / n as f64;
                    Vector::from_vec(vec![theta.cos(), theta.sin()])
                })
                .collect()
        };
        let radius = if d == 1 { (2.0 / std::f64::consts::PI).sqrt() } else { (std::f64::consts::PI / 2.0).sqrt() };
        let values = dirs
            .par_iter()
            .map(|u| gaussian_integrand(mdp, encoder, family, &encoder.cov.whiten_inverse(u)))
            .collect::<Result<Vec<f64>>>()?;
        return Ok(radius * values.iter().sum::<f64>() / values.len() as f64);
    }
    Ok(loss_gaussian_form(mdp, encoder, family, opts.mc_samples, opts.seed)?.value)
}

/// Deterministic evaluation of the sparse-form loss with the exact
/// occupancy backend. A single goal with a fixed weight is summed exactly
/// over goal states; other priors use fixed-seed Monte Carlo.
pub fn exact_sparse_loss(
    mdp: &TabularMdp,
    spec: &ScatteredSpec,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    opts: &ExactLossOptions,
) -> Result<f64> {
    spec.validate()?;
    let occ = OccupationModel::Exact;
    if spec.is_deterministic_single_goal() {
        let mut weight_rng = stream(opts.seed, 0);
        let w = spec.sample_weight(&mut weight_rng);
        let c = spec.scaling.value(1);
        let rho = mdp.rho();
        let per_goal = (0..mdp.n_states())
            .into_par_iter()
            .map(|g| {
                let reward = SparseReward::new(vec![(g, 0)], vec![w], c, rho)?;
                Ok(rho[g] * sparse_integrand(mdp, &reward, encoder, family, &occ)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        return Ok(per_goal.iter().sum());
    }
    Ok(loss_sparse_form(mdp, spec, encoder, family, &occ, opts.mc_samples, opts.seed)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Best loss over all assignments of deterministic policies to codes.
    pub oracle_loss: f64,
    /// Loss of the evaluated family on the same rewards.
    pub family_loss: f64,
    /// Standard error of `family_loss`, computed over code groups.
    pub standard_error: f64,
    pub n_codes: usize,
    pub n_rewards: usize,
}

/// Brute-force search over code-to-policy assignments on a tiny MDP.
///
/// Rewards are grouped by their code. For a Gaussian prior each group is a
/// fresh code plus `per_code` rewards drawn from the conditional law
/// `r | z = φz + (r' − φ z(r'))`, which is exact because the residual of the
/// `K`-orthogonal projection is independent of the code. For other priors a
/// pool of `n_codes · per_code` rewards is grouped by exact code equality.
/// Expected returns are linear in the reward, so the best policy for a group
/// is the optimum over the enumerated policies against the group's mean
/// reward.
pub fn enumerate_policies_oracle(
    mdp: &TabularMdp,
    prior: &Prior,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    n_codes: usize,
    per_code: usize,
    seed: u64,
) -> Result<OracleReport> {
    if mdp.n_states() > 5 || mdp.n_actions() > 3 {
        return Err(Error::SizeCap(format!(
            "policy enumeration is limited to 5 states and 3 actions, got {} and {}",
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    if n_codes == 0 || per_code == 0 {
        return Err(Error::InvalidArgument("need at least one code and one reward per code".into()));
    }
    let policies = enumerate_deterministic_policies(mdp.n_states(), mdp.n_actions())?;
    let occupations = policies.iter().map(|p| Ok(mdp.occupation_measure(p)?.dist)).collect::<Result<Vec<Vector>>>()?;

    struct Group {
        z: Vector,
        rewards: Vec<RewardVector>,
    }

    let groups: Vec<Group> = match prior {
        Prior::Gaussian(_) => (0..n_codes as u64)
            .into_par_iter()
            .map(|j| {
                let mut rng = stream(seed, j);
                let first = sample_reward(prior, mdp, &mut rng).dense;
                let z = encoder.encode(&first)?;
                let mean = encoder.posterior_mean(&z);
                let mut rewards = vec![first];
                for _ in 1..per_code {
                    let extra = sample_reward(prior, mdp, &mut rng).dense;
                    let residual = &*extra - &*encoder.posterior_mean(&encoder.encode(&extra)?);
                    rewards.push(RewardVector::new(&*mean + residual)?);
                }
                Ok(Group { z, rewards })
            })
            .collect::<Result<Vec<_>>>()?,
        _ => {
            let mut by_code: BTreeMap<Vec<u64>, Group> = BTreeMap::new();
            for i in 0..(n_codes * per_code) as u64 {
                let mut rng = stream(seed, i);
                let r = sample_reward(prior, mdp, &mut rng).dense;
                let z = encoder.encode(&r)?;
                let key = z.iter().map(|x| x.to_bits()).collect();
                by_code.entry(key).or_insert_with(|| Group { z, rewards: Vec::new() }).rewards.push(r);
            }
            by_code.into_values().collect()
        }
    };

    let scale = 1.0 / (1.0 - mdp.gamma());
    let per_group = groups
        .par_iter()
        .map(|g| {
            let n = g.rewards.len() as f64;
            let mean = g.rewards.iter().fold(Vector::zeros(mdp.n_states()), |acc, r| acc + &**r) / n;
            let best = occupations.iter().map(|d| d.dot(&mean)).fold(f64::NEG_INFINITY, f64::max);
            // The family sees only the code; for a sampled-reward family the
            // first reward of the group stands in.
            let pi = family.policy(mdp, &g.z, Some(&g.rewards[0]))?;
            let fam = mdp.occupation_measure(&pi)?.dist.dot(&mean);
            Ok((n, -scale * best, -scale * fam))
        })
        .collect::<Result<Vec<(f64, f64, f64)>>>()?;
    let total: f64 = per_group.iter().map(|g| g.0).sum();
    let oracle_loss = per_group.iter().map(|g| g.0 * g.1).sum::<f64>() / total;
    let family_loss = per_group.iter().map(|g| g.0 * g.2).sum::<f64>() / total;
    let standard_error = match prior {
        Prior::Gaussian(_) => mean_and_stderr(&per_group.iter().map(|g| g.2).collect::<Vec<_>>()).1,
        _ => {
            // Reward-level spread around the group means.
            let values: Vec<f64> = groups
                .iter()
                .zip(&per_group)
                .flat_map(|(g, _)| {
                    let pi = family.policy(mdp, &g.z, Some(&g.rewards[0])).expect("computed above");
                    let d = mdp.occupation_measure(&pi).expect("computed above").dist;
                    g.rewards.iter().map(move |r| -scale * d.dot(r)).collect::<Vec<_>>()
                })
                .collect();
            mean_and_stderr(&values).1
        }
    };
    Ok(OracleReport { oracle_loss, family_loss, standard_error, n_codes: groups.len(), n_rewards: total as usize })
}
