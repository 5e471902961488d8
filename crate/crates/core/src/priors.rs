//! Reward priors: Gaussian priors given by a metric `K`, scattered sparse
//! rewards, and mixtures of those.
//!
//! Gaussian priors use the density `exp(−½ rᵀKr)`, so samples have
//! covariance `K⁻¹`. The normalization constant is never needed.

use nalgebra::{Cholesky, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::mdp::{RewardVector, TabularMdp};
use crate::rng::sample_index;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    WhiteNoise,
    Dirichlet { alpha: f64 },
    Custom,
}

/// Symmetric positive-definite quadratic form on reward vectors.
#[derive(Debug, Clone)]
pub struct MetricK {
    matrix: Mat,
    kind: MetricKind,
    chol: Cholesky<f64, Dyn>,
    /// `Lᵀ` with `K = L Lᵀ`, kept for sampling.
    l_t: Mat,
}

impl MetricK {
    pub fn new(matrix: Mat, kind: MetricKind) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension("metric must be square".into()));
        }
        let defect = linalg::symmetry_defect(&matrix);
        if defect > 1e-12 {
            return Err(Error::NotPositiveDefinite(format!("asymmetry {defect:e}")));
        }
        let chol = linalg::cholesky(&matrix, "metric K")?;
        let l_t = chol.l().transpose();
        Ok(Self { matrix, kind, chol, l_t })
    }

    pub fn custom(matrix: Mat) -> Result<Self> {
        Self::new(matrix, MetricKind::Custom)
    }

    /// White noise prior: `K = diag(ρ)`, i.e. `‖f‖²_K = E_{s∼ρ} f(s)²`.
    pub fn white_noise(rho: &Vector) -> Result<Self> {
        if let Some(s) = rho.iter().position(|&p| p <= 0.0) {
            return Err(Error::InvalidPrior(format!("white noise prior needs rho > 0 (rho({s}) = {})", rho[s])));
        }
        Self::new(linalg::diag(rho), MetricKind::WhiteNoise)
    }

    /// Dirichlet prior:
    /// `K = E_{(s,s')}[(1_s − 1_{s'})(1_s − 1_{s'})ᵀ] + α diag(ρ)` over dataset transitions.
    pub fn dirichlet(mdp: &TabularMdp, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidPrior(format!("Dirichlet alpha must be > 0, got {alpha}")));
        }
        let n = mdp.n_states();
        let mut k = linalg::diag(mdp.rho()) * alpha;
        for s in 0..n {
            for next in 0..n {
                let w = mdp.pair_probability(s, next);
                if w == 0.0 || s == next {
                    continue;
                }
                k[(s, s)] += w;
                k[(next, next)] += w;
                k[(s, next)] -= w;
                k[(next, s)] -= w;
            }
        }
        // Remove rounding asymmetry from the accumulation order.
        let k = (&k + k.transpose()) * 0.5;
        Self::new(k, MetricKind::Dirichlet { alpha })
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn is_white_noise(&self) -> bool {
        matches!(self.kind, MetricKind::WhiteNoise)
    }

    /// `⟨f, g⟩_K = fᵀ K g`.
    pub fn inner(&self, f: &Vector, g: &Vector) -> f64 {
        f.dot(&(&self.matrix * g))
    }

    pub fn norm_sq(&self, f: &Vector) -> f64 {
        self.inner(f, f)
    }

    /// `r = L⁻ᵀ ξ` with `ξ ∼ N(0, I)`, which has covariance `K⁻¹`.
    pub fn sample_gaussian_reward<R: Rng + ?Sized>(&self, rng: &mut R) -> RewardVector {
        let xi = Vector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        let r = self.l_t.solve_upper_triangular(&xi).expect("Cholesky factor has a positive diagonal");
        RewardVector::new(r).expect("finite Gaussian sample")
    }

    /// `K⁻¹`, the covariance of the prior.
    pub fn covariance(&self) -> Mat {
        self.chol.inverse()
    }
}

pub fn k_inner(k: &MetricK, f: &RewardVector, g: &RewardVector) -> f64 {
    k.inner(f, g)
}

/// Law of the number of goals `k` in a scattered reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KLaw {
    Fixed(usize),
    /// Uniform on `{min, …, max}`.
    Uniform {
        min: usize,
        max: usize,
    },
    Finite {
        support: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Poisson(λ) conditioned on `1 ≤ k ≤ max`.
    Poisson {
        lambda: f64,
        max: usize,
    },
}

impl Default for KLaw {
    fn default() -> Self {
        KLaw::Uniform { min: 1, max: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLaw {
    #[default]
    StandardNormal,
    Constant(f64),
    Normal {
        mean: f64,
        std: f64,
    },
    /// ±1 with equal probability.
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `c_k = 1/√k`.
    #[default]
    InvSqrtK,
    Constant(f64),
}

impl Scaling {
    pub fn value(&self, k: usize) -> f64 {
        match self {
            Scaling::InvSqrtK => 1.0 / (k as f64).sqrt(),
            Scaling::Constant(c) => *c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatteredSpec {
    #[serde(default)]
    pub k_law: KLaw,
    #[serde(default)]
    pub weight_law: WeightLaw,
    #[serde(default)]
    pub scaling: Scaling,
}

impl ScatteredSpec {
    /// Pure goal-reaching prior: one goal, unit weight.
    pub fn goal_reaching() -> Self {
        Self { k_law: KLaw::Fixed(1), weight_law: WeightLaw::Constant(1.0), scaling: Scaling::Constant(1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.k_law {
            KLaw::Fixed(0) => return Err(Error::InvalidPrior("k must be at least 1".into())),
            KLaw::Uniform { min, max } if *min == 0 || min > max => {
                return Err(Error::InvalidPrior(format!("bad uniform k range [{min}, {max}]")))
            }
            KLaw::Finite { support, probs } => {
                if support.is_empty() || support.len() != probs.len() || support.contains(&0) {
                    return Err(Error::InvalidPrior("finite k law needs matching positive support and probs".into()));
                }
                let total: f64 = probs.iter().sum();
                if probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidPrior("finite k law probabilities must sum to 1".into()));
                }
            }
            KLaw::Poisson { lambda, max } if !(*lambda > 0.0) || *max == 0 => {
                return Err(Error::InvalidPrior("Poisson k law needs lambda > 0 and max >= 1".into()))
            }
            _ => {}
        }
        match self.scaling {
            Scaling::Constant(c) if !(c > 0.0) => Err(Error::InvalidPrior("scaling must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Weights and `k` are non-random: the loss over this prior reduces to a
    /// finite sum over goal tuples.
    pub fn is_deterministic_single_goal(&self) -> bool {
        matches!(self.k_law, KLaw::Fixed(1)) && matches!(self.weight_law, WeightLaw::Constant(_))
    }

    pub fn sample_k<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.k_law {
            KLaw::Fixed(k) => *k,
            KLaw::Uniform { min, max } => rng.random_range(*min..=*max),
            KLaw::Finite { support, probs } => support[sample_index(probs, rng)],
            KLaw::Poisson { lambda, max } => {
                let mut pmf = Vec::with_capacity(*max);
                let mut term = (-lambda).exp();
                for k in 1..=*max {
                    term *= lambda / k as f64;
                    pmf.push(term);
                }
                let total: f64 = pmf.iter().sum();
                pmf.iter_mut().for_each(|p| *p /= total);
                1 + sample_index(&pmf, rng)
            }
        }
    }

    pub fn sample_weight<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.weight_law {
            WeightLaw::StandardNormal => rng.sample(StandardNormal),
            WeightLaw::Constant(w) => w,
            WeightLaw::Normal { mean, std } => {
                let x: f64 = rng.sample(StandardNormal);
                mean + std * x
            }
            WeightLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// `r = c_k Σ_i w_i δ_{s_i*}` with `δ_{s*}(s) = 1_{s=s*}/ρ(s*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseReward {
    /// Goal state and the dataset action paired with it.
    pub goals: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub scale: f64,
    pub dense: RewardVector,
}

impl SparseReward {
    pub fn new(goals: Vec<(usize, usize)>, weights: Vec<f64>, scale: f64, rho: &Vector) -> Result<Self> {
        if goals.len() != weights.len() {
            return Err(Error::Dimension("one weight per goal".into()));
        }
        let mut dense = Vector::zeros(rho.len());
        for (&(s, _), w) in goals.iter().zip(&weights) {
            if s >= rho.len() {
                return Err(Error::Dimension(format!("goal state {s} out of range")));
            }
            dense[s] += scale * w / rho[s];
        }
        Ok(Self { goals, weights, scale, dense: RewardVector::new(dense)? })
    }

    /// `E_ρ[r] = Σ_i c_k w_i`.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().map(|w| self.scale * w).sum()
    }
}

pub fn sample_scattered_reward<R: Rng + ?Sized>(spec: &ScatteredSpec, mdp: &TabularMdp, rng: &mut R) -> SparseReward {
    let k = spec.sample_k(rng);
    let mut goals = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        let s = mdp.sample_state(rng);
        let a = mdp.behavior_policy().sample_action(s, rng);
        goals.push((s, a));
        weights.push(spec.sample_weight(rng));
    }
    SparseReward::new(goals, weights, spec.scaling.value(k), mdp.rho()).expect("goals drawn in range")
}

/// Serializable prior description; resolved against an MDP into a [`Prior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PriorSpec {
    Gaussian {
        metric: MetricChoice,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
    Scattered {
        #[serde(default)]
        k_law: KLaw,
        #[serde(default)]
        weight_law: WeightLaw,
        #[serde(default)]
        scaling: Scaling,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    WhiteNoise,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub prior: PriorSpec,
}

impl MetricChoice {
    pub fn build(self, mdp: &TabularMdp, alpha: Option<f64>) -> Result<MetricK> {
        match self {
            MetricChoice::WhiteNoise => MetricK::white_noise(mdp.rho()),
            MetricChoice::Dirichlet => {
                let alpha = alpha.ok_or_else(|| Error::InvalidPrior("Dirichlet metric needs alpha".into()))?;
                MetricK::dirichlet(mdp, alpha)
            }
        }
    }
}

impl PriorSpec {
    pub fn resolve(&self, mdp: &TabularMdp) -> Result<Prior> {
        match self {
            PriorSpec::Gaussian { metric, alpha } => Ok(Prior::Gaussian(metric.build(mdp, *alpha)?)),
            PriorSpec::Scattered { k_law, weight_law, scaling } => {
                let spec =
                    ScatteredSpec { k_law: k_law.clone(), weight_law: weight_law.clone(), scaling: scaling.clone() };
                spec.validate()?;
                Ok(Prior::Scattered(spec))
            }
            PriorSpec::Mixture { components } => {
                let parts =
                    components.iter().map(|c| Ok((c.weight, c.prior.resolve(mdp)?))).collect::<Result<Vec<_>>>()?;
                Prior::mixture(parts)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Prior {
    Gaussian(MetricK),
    Scattered(ScatteredSpec),
    Mixture(Vec<(f64, Prior)>),
}

impl Prior {
    /// Mixture weights must be nonnegative and sum to 1; zero-weight
    /// components are allowed and never sampled.
    pub fn mixture(components: Vec<(f64, Prior)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidPrior("empty mixture".into()));
        }
        if components.iter().any(|(w, _)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidPrior("mixture weights must be nonnegative".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPrior(format!("mixture weights sum to {total}")));
        }
        Ok(Prior::Mixture(components))
    }
}

/// Dense reward drawn from a prior, with sparse metadata for scattered draws.
#[derive(Debug, Clone)]
pub struct SampledReward {
    pub dense: RewardVector,
    pub sparse: Option<SparseReward>,
    /// Top-level mixture component, when the prior is a mixture.
    pub component: Option<usize>,
}

pub fn sample_reward<R: Rng + ?Sized>(prior: &Prior, mdp: &TabularMdp, rng: &mut R) -> SampledReward {
    match prior {
        Prior::Gaussian(k) => SampledReward { dense: k.sample_gaussian_reward(rng), sparse: None, component: None },
        Prior::Scattered(spec) => {
            let sparse = sample_scattered_reward(spec, mdp, rng);
            SampledReward { dense: sparse.dense.clone(), sparse: Some(sparse), component: None }
        }
        Prior::Mixture(parts) => {
            let weights: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
            let idx = sample_index(&weights, rng);
            let mut inner = sample_reward(&parts[idx].1, mdp, rng);
            inner.component = Some(idx);
            inner
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{chain, random_mdp};
    use crate::rng::seeded;

    #[test]
    fn white_noise_is_diag_rho() {
        let k = MetricK::white_noise(&Vector::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(k.matrix(), &Mat::from_diagonal(&Vector::from_vec(vec![0.5, 0.5])));
        let k1 = MetricK::white_noise(&Vector::from_vec(vec![1.0])).unwrap();
        assert_eq!(k1.matrix()[(0, 0)], 1.0);
        assert!(MetricK::white_noise(&Vector::from_vec(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn white_noise_norm_is_rho_expectation() {
        let mut rng = seeded(5);
        let rho = Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let k = MetricK::white_noise(&rho).unwrap();
        for _ in 0..20 {
            let r = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let direct: f64 = (0..4).map(|s| rho[s] * r[s] * r[s]).sum();
            assert!((k.norm_sq(&r) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn dirichlet_swap_hand_expansion() {
        let mdp = chain(2, 0.5).unwrap();
        let k = MetricK::dirichlet(&mdp, 1.0).unwrap();
        let f = Vector::from_vec(vec![1.0, -1.0]);
        assert!((k.norm_sq(&f) - 5.0).abs() < 1e-14);
        let c = Vector::from_element(2, 3.0);
        assert_eq!(k.norm_sq(&c), 9.0);
        assert!(MetricK::dirichlet(&mdp, 0.0).is_err());
    }

    #[test]
    fn dirichlet_matches_laplacian_form_under_stationary_rho() {
        let mut rng = seeded(8);
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut rng).unwrap().with_stationary_rho().unwrap();
        let alpha = 0.3;
        let k = MetricK::dirichlet(&mdp, alpha).unwrap();
        let p0 = mdp.state_transition_matrix(mdp.behavior_policy()).unwrap();
        let rho = mdp.rho();
        let lap = Mat::identity(5, 5) - &p0;
        for _ in 0..10 {
            let f = Vector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let lf = &lap * &f;
            let rho_inner: f64 = (0..5).map(|s| rho[s] * f[s] * lf[s]).sum();
            let rho_norm: f64 = (0..5).map(|s| rho[s] * f[s] * f[s]).sum();
            assert!((k.norm_sq(&f) - (2.0 * rho_inner + alpha * rho_norm)).abs() < 1e-10);
        }
    }

    #[test]
    fn single_goal_reduction() {
        let mut rng = seeded(2);
        let mdp =
            random_mdp(4, 2, 0.0, 0.9, &mut rng).unwrap().with_rho(Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        let spec = ScatteredSpec::goal_reaching();
        for _ in 0..20 {
            let r = sample_scattered_reward(&spec, &mdp, &mut rng);
            let (g, _) = r.goals[0];
            for s in 0..4 {
                let expected = if s == g { 1.0 / mdp.rho()[s] } else { 0.0 };
                assert_eq!(r.dense[s], expected);
            }
            let mass: f64 = (0..4).map(|s| mdp.rho()[s] * r.dense[s]).sum();
            assert!((mass - 1.0).abs() < 1e-12);
            let phi = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e: f64 = (0..4).map(|s| mdp.rho()[s] * r.dense[s] * phi[s]).sum();
            assert!((e - phi[g]).abs() < 1e-12);
        }
    }

    #[test]
    fn scattered_mass_is_sum_of_scaled_weights() {
        let mut rng = seeded(4);
        let mdp = random_mdp(6, 2, 0.0, 0.9, &mut rng).unwrap();
        let spec = ScatteredSpec::default();
        for _ in 0..50 {
            let r = sample_scattered_reward(&spec, &mdp, &mut rng);
            let mass: f64 = (0..6).map(|s| mdp.rho()[s] * r.dense[s]).sum();
            assert!((mass - r.total_mass()).abs() < 1e-12);
            assert!((1..=8).contains(&r.goals.len()));
        }
    }

    #[test]
    fn gaussian_branch_matches_direct_sampler() {
        let mdp = chain(3, 0.9).unwrap();
        let k = MetricK::dirichlet(&mdp, 0.5).unwrap();
        let a = sample_reward(&Prior::Gaussian(k.clone()), &mdp, &mut seeded(9)).dense;
        let b = k.sample_gaussian_reward(&mut seeded(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_validation() {
        let mdp = chain(3, 0.9).unwrap();
        let k = MetricK::white_noise(mdp.rho()).unwrap();
        assert!(Prior::mixture(vec![(0.6, Prior::Gaussian(k.clone())), (0.6, Prior::Gaussian(k.clone()))]).is_err());
        assert!(Prior::mixture(vec![]).is_err());
        let m =
            Prior::mixture(vec![(1.0, Prior::Gaussian(k.clone())), (0.0, Prior::Scattered(ScatteredSpec::default()))])
                .unwrap();
        let mut rng = seeded(1);
        for _ in 0..200 {
            assert_eq!(sample_reward(&m, &mdp, &mut rng).component, Some(0));
        }
    }

    #[test]
    fn prior_spec_json_forms() {
        let mdp = chain(3, 0.9).unwrap();
        let spec: PriorSpec = serde_json::from_str(
            r#"{"type":"mixture","components":[
                {"weight":0.5,"prior":{"type":"gaussian","metric":"dirichlet","alpha":0.5}},
                {"weight":0.5,"prior":{"type":"scattered","k_law":{"fixed":1},"weight_law":{"constant":1.0},"scaling":{"constant":1.0}}}]}"#,
        )
        .unwrap();
        assert!(matches!(spec.resolve(&mdp).unwrap(), Prior::Mixture(_)));
        let bad: PriorSpec = serde_json::from_str(r#"{"type":"gaussian","metric":"dirichlet"}"#).unwrap();
        assert!(bad.resolve(&mdp).is_err());
    }

    /// Per-triple samples of `(f(s) − f(s'))(g(s) − g(s')) + α f(s) g(s)` on dataset transitions.
    fn dirichlet_samples(mdp: &TabularMdp, alpha: f64, f: &Vector, g: &Vector, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let t = mdp.sample_transition(&mut rng);
                (f[t.state] - f[t.next]) * (g[t.state] - g[t.next]) + alpha * f[t.state] * g[t.state]
            })
            .collect()
    }

    #[test]
    fn dirichlet_norm_of_a_constant_is_alpha_times_its_square() {
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut seeded(20)).unwrap();
        let k = MetricK::dirichlet(&mdp, 0.7).unwrap();
        let f = Vector::from_element(5, -3.0);
        assert!((k.norm_sq(&f) - 0.7 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_metric_matches_dataset_estimators() {
        let mdp = random_mdp(5, 2, 0.3, 0.9, &mut seeded(21)).unwrap();
        let k = MetricK::dirichlet(&mdp, 0.5).unwrap();
        let mut rng = seeded(22);
        let f = Vector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = Vector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        for (label, exact, samples) in [
            ("norm", k.norm_sq(&f), dirichlet_samples(&mdp, 0.5, &f, &f, 100_000, 23)),
            ("inner product", k.inner(&f, &g), dirichlet_samples(&mdp, 0.5, &f, &g, 100_000, 24)),
        ] {
            let (mean, se) = crate::stats::mean_and_stderr(&samples);
            assert!((mean - exact).abs() < 3.0 * se, "{label}: {mean} ± {se} vs {exact}");
        }
    }

    #[test]
    fn half_goal_mixture_draws_single_spikes_half_the_time() {
        let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(25)).unwrap();
        let prior = Prior::mixture(vec![
            (0.5, Prior::Gaussian(MetricK::white_noise(mdp.rho()).unwrap())),
            (0.5, Prior::Scattered(ScatteredSpec::goal_reaching())),
        ])
        .unwrap();
        let n = 20_000;
        let mut rng = seeded(26);
        let spikes = (0..n)
            .filter(|_| sample_reward(&prior, &mdp, &mut rng).dense.iter().filter(|x| **x != 0.0).count() == 1)
            .count();
        let frac = spikes as f64 / n as f64;
        assert!((frac - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{frac}");
    }
}
