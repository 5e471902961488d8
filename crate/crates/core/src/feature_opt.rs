//! Feature training against the zero-shot loss.
//!
//! The Gaussian trainer descends `−d(s,z) φ(s)ᵀz + λ_C L_C + λ_orth L_orth`
//! with `z ∼ N(0, C̄⁻¹)`; the sparse trainer descends `−Σ c_k w_i d(s_i, z(φ))`
//! with task codes `z(φ) = C̄⁻¹ Σ c_k w_i φ(s_i)`. Both keep an EMA copy `C̄`
//! of the feature covariance and evaluate every gradient at a stop-grad
//! snapshot `(φ̄, C̄)` taken at the start of the step.
//!
//! `L_C` below is `−½ d(s,z) (φ̄(s)ᵀz) Σ_ij ((C̄⁻¹)_ij − z_i z_j) ⟨φ_i, φ_j⟩_K`.
//! Its sign follows from the log-derivative identity
//! `∂_C E_{z∼N(0,C⁻¹)} f(z) = ½ E[f(z) (C⁻¹ − zzᵀ)]` applied to the loss
//! integrand `f = −d φᵀz`; [`FrozenPolicyLoss`] checks it against finite
//! differences of the exact loss.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{FeatureCovariance, FeatureSet, LinearEncoder};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::loss::{
    exact_gaussian_loss, exact_sparse_loss, greedy_policy, nearest_code, policy_family_exact, ExactLossOptions,
    PolicyFamily, TabularQFamily,
};
use crate::mdp::{Policy, RewardVector, TabularMdp};
use crate::occupancy::{density_exact, OccupationModel, TdConfig, TdModel};
use crate::priors::{sample_scattered_reward, MetricK, Prior, ScatteredSpec, SparseReward};
use crate::rng::{sample_index, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub exact_loss: f64,
    /// `‖C − Id‖_F` of the current features.
    pub orth_residual: f64,
    pub component: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyBackend {
    #[default]
    ExactGreedy,
    TabularQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyBackend {
    #[default]
    Exact,
    Td,
}

/// Law of the training codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeLaw {
    /// `z ∼ N(0, C̄⁻¹)`.
    #[default]
    Gaussian,
    /// `z` uniform on the unit sphere, as in VISR.
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub d: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::one")]
    pub lambda_c: f64,
    #[serde(default = "defaults::one")]
    pub lambda_orth: f64,
    /// Constant EMA weight `β_t`.
    #[serde(default = "defaults::ema_beta")]
    pub ema_beta: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    /// Codes (or sparse tasks) per step.
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default)]
    pub policy_backend: PolicyBackend,
    #[serde(default)]
    pub occupancy_backend: OccupancyBackend,
    #[serde(default)]
    pub td: TdConfig,
    #[serde(default = "defaults::q_lr")]
    pub q_lr: f64,
    /// Tabular Q updates per code per step.
    #[serde(default = "defaults::q_updates")]
    pub q_updates: usize,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub code_law: CodeLaw,
    /// Rescale every row of φ to unit length after each step.
    #[serde(default)]
    pub normalize_rows: bool,
    #[serde(default = "defaults::one")]
    pub init_scale: f64,
    /// Relative width `σ` of the Gaussian smoothing of `d(s, ·)` in the
    /// sparse trainer.
    #[serde(default = "defaults::smoothing")]
    pub smoothing: f64,
    #[serde(default = "defaults::smoothing_pairs")]
    pub smoothing_pairs: usize,
    /// Average the `C⁻¹` correction over all probe states instead of
    /// sampling one probe per task.
    #[serde(default = "defaults::yes")]
    pub exact_probe: bool,
    #[serde(default = "defaults::phi_cap")]
    pub phi_cap: f64,
    #[serde(default = "defaults::loss_cap")]
    pub loss_cap: f64,
    #[serde(default)]
    pub eval: ExactLossOptions,
}

mod defaults {
    pub fn steps() -> usize {
        5000
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn ema_beta() -> f64 {
        0.99
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn lr_decay() -> f64 {
        1e4
    }
    pub fn batch() -> usize {
        8
    }
    pub fn q_lr() -> f64 {
        0.1
    }
    pub fn q_updates() -> usize {
        4
    }
    pub fn eval_interval() -> usize {
        500
    }
    pub fn smoothing() -> f64 {
        0.3
    }
    pub fn smoothing_pairs() -> usize {
        4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn phi_cap() -> f64 {
        1e3
    }
    pub fn loss_cap() -> f64 {
        1e6
    }
}

impl TrainerConfig {
    pub fn new(d: usize) -> Self {
        serde_json::from_value(serde_json::json!({ "d": d })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d == 0 {
            return bad("feature dimension d must be positive".into());
        }
        if self.lambda_c != 0.0 && self.lambda_c != 1.0 {
            return bad(format!("lambda_c must satisfy λ_C ∈ {{0,1}}, got {}", self.lambda_c));
        }
        if !(self.lambda_orth >= 0.0) {
            return bad(format!("lambda_orth must be nonnegative, got {}", self.lambda_orth));
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return bad(format!("ema_beta must lie in (0, 1), got {}", self.ema_beta));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.q_lr > 0.0) {
            return bad("learning rates and decay must be positive".into());
        }
        if self.batch == 0 || self.eval_interval == 0 || self.smoothing_pairs == 0 {
            return bad("batch, eval_interval and smoothing_pairs must be positive".into());
        }
        if !(self.smoothing > 0.0) || !(self.init_scale > 0.0) {
            return bad("smoothing and init_scale must be positive".into());
        }
        if self.td.codebook_size == 0 {
            return bad("codebook_size must be positive".into());
        }
        Ok(())
    }

    fn learned_backends(&self) -> bool {
        self.policy_backend == PolicyBackend::TabularQ || self.occupancy_backend == OccupancyBackend::Td
    }

    fn learning_rate(&self, step: usize) -> f64 {
        self.lr / (1.0 + step as f64 / self.lr_decay)
    }
}

/// Stop-grad copies `φ̄` and `C̄` for one optimizer step.
#[derive(Debug, Clone)]
pub struct StopGradSnapshot {
    pub phi_bar: Mat,
    pub c_bar: FeatureCovariance,
}

impl StopGradSnapshot {
    pub fn take(phi: &Mat, c_ema: &Mat) -> Result<Self> {
        Ok(Self { phi_bar: phi.clone(), c_bar: FeatureCovariance::from_matrix(c_ema.clone())? })
    }

    /// Snapshot whose `C̄` is the exact covariance of `φ`.
    pub fn fresh(phi: &Mat, k: &MetricK) -> Result<Self> {
        Self::take(phi, &(phi.transpose() * k.matrix() * phi))
    }
}

/// `‖φᵀKφ − Id‖²_F` and its gradient `4Kφ(C − Id)`.
pub fn orth_loss(phi: &Mat, k: &MetricK) -> (f64, Mat) {
    let kphi = k.matrix() * phi;
    let e = phi.transpose() * &kphi - Mat::identity(phi.ncols(), phi.ncols());
    (e.norm_squared(), kphi * &e * 4.0)
}

/// Gradient of `−d_sz φ(s)ᵀz`: row `s` receives `−d_sz z`.
pub fn main_term_grad(phi: &Mat, z: &Vector, s: usize, d_sz: f64) -> Mat {
    let mut g = Mat::zeros(phi.nrows(), phi.ncols());
    g.row_mut(s).copy_from(&(z.transpose() * -d_sz));
    g
}

/// Value and gradient of `L_C` at `φ` for one `(s, z)` sample. The
/// dependence on `φ` is only through `⟨φ_i, φ_j⟩_K`.
pub fn c_correction_loss(
    phi: &Mat,
    z: &Vector,
    s: usize,
    d_sz: f64,
    snapshot: &StopGradSnapshot,
    k: &MetricK,
) -> (f64, Mat) {
    let a = d_sz * snapshot.phi_bar.row(s).transpose().dot(z);
    let m = snapshot.c_bar.inverse() - z * z.transpose();
    let kphi = k.matrix() * phi;
    let c = phi.transpose() * &kphi;
    let value = -0.5 * a * m.component_mul(&c).sum();
    (value, kphi * m * (-a))
}

/// Per-code gradient of the Gaussian feature loss with the state sum taken
/// exactly: `Σ_s ρ(s) d(s,z) = d_π(s)`, so row `s` of the main term is
/// `−d_π(s) z`. `occupation` is the occupation distribution `d_π`.
pub fn gaussian_code_gradient(
    snapshot: &StopGradSnapshot,
    k: &MetricK,
    z: &Vector,
    occupation: &Vector,
    lambda_c: f64,
) -> Mat {
    let phi = &snapshot.phi_bar;
    let mut g = occupation * z.transpose() * -1.0;
    if lambda_c != 0.0 {
        let a = occupation.dot(&(phi * z));
        let m = snapshot.c_bar.inverse() - z * z.transpose();
        g -= k.matrix() * phi * m * (lambda_c * a);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogTrickEstimate {
    /// Mean surrogate value `½ f(z)(tr(C̄⁻¹C) − zᵀCz)`.
    pub value: f64,
    /// Surrogate gradient with respect to `C`, `½ E[f(z)(C̄⁻¹ − zzᵀ)]`.
    pub grad: Mat,
    pub stderr: Mat,
}

/// Log-trick surrogate for `∂_C E_{z∼N(0,C⁻¹)} f(z)` from samples
/// `(z_i, f(z_i))` with `z_i ∼ N(0, C̄⁻¹)`.
pub fn lemma8_surrogate(c: &Mat, c_bar: &FeatureCovariance, samples: &[(Vector, f64)]) -> LogTrickEstimate {
    let d = c.nrows();
    let n = samples.len() as f64;
    let c_bar_inv = c_bar.inverse();
    let tr = c_bar_inv.component_mul(c).sum();
    let mut value = 0.0;
    let mut sum = Mat::zeros(d, d);
    let mut sum_sq = Mat::zeros(d, d);
    for (z, f) in samples {
        value += 0.5 * f * (tr - z.dot(&(c * z)));
        let g = (c_bar_inv - z * z.transpose()) * (0.5 * f);
        sum_sq += g.component_mul(&g);
        sum += g;
    }
    let grad = &sum / n;
    let var = (sum_sq / n - grad.component_mul(&grad)) * (n / (n - 1.0).max(1.0));
    let stderr = var.map(|v| (v.max(0.0) / n).sqrt());
    LogTrickEstimate { value: value / n, grad, stderr }
}

/// `β C_ema + (1 − β) φᵀKφ`.
pub fn ema_covariance_update(c_ema: &Mat, phi: &Mat, k: &MetricK, beta: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("EMA weight {beta} outside [0, 1]")));
    }
    Ok(c_ema * beta + phi.transpose() * k.matrix() * phi * (1.0 - beta))
}

/// Sparse task code with the stop-grad correction that supplies the
/// `∂(C⁻¹)` contribution:
/// `z(φ) = Σ c w_i C̄⁻¹φ(s_i) + c w_i C̄⁻¹(φ̄(s')φ̄(s')ᵀ − φ(s')φ(s')ᵀ)C̄⁻¹φ̄(s_i)`.
#[derive(Debug, Clone)]
pub struct SparseCode {
    pub z: Vector,
    /// `(s_i, c_k w_i)`.
    terms: Vec<(usize, f64)>,
    probe: usize,
    phi_bar: Mat,
    c_bar_inv: Mat,
    /// `C̄⁻¹ Σ c w_i φ̄(s_i)`, the forward value at `φ = φ̄`.
    u: Vector,
}

pub fn sparse_code_with_correction(
    phi: &Mat,
    snapshot: &StopGradSnapshot,
    reward: &SparseReward,
    s_probe: usize,
    k: &MetricK,
) -> Result<SparseCode> {
    if !k.is_white_noise() {
        return Err(Error::Unsupported(
            "the sparse-code covariance correction is only defined for the white-noise metric".into(),
        ));
    }
    let c_bar_inv = snapshot.c_bar.inverse().clone();
    let terms: Vec<(usize, f64)> =
        reward.goals.iter().zip(&reward.weights).map(|(&(s, _), w)| (s, reward.scale * w)).collect();
    let d = phi.ncols();
    let mut b = Vector::zeros(d);
    let mut b_bar = Vector::zeros(d);
    for &(s, cw) in &terms {
        b += phi.row(s).transpose() * cw;
        b_bar += snapshot.phi_bar.row(s).transpose() * cw;
    }
    let u = &c_bar_inv * &b_bar;
    let x_bar = snapshot.phi_bar.row(s_probe).transpose();
    let x = phi.row(s_probe).transpose();
    let correction = &c_bar_inv * (&x_bar * x_bar.dot(&u) - &x * x.dot(&u));
    let z = &c_bar_inv * b + correction;
    Ok(SparseCode { z, terms, probe: s_probe, phi_bar: snapshot.phi_bar.clone(), c_bar_inv, u })
}

impl SparseCode {
    fn goal_part(&self, a: &Vector) -> Mat {
        let mut g = Mat::zeros(self.phi_bar.nrows(), self.phi_bar.ncols());
        for &(s, cw) in &self.terms {
            let mut row = g.row_mut(s);
            row += a.transpose() * cw;
        }
        g
    }

    fn probe_row(&self, a: &Vector, s: usize) -> Vector {
        let x = self.phi_bar.row(s).transpose();
        -(a * x.dot(&self.u) + &self.u * a.dot(&x))
    }

    /// Gradient of `vᵀ z(φ)` at `φ = φ̄` through the sampled probe.
    pub fn vjp_probe(&self, v: &Vector) -> Mat {
        let a = &self.c_bar_inv * v;
        let mut g = self.goal_part(&a);
        let row = self.probe_row(&a, self.probe);
        let mut target = g.row_mut(self.probe);
        target += row.transpose();
        g
    }

    /// Same gradient with the probe integrated out against `ρ`.
    pub fn vjp_expected(&self, v: &Vector, rho: &Vector) -> Mat {
        let a = &self.c_bar_inv * v;
        let mut g = self.goal_part(&a);
        for s in 0..g.nrows() {
            let row = self.probe_row(&a, s) * rho[s];
            let mut target = g.row_mut(s);
            target += row.transpose();
        }
        g
    }
}

/// Tabular `Q` with an EMA target copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub q: Mat,
    pub q_bar: Mat,
    pub target_ema: f64,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize, target_ema: f64) -> Self {
        Self { q: Mat::zeros(n_states, n_actions), q_bar: Mat::zeros(n_states, n_actions), target_ema }
    }

    fn sync_target(&mut self) {
        let tau = self.target_ema;
        self.q_bar = &self.q_bar * tau + &self.q * (1.0 - tau);
    }
}

/// One step on `Q(s,a)² − 2 Σ c w_i Q(s_i, a_i) − 2γ Q(s,a) Q̄(s',a')` with
/// `(s, a, s')` from the dataset and `a' ∼ π(s')`. The goal actions are
/// integrated against the behavior policy, so the fixed point is `Q^π` for
/// the state reward `Σ c w_i δ_{s_i}`.
pub fn sparse_q_update<R: Rng + ?Sized>(
    table: &mut QTable,
    mdp: &TabularMdp,
    policy: &Policy,
    reward: &SparseReward,
    lr: f64,
    rng: &mut R,
) {
    let t = mdp.sample_transition(rng);
    let a_next = policy.sample_action(t.next, rng);
    let target = mdp.gamma() * table.q_bar[(t.next, a_next)];
    table.q[(t.state, t.action)] += lr * (target - table.q[(t.state, t.action)]);
    let behavior = mdp.behavior_policy();
    for (&(s, _), w) in reward.goals.iter().zip(&reward.weights) {
        for a in 0..mdp.n_actions() {
            table.q[(s, a)] += lr * reward.scale * w * behavior.prob(s, a);
        }
    }
    table.sync_target();
}

/// SARSA-style step for a dense state reward.
pub fn dense_q_update<R: Rng + ?Sized>(
    table: &mut QTable,
    mdp: &TabularMdp,
    policy: &Policy,
    reward: &RewardVector,
    lr: f64,
    rng: &mut R,
) {
    let t = mdp.sample_transition(rng);
    let a_next = policy.sample_action(t.next, rng);
    let target = reward[t.state] + mdp.gamma() * table.q_bar[(t.next, a_next)];
    table.q[(t.state, t.action)] += lr * (target - table.q[(t.state, t.action)]);
    table.sync_target();
}

/// Random features with `φᵀKφ = Id` exactly, times `scale`.
pub fn random_orthonormal_features<R: Rng + ?Sized>(
    n_states: usize,
    d: usize,
    k: &MetricK,
    scale: f64,
    rng: &mut R,
) -> Result<FeatureSet> {
    let g = FeatureSet::random(n_states, d, rng)?.into_matrix();
    let c = g.transpose() * k.matrix() * &g;
    let l = linalg::cholesky(&c, "initial feature covariance")?.l();
    let l_inv_t = l.transpose().try_inverse().ok_or_else(|| Error::Singular("initial features".into()))?;
    FeatureSet::new(g * l_inv_t * scale)
}

fn normalize_rows(phi: &mut Mat) {
    for mut row in phi.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

#[derive(Debug, Clone)]
pub enum ComponentSpec {
    Gaussian,
    Sparse(ScatteredSpec),
}

impl ComponentSpec {
    fn name(&self) -> &'static str {
        match self {
            ComponentSpec::Gaussian => "gaussian",
            ComponentSpec::Sparse(_) => "sparse",
        }
    }
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    spec: ComponentSpec,
    /// Gaussian codebook in whitened coordinates.
    xi_book: Vec<Vector>,
    /// Sparse codebook of fixed tasks.
    task_book: Vec<SparseReward>,
    q: Vec<QTable>,
    td: Option<TdModel>,
    codes: Vec<Vector>,
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub phi: FeatureSet,
    pub c_ema: Mat,
    pub family: PolicyFamily,
    pub occupancy: OccupationModel,
    pub trace: Vec<TracePoint>,
    /// Codebook of the first component when a learned backend is used.
    pub codebook: Vec<Vector>,
    pub q_tables: Vec<Mat>,
    pub steps: usize,
}

impl TrainedBundle {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |p| p.exact_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |p| p.exact_loss)
    }
}

pub struct Trainer<'a> {
    mdp: &'a TabularMdp,
    k: MetricK,
    config: TrainerConfig,
    phi: Mat,
    c_ema: Mat,
    components: Vec<Component>,
    step: usize,
    trace: Vec<TracePoint>,
}

impl<'a> Trainer<'a> {
    pub fn new<R: Rng + ?Sized>(
        mdp: &'a TabularMdp,
        k: MetricK,
        components: Vec<(f64, ComponentSpec)>,
        config: TrainerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if components.is_empty() {
            return Err(Error::InvalidArgument("no training component".into()));
        }
        if config.d > mdp.n_states() {
            return Err(Error::InvalidArgument(format!("d = {} exceeds {} states", config.d, mdp.n_states())));
        }
        if k.dim() != mdp.n_states() {
            return Err(Error::Dimension("metric and MDP sizes differ".into()));
        }
        let has_sparse = components.iter().any(|(_, c)| matches!(c, ComponentSpec::Sparse(_)));
        if has_sparse && !k.is_white_noise() {
            return Err(Error::Unsupported("sparse training requires the white-noise encoding metric".into()));
        }
        let mut phi = random_orthonormal_features(mdp.n_states(), config.d, &k, config.init_scale, rng)?.into_matrix();
        if config.normalize_rows {
            normalize_rows(&mut phi);
        }
        let c_ema = phi.transpose() * k.matrix() * &phi;
        let mut built = Vec::with_capacity(components.len());
        for (weight, spec) in components {
            let mut comp = Component {
                weight,
                spec,
                xi_book: Vec::new(),
                task_book: Vec::new(),
                q: Vec::new(),
                td: None,
                codes: Vec::new(),
            };
            if config.learned_backends() {
                let size = config.td.codebook_size;
                match &comp.spec {
                    ComponentSpec::Gaussian => {
                        comp.xi_book =
                            (0..size).map(|_| Vector::from_fn(config.d, |_, _| rng.sample(StandardNormal))).collect();
                    }
                    ComponentSpec::Sparse(spec) => {
                        spec.validate()?;
                        comp.task_book = (0..size).map(|_| sample_scattered_reward(spec, mdp, rng)).collect();
                    }
                }
                comp.q = vec![QTable::zeros(mdp.n_states(), mdp.n_actions(), config.td.target_ema); size];
                if config.occupancy_backend == OccupancyBackend::Td {
                    let codes = vec![Vector::zeros(config.d); size];
                    let policies = vec![Policy::uniform(mdp.n_states(), mdp.n_actions()); size];
                    comp.td = Some(TdModel::new(mdp, codes, policies, config.td)?);
                }
            } else if let ComponentSpec::Sparse(spec) = &comp.spec {
                spec.validate()?;
            }
            built.push(comp);
        }
        Ok(Self { mdp, k, config, phi, c_ema, components: built, step: 0, trace: Vec::new() })
    }

    pub fn phi(&self) -> &Mat {
        &self.phi
    }

    pub fn set_phi(&mut self, phi: Mat) -> Result<()> {
        FeatureSet::new(phi.clone())?;
        self.c_ema = phi.transpose() * self.k.matrix() * &phi;
        self.phi = phi;
        Ok(())
    }

    fn code_from_xi(&self, snapshot: &StopGradSnapshot, xi: &Vector) -> Vector {
        match self.config.code_law {
            CodeLaw::Gaussian => snapshot.c_bar.whiten_inverse(xi),
            CodeLaw::Sphere => xi / xi.norm(),
        }
    }

    fn exact_policy(&self, snapshot: &StopGradSnapshot, z: &Vector) -> Result<Policy> {
        let r = RewardVector::new(&snapshot.phi_bar * z)?;
        Ok(self.mdp.optimal_policy(&r)?.0)
    }

    /// Refresh codes, tabular Q functions and TD tables of a component.
    /// Returns the policy of every codebook entry.
    fn refresh_learned<R: Rng + ?Sized>(
        &mut self,
        idx: usize,
        snapshot: &StopGradSnapshot,
        rng: &mut R,
    ) -> Result<Vec<Policy>> {
        let codes: Vec<Vector> = match &self.components[idx].spec {
            ComponentSpec::Gaussian => {
                self.components[idx].xi_book.iter().map(|xi| self.code_from_xi(snapshot, xi)).collect()
            }
            ComponentSpec::Sparse(_) => self.components[idx]
                .task_book
                .iter()
                .map(|t| {
                    let b = t.goals.iter().zip(&t.weights).fold(Vector::zeros(self.config.d), |acc, (&(s, _), w)| {
                        acc + snapshot.phi_bar.row(s).transpose() * (t.scale * w)
                    });
                    snapshot.c_bar.inverse() * b
                })
                .collect(),
        };
        let q_lr = self.config.q_lr / (1.0 + self.step as f64 / self.config.td.lr_decay);
        let mut policies = Vec::with_capacity(codes.len());
        for (j, z) in codes.iter().enumerate() {
            let policy = match self.config.policy_backend {
                PolicyBackend::ExactGreedy => self.exact_policy(snapshot, z)?,
                PolicyBackend::TabularQ => {
                    let comp = &mut self.components[idx];
                    for _ in 0..self.config.q_updates {
                        let behavior = greedy_policy(&comp.q[j].q);
                        match &comp.spec {
                            ComponentSpec::Gaussian => {
                                let r = RewardVector::new(&snapshot.phi_bar * z)?;
                                dense_q_update(&mut comp.q[j], self.mdp, &behavior, &r, q_lr, rng);
                            }
                            ComponentSpec::Sparse(_) => {
                                let task = comp.task_book[j].clone();
                                sparse_q_update(&mut comp.q[j], self.mdp, &behavior, &task, q_lr, rng);
                            }
                        }
                    }
                    greedy_policy(&comp.q[j].q)
                }
            };
            policies.push(policy);
        }
        let comp = &mut self.components[idx];
        if let Some(td) = comp.td.as_mut() {
            td.set_codes(codes.clone(), policies.clone())?;
            td.step(self.mdp, rng);
        }
        comp.codes = codes;
        Ok(policies)
    }

    fn occupation_for(&self, idx: usize, j: Option<usize>, policy: &Policy) -> Result<Vector> {
        match (&self.components[idx].td, j) {
            (Some(td), Some(j)) => Ok(td.density_row(j).component_mul(self.mdp.rho())),
            _ => Ok(self.mdp.occupation_measure(policy)?.dist),
        }
    }

    fn gaussian_gradient<R: Rng + ?Sized>(
        &mut self,
        idx: usize,
        snapshot: &StopGradSnapshot,
        rng: &mut R,
    ) -> Result<Mat> {
        let mut grad = Mat::zeros(self.phi.nrows(), self.phi.ncols());
        let mut batch: Vec<(Vector, Option<usize>, Policy)> = Vec::with_capacity(self.config.batch);
        if self.config.learned_backends() {
            let policies = self.refresh_learned(idx, snapshot, rng)?;
            for _ in 0..self.config.batch {
                let j = rng.random_range(0..policies.len());
                batch.push((self.components[idx].codes[j].clone(), Some(j), policies[j].clone()));
            }
        } else {
            for _ in 0..self.config.batch.div_ceil(2) {
                let xi = Vector::from_fn(self.config.d, |_, _| rng.sample(StandardNormal));
                let z = self.code_from_xi(snapshot, &xi);
                for code in [z.clone(), -z] {
                    let policy = self.exact_policy(snapshot, &code)?;
                    batch.push((code, None, policy));
                }
            }
        }
        for (z, j, policy) in &batch {
            let occ = self.occupation_for(idx, *j, policy)?;
            grad += gaussian_code_gradient(snapshot, &self.k, z, &occ, self.config.lambda_c);
        }
        Ok(grad / batch.len() as f64)
    }

    fn sparse_gradient<R: Rng + ?Sized>(
        &mut self,
        idx: usize,
        snapshot: &StopGradSnapshot,
        rng: &mut R,
    ) -> Result<Mat> {
        let spec = match &self.components[idx].spec {
            ComponentSpec::Sparse(spec) => spec.clone(),
            ComponentSpec::Gaussian => unreachable!("dispatched by component kind"),
        };
        let mut grad = Mat::zeros(self.phi.nrows(), self.phi.ncols());
        let mut tasks: Vec<(SparseReward, Option<usize>)> = Vec::with_capacity(self.config.batch);
        let mut policies = Vec::new();
        if self.config.learned_backends() {
            policies = self.refresh_learned(idx, snapshot, rng)?;
            for _ in 0..self.config.batch {
                let j = rng.random_range(0..policies.len());
                tasks.push((self.components[idx].task_book[j].clone(), Some(j)));
            }
        } else {
            for _ in 0..self.config.batch {
                tasks.push((sample_scattered_reward(&spec, self.mdp, rng), None));
            }
        }
        let rho = self.mdp.rho().clone();
        let sigma = self.config.smoothing;
        for (task, j) in &tasks {
            let probe = self.mdp.sample_state(rng);
            let code = sparse_code_with_correction(&self.phi, snapshot, task, probe, &self.k)?;
            // The TD backend's density table does not depend on φ.
            if self.components[idx].td.is_some() {
                continue;
            }
            let mut g_z = Vector::zeros(self.config.d);
            for _ in 0..self.config.smoothing_pairs {
                let xi = Vector::from_fn(self.config.d, |_, _| rng.sample(StandardNormal));
                let eta = snapshot.c_bar.whiten_inverse(&xi) * sigma;
                let plus = self.smoothed_density(idx, snapshot, &(&code.z + &eta), *j, &policies)?;
                let minus = self.smoothed_density(idx, snapshot, &(&code.z - &eta), *j, &policies)?;
                let diff: f64 = task
                    .goals
                    .iter()
                    .zip(&task.weights)
                    .map(|(&(s, _), w)| task.scale * w * (plus[s] - minus[s]))
                    .sum();
                g_z += snapshot.c_bar.matrix() * &eta * (diff / (2.0 * sigma * sigma));
            }
            g_z /= self.config.smoothing_pairs as f64;
            let v = -g_z;
            grad += if self.config.exact_probe { code.vjp_expected(&v, &rho) } else { code.vjp_probe(&v) };
        }
        Ok(grad / tasks.len() as f64)
    }

    /// `d(·, z')` at a perturbed code under the component's policy map.
    fn smoothed_density(
        &self,
        idx: usize,
        snapshot: &StopGradSnapshot,
        z: &Vector,
        j: Option<usize>,
        policies: &[Policy],
    ) -> Result<Vector> {
        let policy = match (self.config.policy_backend, j) {
            (PolicyBackend::TabularQ, Some(_)) => policies[nearest_code(&self.components[idx].codes, z)].clone(),
            _ => self.exact_policy(snapshot, z)?,
        };
        density_exact(self.mdp, &policy)
    }

    /// Exact loss of the current features for every component, and their
    /// weighted sum.
    pub fn exact_losses(&self) -> Result<(Vec<f64>, f64)> {
        let phi = FeatureSet::new(self.phi.clone())?;
        let encoder = LinearEncoder::new(phi.clone(), self.k.clone())?;
        let family = PolicyFamily::exact_uncached(&phi);
        let mut losses = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            losses.push(match &comp.spec {
                ComponentSpec::Gaussian => exact_gaussian_loss(self.mdp, &encoder, &family, &self.config.eval)?,
                ComponentSpec::Sparse(spec) => exact_sparse_loss(self.mdp, spec, &encoder, &family, &self.config.eval)?,
            });
        }
        let mixed = losses.iter().zip(&self.components).map(|(l, c)| l * c.weight).sum();
        Ok((losses, mixed))
    }

    fn record(&mut self, component: &str) -> Result<()> {
        let (_, mixed) = self.exact_losses()?;
        let c = self.phi.transpose() * self.k.matrix() * &self.phi;
        let orth_residual = (c - Mat::identity(self.config.d, self.config.d)).norm();
        self.trace.push(TracePoint { step: self.step, exact_loss: mixed, orth_residual, component: component.into() });
        if !mixed.is_finite() || mixed.abs() > self.config.loss_cap {
            return Err(self.diverged(format!("loss {mixed:e} exceeds the cap {:e}", self.config.loss_cap)));
        }
        Ok(())
    }

    fn diverged(&self, reason: String) -> Error {
        Error::Diverged { step: self.step, reason, trace: self.trace.clone() }
    }

    /// One optimizer step; returns the index of the component used.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        self.c_ema = ema_covariance_update(&self.c_ema, &self.phi, &self.k, self.config.ema_beta)?;
        let snapshot = StopGradSnapshot::take(&self.phi, &self.c_ema)?;
        let idx = if self.components.len() > 1 {
            let weights: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
            sample_index(&weights, rng)
        } else {
            0
        };
        let mut grad = match self.components[idx].spec {
            ComponentSpec::Gaussian => self.gaussian_gradient(idx, &snapshot, rng)?,
            ComponentSpec::Sparse(_) => self.sparse_gradient(idx, &snapshot, rng)?,
        };
        if self.config.lambda_orth > 0.0 {
            grad += orth_loss(&self.phi, &self.k).1 * self.config.lambda_orth;
        }
        self.phi -= grad * self.config.learning_rate(self.step);
        if self.config.normalize_rows {
            normalize_rows(&mut self.phi);
        }
        self.step += 1;
        let size = linalg::sup_norm(&self.phi);
        if !size.is_finite() || size > self.config.phi_cap {
            return Err(self.diverged(format!("|phi|_inf = {size:e} exceeds the cap {:e}", self.config.phi_cap)));
        }
        if let Err(Error::LinearDependence(sigma)) = FeatureSet::new(self.phi.clone()) {
            return Err(self.diverged(format!("features became linearly dependent (sigma_min {sigma:e})")));
        }
        Ok(idx)
    }

    pub fn run<R: Rng + ?Sized>(mut self, rng: &mut R) -> Result<TrainedBundle> {
        let first = self.components[0].spec.name();
        self.record(first)?;
        for _ in 0..self.config.steps {
            let idx = self.step(rng)?;
            if self.step.is_multiple_of(self.config.eval_interval) || self.step == self.config.steps {
                let name = self.components[idx].spec.name();
                self.record(name)?;
            }
        }
        self.finish()
    }

    fn finish(self) -> Result<TrainedBundle> {
        let phi = FeatureSet::new(self.phi.clone())?;
        let first = &self.components[0];
        let family = match self.config.policy_backend {
            PolicyBackend::TabularQ => PolicyFamily::TabularQ(TabularQFamily {
                codes: first.codes.clone(),
                q: first.q.iter().map(|t| t.q.clone()).collect(),
            }),
            PolicyBackend::ExactGreedy => policy_family_exact(&phi),
        };
        let occupancy = match &first.td {
            Some(td) => OccupationModel::Td(td.clone()),
            None => OccupationModel::Exact,
        };
        Ok(TrainedBundle {
            phi,
            c_ema: self.c_ema,
            family,
            occupancy,
            trace: self.trace,
            codebook: first.codes.clone(),
            q_tables: first.q.iter().map(|t| t.q.clone()).collect(),
            steps: self.step,
        })
    }
}

pub fn train_features_gaussian<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    k: &MetricK,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<TrainedBundle> {
    Trainer::new(mdp, k.clone(), vec![(1.0, ComponentSpec::Gaussian)], config.clone(), rng)?.run(rng)
}

pub fn train_features_sparse<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    spec: &ScatteredSpec,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<TrainedBundle> {
    let k = MetricK::white_noise(mdp.rho())?;
    Trainer::new(mdp, k, vec![(1.0, ComponentSpec::Sparse(spec.clone()))], config.clone(), rng)?.run(rng)
}

/// Resolve a prior into trainer components sharing one encoding metric.
pub fn mixture_components(mdp: &TabularMdp, prior: &Prior) -> Result<(MetricK, Vec<(f64, ComponentSpec)>)> {
    let parts: Vec<(f64, &Prior)> = match prior {
        Prior::Mixture(parts) => parts.iter().map(|(w, p)| (*w, p)).collect(),
        other => vec![(1.0, other)],
    };
    let mut metric: Option<MetricK> = None;
    let mut components = Vec::with_capacity(parts.len());
    for (w, p) in parts {
        match p {
            Prior::Gaussian(k) => {
                if let Some(existing) = &metric {
                    if existing.matrix() != k.matrix() {
                        return Err(Error::Unsupported("Gaussian components must share one metric".into()));
                    }
                }
                metric = Some(k.clone());
                components.push((w, ComponentSpec::Gaussian));
            }
            Prior::Scattered(spec) => components.push((w, ComponentSpec::Sparse(spec.clone()))),
            Prior::Mixture(_) => return Err(Error::Unsupported("nested mixtures are not supported".into())),
        }
    }
    let k = match metric {
        Some(k) => k,
        None => MetricK::white_noise(mdp.rho())?,
    };
    Ok((k, components))
}

pub fn train_features_mixture<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    prior: &Prior,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<TrainedBundle> {
    let (k, components) = mixture_components(mdp, prior)?;
    Trainer::new(mdp, k, components, config.clone(), rng)?.run(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_entry: (usize, usize),
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central finite differences with `h = 1e-5` against an analytic gradient.
/// Entries where both values are below `1e-8` in magnitude are skipped.
pub fn grad_check<F>(loss_and_grad: F, phi: &Mat, tolerance: f64) -> GradCheckReport
where
    F: Fn(&Mat) -> (f64, Mat),
{
    const H: f64 = 1e-5;
    let (_, analytic) = loss_and_grad(phi);
    let mut worst = 0.0;
    let mut worst_entry = (0, 0);
    let mut checked = 0;
    for i in 0..phi.nrows() {
        for j in 0..phi.ncols() {
            let mut plus = phi.clone();
            plus[(i, j)] += H;
            let mut minus = phi.clone();
            minus[(i, j)] -= H;
            let fd = (loss_and_grad(&plus).0 - loss_and_grad(&minus).0) / (2.0 * H);
            let an = analytic[(i, j)];
            let scale = fd.abs().max(an.abs());
            if scale <= 1e-8 {
                continue;
            }
            checked += 1;
            let rel = (fd - an).abs() / scale;
            if rel > worst {
                worst = rel;
                worst_entry = (i, j);
            }
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_entry,
        entries_checked: checked,
        tolerance,
        passed: worst <= tolerance,
    }
}

/// Gaussian-form loss with every policy frozen at `π_z = argmax for φ̄z`,
/// integrated on a fixed grid in code space for `d ≤ 2`:
/// `F(φ) = −(1/(1−γ)) Σ_g w_g N(z_g; 0, C⁻¹) d_gᵀ φ z_g`.
/// With `vary_c` the density uses `C(φ) = φᵀKφ`, otherwise the frozen `C̄`.
#[derive(Debug, Clone)]
pub struct FrozenPolicyLoss {
    nodes: Vec<Vector>,
    occupations: Vec<Vector>,
    cell: f64,
    c_bar: Mat,
    k: MetricK,
    scale: f64,
}

impl FrozenPolicyLoss {
    pub fn new(
        mdp: &TabularMdp,
        phi_bar: &FeatureSet,
        k: &MetricK,
        points_per_dim: usize,
        radius: f64,
    ) -> Result<Self> {
        let d = phi_bar.d();
        if d > 2 {
            return Err(Error::Unsupported("grid quadrature is implemented for d <= 2".into()));
        }
        let c_bar = phi_bar.matrix().transpose() * k.matrix() * phi_bar.matrix();
        let c_inv = linalg::inverse(&c_bar, "frozen covariance")?;
        let half: Vec<f64> = (0..d).map(|i| radius * c_inv[(i, i)].sqrt()).collect();
        let h: Vec<f64> = half.iter().map(|w| 2.0 * w / points_per_dim as f64).collect();
        let mut nodes = Vec::new();
        let total = points_per_dim.pow(d as u32);
        for idx in 0..total {
            let mut rest = idx;
            let z = Vector::from_fn(d, |i, _| {
                let k = rest % points_per_dim;
                rest /= points_per_dim;
                -half[i] + (k as f64 + 0.5) * h[i]
            });
            nodes.push(z);
        }
        let occupations = nodes
            .par_iter()
            .map(|z| {
                let r = RewardVector::new(phi_bar.matrix() * z)?;
                let (pi, _) = mdp.optimal_policy(&r)?;
                Ok(mdp.occupation_measure(&pi)?.dist)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            nodes,
            occupations,
            cell: h.iter().product(),
            c_bar,
            k: k.clone(),
            scale: -1.0 / (1.0 - mdp.gamma()),
        })
    }

    fn density_matrix(&self, phi: &Mat, vary_c: bool) -> Mat {
        if vary_c {
            phi.transpose() * self.k.matrix() * phi
        } else {
            self.c_bar.clone()
        }
    }

    fn gaussian_density(c: &Mat, z: &Vector) -> f64 {
        let d = z.len() as f64;
        let det = c.determinant();
        (2.0 * std::f64::consts::PI).powf(-d / 2.0) * det.sqrt() * (-0.5 * z.dot(&(c * z))).exp()
    }

    pub fn loss(&self, phi: &Mat, vary_c: bool) -> f64 {
        self.loss_and_grad(phi, vary_c).0
    }

    pub fn loss_and_grad(&self, phi: &Mat, vary_c: bool) -> (f64, Mat) {
        let c = self.density_matrix(phi, vary_c);
        let c_inv = c.clone().try_inverse().unwrap_or_else(|| Mat::from_element(c.nrows(), c.ncols(), f64::NAN));
        let kphi = self.k.matrix() * phi;
        let mut value = 0.0;
        let mut grad = Mat::zeros(phi.nrows(), phi.ncols());
        for (z, occ) in self.nodes.iter().zip(&self.occupations) {
            let w = self.cell * Self::gaussian_density(&c, z);
            if w == 0.0 {
                continue;
            }
            let inner = occ.dot(&(phi * z));
            value += w * inner;
            grad += occ * z.transpose() * w;
            if vary_c {
                grad += &kphi * (&c_inv - z * z.transpose()) * (w * inner);
            }
        }
        (self.scale * value, grad * self.scale)
    }

    /// Total quadrature mass; close to one when the grid covers the density.
    pub fn mass(&self, phi: &Mat, vary_c: bool) -> f64 {
        let c = self.density_matrix(phi, vary_c);
        self.nodes.iter().map(|z| self.cell * Self::gaussian_density(&c, z)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: Mat,
    pub stderr: Mat,
    pub n_samples: usize,
}

impl GradientEstimate {
    pub fn relative_error(&self, reference: &Mat) -> f64 {
        (&self.mean - reference).norm() / reference.norm()
    }
}

/// Monte-Carlo gradient of the Gaussian-form loss at `φ̄` with `C̄ = C(φ̄)`,
/// from antithetic code pairs, scaled by `1/(1−γ)` to match
/// [`FrozenPolicyLoss`]. With `lambda_c = 0` only the main term is kept.
/// Samples are summed in fixed-size chunks in index order, so the result
/// does not depend on the thread count.
pub fn mc_gaussian_gradient(
    mdp: &TabularMdp,
    phi_bar: &FeatureSet,
    k: &MetricK,
    n_pairs: usize,
    seed: u64,
    lambda_c: f64,
) -> Result<GradientEstimate> {
    const CHUNK: usize = 1024;
    let snapshot = StopGradSnapshot::fresh(phi_bar.matrix(), k)?;
    let (n, d) = (phi_bar.n_states(), phi_bar.d());
    let scale = 1.0 / (1.0 - mdp.gamma());
    let n_chunks = n_pairs.div_ceil(CHUNK);
    let sums = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sum = Mat::zeros(n, d);
            let mut sum_sq = Mat::zeros(n, d);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_pairs) {
                let mut rng = stream(seed, i as u64);
                let z = snapshot.c_bar.sample_task(&mut rng);
                let mut g = Mat::zeros(n, d);
                for code in [z.clone(), -z] {
                    let r = RewardVector::new(phi_bar.matrix() * &code)?;
                    let (pi, _) = mdp.optimal_policy(&r)?;
                    let occ = mdp.occupation_measure(&pi)?.dist;
                    g += gaussian_code_gradient(&snapshot, k, &code, &occ, lambda_c) * (0.5 * scale);
                }
                sum_sq += g.component_mul(&g);
                sum += g;
            }
            Ok((sum, sum_sq))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = Mat::zeros(n, d);
    let mut sum_sq = Mat::zeros(n, d);
    for (s, q) in sums {
        sum += s;
        sum_sq += q;
    }
    let m = n_pairs as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean.component_mul(&mean)) * (m / (m - 1.0).max(1.0));
    Ok(GradientEstimate { stderr: var.map(|v| (v.max(0.0) / m).sqrt()), mean, n_samples: n_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::covariance;
    use crate::generators::{chain, random_mdp};
    use crate::priors::{KLaw, Scaling, WeightLaw};
    use crate::rng::seeded;

    fn white(mdp: &TabularMdp) -> MetricK {
        MetricK::white_noise(mdp.rho()).unwrap()
    }

    #[test]
    fn orth_loss_values() {
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut seeded(1)).unwrap();
        let k = white(&mdp);
        let phi = random_orthonormal_features(5, 3, &k, 1.0, &mut seeded(2)).unwrap().into_matrix();
        let (v, g) = orth_loss(&phi, &k);
        assert!(v < 1e-20 && g.amax() < 1e-10);
        let (v2, _) = orth_loss(&(&phi * 2.0), &k);
        assert!((v2 - 27.0).abs() < 1e-9);
    }

    #[test]
    fn orth_loss_gradient_check() {
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut seeded(3)).unwrap();
        let k = MetricK::dirichlet(&mdp, 0.5).unwrap();
        let phi = FeatureSet::random(5, 2, &mut seeded(4)).unwrap().into_matrix();
        let rep = grad_check(|p| orth_loss(p, &k), &phi, 1e-6);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let phi = Mat::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.7]);
        let f = |p: &Mat| ((p.transpose() * &a * p).trace(), &a * p * 2.0);
        let rep = grad_check(f, &phi, 1e-10);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn main_term_substitution() {
        let phi = Mat::zeros(3, 2);
        let z = Vector::from_vec(vec![1.0, 0.0]);
        let g = main_term_grad(&phi, &z, 1, 2.0);
        assert_eq!(g.row(1), Mat::from_row_slice(1, 2, &[-2.0, 0.0]).row(0));
        assert_eq!(g.row(0).norm() + g.row(2).norm(), 0.0);
        assert_eq!(main_term_grad(&phi, &z, 1, 0.0).norm(), 0.0);
    }

    #[test]
    fn c_correction_trace_identity() {
        let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(5)).unwrap();
        let k = white(&mdp);
        let phi = FeatureSet::random(4, 2, &mut seeded(6)).unwrap().into_matrix();
        let snap = StopGradSnapshot::fresh(&phi, &k).unwrap();
        let z = Vector::from_vec(vec![0.4, -0.9]);
        let (v, _) = c_correction_loss(&phi, &z, 2, 1.7, &snap, &k);
        let a = 1.7 * phi.row(2).transpose().dot(&z);
        let zcz = z.dot(&(snap.c_bar.matrix() * &z));
        assert!((v - (-0.5 * a * (2.0 - zcz))).abs() < 1e-10);
        let (v0, g0) = c_correction_loss(&phi, &Vector::zeros(2), 2, 1.7, &snap, &k);
        assert_eq!((v0, g0.norm()), (0.0, 0.0));
        // The gradient is that of the value in φ with the snapshot frozen.
        let rep = grad_check(|p| c_correction_loss(p, &z, 2, 1.7, &snap, &k), &phi, 1e-6);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn ema_limits() {
        let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(7)).unwrap();
        let k = white(&mdp);
        let phi = FeatureSet::random(4, 2, &mut seeded(8)).unwrap().into_matrix();
        let fresh = phi.transpose() * k.matrix() * &phi;
        let start = Mat::identity(2, 2);
        assert!((ema_covariance_update(&start, &phi, &k, 0.0).unwrap() - &fresh).amax() < 1e-14);
        assert_eq!(ema_covariance_update(&start, &phi, &k, 1.0).unwrap(), start);
        let mut c = start.clone();
        for _ in 0..10 {
            c = ema_covariance_update(&c, &phi, &k, 0.7).unwrap();
        }
        let expected = &fresh + (&start - &fresh) * 0.7f64.powi(10);
        assert!((c - expected).amax() < 1e-12);
    }

    #[test]
    fn log_trick_constant_function_has_zero_gradient_in_expectation() {
        let c = FeatureCovariance::from_matrix(Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let mut rng = seeded(9);
        let samples: Vec<(Vector, f64)> = (0..20_000).map(|_| (c.sample_task(&mut rng), 3.0)).collect();
        let est = lemma8_surrogate(c.matrix(), &c, &samples);
        for i in 0..2 {
            for j in 0..2 {
                assert!(est.grad[(i, j)].abs() < 4.0 * est.stderr[(i, j)]);
            }
        }
    }

    #[test]
    fn sparse_code_forward_identity() {
        let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(10)).unwrap();
        let k = white(&mdp);
        let phi = random_orthonormal_features(4, 4, &k, 1.0, &mut seeded(11)).unwrap().into_matrix();
        let snap = StopGradSnapshot::fresh(&phi, &k).unwrap();
        let r = SparseReward::new(vec![(2, 0)], vec![1.0], 1.0, mdp.rho()).unwrap();
        let code = sparse_code_with_correction(&phi, &snap, &r, 1, &k).unwrap();
        assert!((code.z - phi.row(2).transpose()).amax() < 1e-10);
        let dir = MetricK::dirichlet(&mdp, 1.0).unwrap();
        assert!(matches!(sparse_code_with_correction(&phi, &snap, &r, 1, &dir), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sparse_code_expected_gradient_matches_finite_differences() {
        let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(12)).unwrap();
        let k = white(&mdp);
        let phi = FeatureSet::random(4, 2, &mut seeded(13)).unwrap().into_matrix();
        let snap = StopGradSnapshot::fresh(&phi, &k).unwrap();
        let r = SparseReward::new(vec![(0, 0), (3, 1)], vec![0.8, -1.2], 0.5f64.sqrt(), mdp.rho()).unwrap();
        let v = Vector::from_vec(vec![0.6, -0.4]);
        let f = |p: &Mat| {
            let c = p.transpose() * k.matrix() * p;
            let b = p.row(0).transpose() * (r.scale * 0.8) + p.row(3).transpose() * (r.scale * -1.2);
            v.dot(&linalg::solve(&c, &b, "").unwrap())
        };
        let mut fd = Mat::zeros(4, 2);
        for i in 0..4 {
            for j in 0..2 {
                let (mut a, mut b) = (phi.clone(), phi.clone());
                a[(i, j)] += 1e-6;
                b[(i, j)] -= 1e-6;
                fd[(i, j)] = (f(&a) - f(&b)) / 2e-6;
            }
        }
        let code = sparse_code_with_correction(&phi, &snap, &r, 0, &k).unwrap();
        let exact = code.vjp_expected(&v, mdp.rho());
        assert!((&exact - &fd).norm() / fd.norm() < 1e-6);
        let mut rng = seeded(14);
        let mut avg = Mat::zeros(4, 2);
        let probes = 100_000;
        for _ in 0..probes {
            let s = mdp.sample_state(&mut rng);
            avg += sparse_code_with_correction(&phi, &snap, &r, s, &k).unwrap().vjp_probe(&v);
        }
        avg /= probes as f64;
        assert!((avg - &fd).norm() / fd.norm() < 0.05);
    }

    #[test]
    fn sparse_q_learns_dirac_value_on_cycle2() {
        let mdp = chain(2, 0.5).unwrap();
        let pi = Policy::uniform(2, 2);
        let r = SparseReward::new(vec![(1, 0)], vec![1.0], 1.0, mdp.rho()).unwrap();
        let mut table = QTable::zeros(2, 2, 0.99);
        let mut rng = seeded(15);
        for t in 0..200_000 {
            sparse_q_update(&mut table, &mdp, &pi, &r, 0.1 / (1.0 + t as f64 / 1e3), &mut rng);
        }
        let (_, q) = mdp.policy_value(&r.dense, &pi).unwrap();
        let err = (table.q - &q).amax();
        assert!(err < 0.05, "sup error {err}, q = {q}");
    }

    #[test]
    fn zero_weight_sparse_task_has_zero_gradient() {
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut seeded(16)).unwrap();
        let spec =
            ScatteredSpec { k_law: KLaw::Fixed(2), weight_law: WeightLaw::Constant(0.0), scaling: Scaling::InvSqrtK };
        let config = TrainerConfig { lambda_orth: 0.0, ..TrainerConfig::new(2) };
        let k = white(&mdp);
        let mut trainer =
            Trainer::new(&mdp, k, vec![(1.0, ComponentSpec::Sparse(spec))], config, &mut seeded(17)).unwrap();
        let before = trainer.phi().clone();
        trainer.step(&mut seeded(18)).unwrap();
        assert_eq!(trainer.phi(), &before);
    }

    #[test]
    fn lambda_c_must_be_binary() {
        let mut config = TrainerConfig::new(2);
        config.lambda_c = 0.5;
        assert!(config.validate().is_err());
        assert!(serde_json::from_str::<TrainerConfig>(r#"{"d":2,"bogus":1}"#).is_err());
    }

    #[test]
    fn frozen_policy_exact_loss_grad_check() {
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut seeded(19)).unwrap();
        let k = white(&mdp);
        let phi = FeatureSet::random(5, 2, &mut seeded(20)).unwrap();
        let frozen = FrozenPolicyLoss::new(&mdp, &phi, &k, 120, 7.0).unwrap();
        assert!((frozen.mass(phi.matrix(), true) - 1.0).abs() < 1e-6);
        for vary in [false, true] {
            let rep = grad_check(|p| frozen.loss_and_grad(p, vary), phi.matrix(), 1e-4);
            assert!(rep.passed, "vary_c = {vary}: {rep:?}");
        }
    }

    #[test]
    fn single_component_mixture_matches_single_trainer() {
        let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(21)).unwrap();
        let k = white(&mdp);
        let config = TrainerConfig { steps: 30, eval_interval: 10, ..TrainerConfig::new(2) };
        let a = train_features_gaussian(&mdp, &k, &config, &mut seeded(22)).unwrap();
        let prior = Prior::mixture(vec![(1.0, Prior::Gaussian(k.clone()))]).unwrap();
        let b = train_features_mixture(&mdp, &prior, &config, &mut seeded(22)).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn zero_weight_component_is_never_used() {
        let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(23)).unwrap();
        let k = white(&mdp);
        let config = TrainerConfig { steps: 0, ..TrainerConfig::new(2) };
        let comps = vec![(1.0, ComponentSpec::Gaussian), (0.0, ComponentSpec::Sparse(ScatteredSpec::goal_reaching()))];
        let mut trainer = Trainer::new(&mdp, k, comps, config, &mut seeded(24)).unwrap();
        let mut rng = seeded(25);
        for _ in 0..100 {
            assert_eq!(trainer.step(&mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn covariance_of_initial_features_is_identity() {
        let mdp = random_mdp(6, 2, 0.0, 0.9, &mut seeded(26)).unwrap();
        let k = MetricK::dirichlet(&mdp, 0.3).unwrap();
        let phi = random_orthonormal_features(6, 3, &k, 1.0, &mut seeded(27)).unwrap();
        let c = covariance(&phi, &k).unwrap();
        assert!((c.matrix() - Mat::identity(3, 3)).amax() < 1e-10);
    }
}
