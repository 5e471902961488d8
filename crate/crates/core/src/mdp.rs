//! Finite reward-free MDPs with exact dynamic-programming solvers.
//!
//! Rewards are functions of the state only and the reward of the current
//! state is collected at `t = 0`, so `Q(s, a) = r(s) + γ Σ_{s'} P(s'|s,a) V(s')`.
//! All solves are dense LU factorizations; the state space is capped at
//! [`MAX_STATES`].

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::rng::sample_index;

pub const MAX_STATES: usize = 2000;

const SUM_TOL: f64 = 1e-12;

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidMdp(format!("{name} has a negative or non-finite entry")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidMdp(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Stochastic policy table `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidPolicy(format!("state {s} has a negative probability")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidPolicy(format!("state {s} probabilities sum to {total}")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Dimension("ragged policy rows".into()));
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|s| self.row(s).to_vec()).collect()
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// Action chosen at `s` when the policy is deterministic.
    pub fn action(&self, s: usize) -> Option<usize> {
        self.row(s).iter().position(|&p| p == 1.0)
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng)
    }
}

/// State-based reward `r[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector(Vector);

impl RewardVector {
    pub fn new(values: Vector) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("reward has a non-finite entry".into()));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Vector::zeros(n))
    }

    pub fn into_inner(self) -> Vector {
        self.0
    }
}

impl Deref for RewardVector {
    type Target = Vector;

    fn deref(&self) -> &Vector {
        &self.0
    }
}

/// Normalized discounted state-visitation distribution `d_π`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationMeasure {
    pub dist: Vector,
}

/// Discounted expected visitation `M[s0][a0][s'] = Σ_t γ^t Pr(s_t = s' | s0, a0, π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessorMeasure {
    n_states: usize,
    n_actions: usize,
    table: Vec<f64>,
}

impl SuccessorMeasure {
    pub fn get(&self, s0: usize, a0: usize, s: usize) -> f64 {
        self.table[(s0 * self.n_actions + a0) * self.n_states + s]
    }

    pub fn row(&self, s0: usize, a0: usize) -> &[f64] {
        let start = (s0 * self.n_actions + a0) * self.n_states;
        &self.table[start..start + self.n_states]
    }

    /// `(1−γ) E_{s0∼ρ0, a0∼π} M[s0][a0][·]`, which is the occupation measure.
    pub fn averaged(&self, rho0: &Vector, policy: &Policy, gamma: f64) -> Vector {
        let mut out = Vector::zeros(self.n_states);
        for s0 in 0..self.n_states {
            for a0 in 0..self.n_actions {
                let w = rho0[s0] * policy.prob(s0, a0);
                if w != 0.0 {
                    for (s, m) in self.row(s0, a0).iter().enumerate() {
                        out[s] += w * m;
                    }
                }
            }
        }
        out * (1.0 - gamma)
    }
}

/// One dataset transition `(s_t, a_t, s_{t+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    gamma: f64,
    rho: Vector,
    rho0: Vector,
    behavior: Policy,
}

/// On-disk JSON layout: `transition[s][a][s']`, `behavior_policy[s][a]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    rho: Vec<f64>,
    rho0: Vec<f64>,
    behavior_policy: Vec<Vec<f64>>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        if doc.transition.len() != doc.n_states
            || doc
                .transition
                .iter()
                .any(|rows| rows.len() != doc.n_actions || rows.iter().any(|r| r.len() != doc.n_states))
        {
            return Err(Error::Dimension("transition tensor shape does not match n_states/n_actions".into()));
        }
        let transition: Vec<f64> = doc.transition.into_iter().flatten().flatten().collect();
        let behavior = Policy::from_rows(&doc.behavior_policy)?;
        TabularMdp::new(
            doc.n_states,
            doc.n_actions,
            transition,
            doc.gamma,
            Vector::from_vec(doc.rho),
            Vector::from_vec(doc.rho0),
            behavior,
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let transition =
            (0..mdp.n_states).map(|s| (0..mdp.n_actions).map(|a| mdp.row(s, a).to_vec()).collect()).collect();
        MdpDocument {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            transition,
            gamma: mdp.gamma,
            rho: mdp.rho.iter().cloned().collect(),
            rho0: mdp.rho0.iter().cloned().collect(),
            behavior_policy: mdp.behavior.rows(),
        }
    }
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        gamma: f64,
        rho: Vector,
        rho0: Vector,
        behavior: Policy,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if n_states > MAX_STATES {
            return Err(Error::SizeCap(format!("{n_states} states exceeds the cap of {MAX_STATES}")));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Dimension("transition tensor has the wrong length".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {gamma} is not in (0, 1)")));
        }
        if rho.len() != n_states || rho0.len() != n_states {
            return Err(Error::Dimension("rho/rho0 length differs from n_states".into()));
        }
        if behavior.n_states() != n_states || behavior.n_actions() != n_actions {
            return Err(Error::Dimension("behavior policy shape differs from the MDP".into()));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
                check_distribution(&format!("P(.|{s},{a})"), row)?;
            }
        }
        check_distribution("rho", rho.as_slice())?;
        check_distribution("rho0", rho0.as_slice())?;
        if let Some(s) = rho.iter().position(|&p| p <= 0.0) {
            return Err(Error::InvalidMdp(format!("rho({s}) = 0; the data distribution must be strictly positive")));
        }
        Ok(Self { n_states, n_actions, transition, gamma, rho, rho0, behavior })
    }

    /// MDP with uniform `ρ = ρ0` and a uniform behavior policy.
    pub fn with_uniform_data(n_states: usize, n_actions: usize, transition: Vec<f64>, gamma: f64) -> Result<Self> {
        let u = Vector::from_element(n_states, 1.0 / n_states as f64);
        Self::new(n_states, n_actions, transition, gamma, u.clone(), u, Policy::uniform(n_states, n_actions))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &Vector {
        &self.rho
    }

    pub fn rho0(&self) -> &Vector {
        &self.rho0
    }

    pub fn behavior_policy(&self) -> &Policy {
        &self.behavior
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            gamma,
            self.rho.clone(),
            self.rho0.clone(),
            self.behavior.clone(),
        )
    }

    pub fn with_rho(&self, rho: Vector) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.gamma,
            rho,
            self.rho0.clone(),
            self.behavior.clone(),
        )
    }

    pub fn with_rho0(&self, rho0: Vector) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.gamma,
            self.rho.clone(),
            rho0,
            self.behavior.clone(),
        )
    }

    pub fn with_behavior(&self, behavior: Policy) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.gamma,
            self.rho.clone(),
            self.rho0.clone(),
            behavior,
        )
    }

    /// Replace `ρ` by the invariant distribution of the behavior policy, so
    /// that `s_t` and `s_{t+1}` have the same law in the dataset.
    pub fn with_stationary_rho(&self) -> Result<Self> {
        let mu = self.stationary_distribution(&self.behavior)?;
        self.with_rho(mu)
    }

    fn check_policy(&self, pi: &Policy) -> Result<()> {
        if pi.n_states() != self.n_states || pi.n_actions() != self.n_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.n_states(),
                pi.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    fn check_reward(&self, r: &RewardVector) -> Result<()> {
        if r.len() != self.n_states {
            return Err(Error::Dimension(format!("reward has {} entries, MDP has {} states", r.len(), self.n_states)));
        }
        Ok(())
    }

    /// `P_π[s][s'] = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_transition_matrix(&self, pi: &Policy) -> Result<Mat> {
        self.check_policy(pi)?;
        let n = self.n_states;
        let mut m = Mat::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (next, p) in self.row(s, a).iter().enumerate() {
                    m[(s, next)] += w * p;
                }
            }
        }
        Ok(m)
    }

    fn resolvent_system(&self, pi: &Policy) -> Result<Mat> {
        let p = self.state_transition_matrix(pi)?;
        Ok(Mat::identity(self.n_states, self.n_states) - p * self.gamma)
    }

    /// `Q(s,a) = r(s) + γ Σ_{s'} P(s'|s,a) V(s')`.
    pub fn q_from_values(&self, r: &RewardVector, v: &Vector) -> Mat {
        Mat::from_fn(self.n_states, self.n_actions, |s, a| {
            let future: f64 = self.row(s, a).iter().zip(v.iter()).map(|(p, x)| p * x).sum();
            r[s] + self.gamma * future
        })
    }

    /// Exact `V^π` and `Q^π` from `(I − γP_π) V = r`.
    pub fn policy_value(&self, r: &RewardVector, pi: &Policy) -> Result<(Vector, Mat)> {
        self.check_reward(r)?;
        let system = self.resolvent_system(pi)?;
        let v = linalg::solve(&system, r, "policy evaluation (I - gamma P_pi)")?;
        let q = self.q_from_values(r, &v);
        Ok((v, q))
    }

    /// `E_{s0∼ρ0} V^π_r(s0)`.
    pub fn expected_return(&self, r: &RewardVector, pi: &Policy) -> Result<f64> {
        let (v, _) = self.policy_value(r, pi)?;
        Ok(self.rho0.dot(&v))
    }

    /// Plain value iteration on `Q`, stopping when the sup-norm change drops
    /// below `tol` or after `max_iter` sweeps.
    pub fn value_iteration(&self, r: &RewardVector, tol: f64, max_iter: usize) -> Result<Mat> {
        self.check_reward(r)?;
        let mut v = Vector::zeros(self.n_states);
        let mut q = self.q_from_values(r, &v);
        for _ in 0..max_iter {
            let next_v = Vector::from_fn(self.n_states, |s, _| row_max(&q, s));
            let residual = linalg::vec_sup_norm(&(&next_v - &v));
            v = next_v;
            q = self.q_from_values(r, &v);
            if residual < tol {
                return Ok(q);
            }
        }
        let residual = linalg::vec_sup_norm(&(Vector::from_fn(self.n_states, |s, _| row_max(&q, s)) - &v));
        Err(Error::NotConverged { iterations: max_iter, residual })
    }

    /// Optimal deterministic policy and `Q*` for state reward `r`.
    ///
    /// Howard policy iteration with exact evaluation. Near-ties (within
    /// `1e-11·(1 + |Q|∞)`) go to the lowest action index, which makes every
    /// downstream quantity deterministic.
    pub fn optimal_policy(&self, r: &RewardVector) -> Result<(Policy, Mat)> {
        self.check_reward(r)?;
        const MAX_ROUNDS: usize = 10_000;
        let q0 = self.q_from_values(r, r);
        let mut actions = greedy_lowest(&q0);
        for _ in 0..MAX_ROUNDS {
            let pi = Policy::deterministic(&actions, self.n_actions)?;
            let (v, q) = self.policy_value(r, &pi)?;
            let next = greedy_lowest(&q);
            if next == actions {
                let residual = (0..self.n_states).map(|s| (row_max(&q, s) - v[s]).abs()).fold(0.0_f64, f64::max);
                let scale = 1.0 + linalg::vec_sup_norm(&v);
                if residual > 1e-10 * scale {
                    return Err(Error::NotConverged { iterations: MAX_ROUNDS, residual });
                }
                return Ok((pi, q));
            }
            actions = next;
        }
        Err(Error::NotConverged { iterations: MAX_ROUNDS, residual: f64::NAN })
    }

    /// `d_π = (1−γ) ρ0ᵀ (I − γP_π)⁻¹`.
    pub fn occupation_measure(&self, pi: &Policy) -> Result<OccupationMeasure> {
        let system = self.resolvent_system(pi)?.transpose();
        let x = linalg::solve(&system, &self.rho0, "occupation measure (I - gamma P_pi)^T")?;
        Ok(OccupationMeasure { dist: x * (1.0 - self.gamma) })
    }

    /// `M[s0][a0][·] = e_{s0} + γ P(·|s0,a0)ᵀ (I − γP_π)⁻¹`.
    pub fn successor_measure(&self, pi: &Policy) -> Result<SuccessorMeasure> {
        let n = self.n_states;
        let resolvent = linalg::inverse(&self.resolvent_system(pi)?, "successor measure resolvent")?;
        let mut table = vec![0.0; n * self.n_actions * n];
        for s0 in 0..n {
            for a0 in 0..self.n_actions {
                let start = (s0 * self.n_actions + a0) * n;
                let out = &mut table[start..start + n];
                out[s0] += 1.0;
                for (k, p) in self.row(s0, a0).iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    for (s, o) in out.iter_mut().enumerate() {
                        *o += self.gamma * p * resolvent[(k, s)];
                    }
                }
            }
        }
        Ok(SuccessorMeasure { n_states: n, n_actions: self.n_actions, table })
    }

    /// Invariant distribution `μᵀP_π = μᵀ` by power iteration from `δ_0`.
    pub fn stationary_distribution(&self, pi: &Policy) -> Result<Vector> {
        const MAX_ITER: usize = 200_000;
        let pt = self.state_transition_matrix(pi)?.transpose();
        let mut mu = Vector::zeros(self.n_states);
        mu[0] = 1.0;
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_ITER {
            let mut next = &pt * &mu;
            let total = next.sum();
            next /= total;
            residual = linalg::vec_sup_norm(&(&next - &mu));
            mu = next;
            if residual < 1e-13 {
                return Ok(mu);
            }
        }
        Err(Error::StationaryNotConverged { iterations: MAX_ITER, residual })
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(self.rho.as_slice(), rng)
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(self.rho0.as_slice(), rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_index(self.row(s, a), rng)
    }

    /// `s ∼ ρ`, `a ∼ behavior(·|s)`, `s' ∼ P(·|s,a)`.
    pub fn sample_transition<R: Rng + ?Sized>(&self, rng: &mut R) -> Transition {
        let state = self.sample_state(rng);
        let action = self.behavior.sample_action(state, rng);
        let next = self.sample_next(state, action, rng);
        Transition { state, action, next }
    }

    /// Probability of the state pair `(s, s')` under the dataset distribution.
    pub fn pair_probability(&self, s: usize, next: usize) -> f64 {
        (0..self.n_actions).map(|a| self.rho[s] * self.behavior.prob(s, a) * self.p(s, a, next)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn row_max(q: &Mat, s: usize) -> f64 {
    q.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn greedy_lowest(q: &Mat) -> Vec<usize> {
    let scale = 1.0 + linalg::sup_norm(q);
    let tol = 1e-11 * scale;
    (0..q.nrows())
        .map(|s| {
            let best = row_max(q, s);
            (0..q.ncols()).find(|&a| q[(s, a)] >= best - tol).unwrap_or(0)
        })
        .collect()
}

/// All `n_actions^n_states` deterministic policies, in lexicographic order.
pub fn enumerate_deterministic_policies(n_states: usize, n_actions: usize) -> Result<Vec<Policy>> {
    let total = (n_actions as u64).checked_pow(n_states as u32).filter(|&t| t <= 1 << 20);
    let Some(total) = total else {
        return Err(Error::SizeCap(format!("{n_actions}^{n_states} deterministic policies is too many to enumerate")));
    };
    let mut out = Vec::with_capacity(total as usize);
    let mut actions = vec![0usize; n_states];
    for _ in 0..total {
        out.push(Policy::deterministic(&actions, n_actions)?);
        for digit in actions.iter_mut().rev() {
            *digit += 1;
            if *digit < n_actions {
                break;
            }
            *digit = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn single_state(gamma: f64) -> TabularMdp {
        TabularMdp::with_uniform_data(1, 1, vec![1.0], gamma).unwrap()
    }

    fn cycle2(gamma: f64) -> TabularMdp {
        TabularMdp::with_uniform_data(2, 1, vec![0.0, 1.0, 1.0, 0.0], gamma)
            .unwrap()
            .with_rho0(Vector::from_vec(vec![1.0, 0.0]))
            .unwrap()
    }

    #[test]
    fn single_state_kernel_is_identity() {
        let mdp = single_state(0.9);
        let p = mdp.state_transition_matrix(&Policy::uniform(1, 1)).unwrap();
        assert_eq!(p, Mat::from_element(1, 1, 1.0));
    }

    #[test]
    fn swap_kernel_is_forced() {
        let mdp = TabularMdp::with_uniform_data(2, 2, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0], 0.5).unwrap();
        let pi = Policy::from_rows(&[vec![0.3, 0.7], vec![1.0, 0.0]]).unwrap();
        let p = mdp.state_transition_matrix(&pi).unwrap();
        assert_eq!(p, Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn zero_reward_has_zero_value() {
        let mdp = cycle2(0.5);
        let (v, q) = mdp.policy_value(&RewardVector::zeros(2), &Policy::uniform(2, 1)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn geometric_series_values() {
        let mdp = single_state(0.8);
        let (v, _) = mdp.policy_value(&RewardVector::from_slice(&[1.0]).unwrap(), &Policy::uniform(1, 1)).unwrap();
        assert!((v[0] - 5.0).abs() < 1e-12);

        let mdp = cycle2(0.5);
        let (v, _) = mdp.policy_value(&RewardVector::from_slice(&[1.0, 0.0]).unwrap(), &Policy::uniform(2, 1)).unwrap();
        assert!((v[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn occupation_and_successor_of_trivial_chains() {
        let mdp = single_state(0.7);
        let pi = Policy::uniform(1, 1);
        assert!((mdp.occupation_measure(&pi).unwrap().dist[0] - 1.0).abs() < 1e-14);
        let m = mdp.successor_measure(&pi).unwrap();
        assert!((m.get(0, 0, 0) - 1.0 / 0.3).abs() < 1e-12);

        let d = cycle2(0.5).occupation_measure(&Policy::uniform(2, 1)).unwrap().dist;
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12 && (d[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_rewards_pick_lowest_action() {
        let mdp = TabularMdp::with_uniform_data(
            2,
            3,
            [0.2, 0.8, 0.5, 0.5, 0.9, 0.1, 0.3, 0.7, 0.6, 0.4, 1.0, 0.0].to_vec(),
            0.9,
        )
        .unwrap();
        let (pi, _) = mdp.optimal_policy(&RewardVector::from_slice(&[2.0, 2.0]).unwrap()).unwrap();
        assert_eq!(pi.action(0), Some(0));
        assert_eq!(pi.action(1), Some(0));
    }

    #[test]
    fn stationary_of_birth_death_chain() {
        let (p, q) = (0.3, 0.1);
        let mdp = TabularMdp::with_uniform_data(2, 1, vec![1.0 - p, p, q, 1.0 - q], 0.9).unwrap();
        let mu = mdp.stationary_distribution(&Policy::uniform(2, 1)).unwrap();
        assert!((mu[0] - q / (p + q)).abs() < 1e-10);
        assert!((mu[1] - p / (p + q)).abs() < 1e-10);
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let mdp = cycle2(0.5);
        let err = mdp.stationary_distribution(&Policy::uniform(2, 1)).unwrap_err();
        assert!(matches!(err, Error::StationaryNotConverged { .. }));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(TabularMdp::with_uniform_data(1, 1, vec![1.0], 1.0).is_err());
        assert!(TabularMdp::with_uniform_data(1, 1, vec![0.9], 0.5).is_err());
        let mdp = single_state(0.5);
        assert!(mdp.with_rho(Vector::from_vec(vec![0.5])).is_err());
        assert!(matches!(mdp.state_transition_matrix(&Policy::uniform(2, 1)), Err(Error::Dimension(_))));
        assert!(Policy::from_rows(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = seeded(3);
        let mdp = crate::generators::random_mdp(4, 3, 0.3, 0.9, &mut rng).unwrap();
        let text = mdp.to_json().unwrap();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(back, mdp);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let mdp = single_state(0.5);
        let mut value: serde_json::Value = serde_json::from_str(&mdp.to_json().unwrap()).unwrap();
        value["extra"] = serde_json::json!(1);
        assert!(TabularMdp::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn enumeration_counts() {
        let all = enumerate_deterministic_policies(3, 2).unwrap();
        assert_eq!(all.len(), 8);
        assert_eq!(all[5].action(0), Some(1));
        assert!(enumerate_deterministic_policies(40, 3).is_err());
    }

    #[test]
    fn occupation_matches_rollouts() {
        use crate::stats::mean_and_stderr;
        let mut rng = seeded(30);
        let mdp = crate::generators::random_mdp(4, 2, 0.0, 0.8, &mut rng).unwrap();
        let pi = crate::generators::random_policy(4, 2, &mut rng);
        let d = mdp.occupation_measure(&pi).unwrap().dist;
        let horizon = (50.0 / (1.0 - mdp.gamma())) as usize;
        let mut visits: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(20_000)).collect();
        for _ in 0..20_000 {
            let mut counts = [0.0; 4];
            let (mut s, mut discount) = (mdp.sample_initial_state(&mut rng), 1.0 - mdp.gamma());
            for _ in 0..horizon {
                counts[s] += discount;
                discount *= mdp.gamma();
                s = mdp.sample_next(s, pi.sample_action(s, &mut rng), &mut rng);
            }
            for (v, c) in visits.iter_mut().zip(counts) {
                v.push(c);
            }
        }
        for (s, v) in visits.iter().enumerate() {
            let (mean, se) = mean_and_stderr(v);
            assert!((mean - d[s]).abs() < 3.0 * se, "state {s}: {mean} ± {se} vs {}", d[s]);
        }
    }

    #[test]
    fn doubly_stochastic_chain_has_uniform_stationary_law() {
        let row = [0.5, 0.3, 0.2];
        let transition: Vec<f64> = (0..3).flat_map(|s| (0..3).map(move |t| row[(t + 3 - s) % 3])).collect();
        let mdp = TabularMdp::with_uniform_data(3, 1, transition, 0.9).unwrap();
        let mu = mdp.stationary_distribution(&Policy::uniform(3, 1)).unwrap();
        assert!(mu.iter().all(|m| (m - 1.0 / 3.0).abs() < 1e-10), "{mu}");
    }

    #[test]
    fn stationary_law_is_a_fixed_point_on_random_instances() {
        for seed in 0..10 {
            let mut rng = seeded(40 + seed);
            let mdp = crate::generators::random_mdp(6, 3, 0.0, 0.9, &mut rng).unwrap();
            let pi = crate::generators::random_policy(6, 3, &mut rng);
            let mu = mdp.stationary_distribution(&pi).unwrap();
            let p = mdp.state_transition_matrix(&pi).unwrap();
            let moved = p.transpose() * &mu;
            assert!(linalg::vec_sup_norm(&(moved - &mu)) < 1e-10, "seed {seed}");
        }
    }
}
