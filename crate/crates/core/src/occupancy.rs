//! Occupation densities `d(s, z) = d_{π_z}(s) / ρ(s)`.
//!
//! The exact backend solves a linear system per policy. The TD backend keeps
//! successor-density tables `m(s0, a0, s', z_j)` and densities `d(s', z_j)`
//! over a finite codebook and trains them by temporal differences on
//! dataset transitions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::loss::nearest_code;
use crate::mdp::{Policy, TabularMdp};

/// `d_π / ρ`, normalized so that `Σ_s d(s) ρ(s) = 1`.
pub fn density_exact(mdp: &TabularMdp, policy: &Policy) -> Result<Vector> {
    let occ = mdp.occupation_measure(policy)?.dist;
    let rho = mdp.rho();
    if let Some(s) = rho.iter().position(|&p| p <= 0.0) {
        return Err(Error::InvalidMdp(format!("density needs rho > 0 (rho({s}) = 0)")));
    }
    Ok(occ.component_div(rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdConfig {
    #[serde(default = "TdConfig::default_lr")]
    pub lr: f64,
    /// Steps over which the successor learning rate halves: `lr / (1 + t / lr_decay)`.
    #[serde(default = "TdConfig::default_decay")]
    pub lr_decay: f64,
    /// Target tables follow `m̄ ← τ m̄ + (1 − τ) m` every step.
    #[serde(default = "TdConfig::default_ema")]
    pub target_ema: f64,
    #[serde(default = "TdConfig::default_codebook")]
    pub codebook_size: usize,
}

impl TdConfig {
    fn default_lr() -> f64 {
        0.1
    }
    fn default_decay() -> f64 {
        1e4
    }
    fn default_ema() -> f64 {
        0.99
    }
    fn default_codebook() -> usize {
        32
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr / (1.0 + step as f64 / self.lr_decay)
    }
}

impl Default for TdConfig {
    fn default() -> Self {
        Self {
            lr: Self::default_lr(),
            lr_decay: Self::default_decay(),
            target_ema: Self::default_ema(),
            codebook_size: Self::default_codebook(),
        }
    }
}

/// Tabular TD occupancy model over a codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdModel {
    n_states: usize,
    n_actions: usize,
    pub codes: Vec<Vector>,
    #[serde(skip)]
    policies: Vec<Policy>,
    /// `m[j][s0][a0][s']`, flattened.
    m: Vec<f64>,
    m_bar: Vec<f64>,
    /// `dvals[j][s']`, flattened.
    dvals: Vec<f64>,
    /// Occupation steps since the policy of code `j` last changed.
    averaged: Vec<u64>,
    pub step: u64,
    pub config: TdConfig,
}

impl TdModel {
    pub fn new(mdp: &TabularMdp, codes: Vec<Vector>, policies: Vec<Policy>, config: TdConfig) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::InvalidArgument("TD occupancy model needs a non-empty codebook".into()));
        }
        if codes.len() != policies.len() {
            return Err(Error::Dimension("one policy per code".into()));
        }
        let (n, a) = (mdp.n_states(), mdp.n_actions());
        let size = codes.len() * n * a * n;
        Ok(Self {
            n_states: n,
            n_actions: a,
            dvals: vec![0.0; codes.len() * n],
            averaged: vec![0; codes.len()],
            codes,
            policies,
            m: vec![0.0; size],
            m_bar: vec![0.0; size],
            step: 0,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn m_index(&self, j: usize, s0: usize, a0: usize, s: usize) -> usize {
        ((j * self.n_states + s0) * self.n_actions + a0) * self.n_states + s
    }

    pub fn m(&self, j: usize, s0: usize, a0: usize, s: usize) -> f64 {
        self.m[self.m_index(j, s0, a0, s)]
    }

    pub fn density_row(&self, j: usize) -> Vector {
        Vector::from_column_slice(&self.dvals[j * self.n_states..(j + 1) * self.n_states])
    }

    pub fn policy(&self, j: usize) -> &Policy {
        &self.policies[j]
    }

    /// Replace the codebook and its policies, keeping the tables. Used when
    /// the codes move with the features during training.
    pub fn set_codes(&mut self, codes: Vec<Vector>, policies: Vec<Policy>) -> Result<()> {
        if codes.len() != self.codes.len() || policies.len() != codes.len() {
            return Err(Error::Dimension("codebook size is fixed at creation".into()));
        }
        for (j, policy) in policies.iter().enumerate() {
            if *policy != self.policies[j] {
                self.averaged[j] = 0;
            }
        }
        self.codes = codes;
        self.policies = policies;
        Ok(())
    }

    /// Overwrite all tables with the exact successor densities
    /// `m = M / ρ` and occupation densities of the current policies.
    pub fn initialize_exact(&mut self, mdp: &TabularMdp) -> Result<()> {
        let rho = mdp.rho().clone();
        for j in 0..self.codes.len() {
            let sm = mdp.successor_measure(&self.policies[j])?;
            for s0 in 0..self.n_states {
                for a0 in 0..self.n_actions {
                    for s in 0..self.n_states {
                        let idx = self.m_index(j, s0, a0, s);
                        self.m[idx] = sm.get(s0, a0, s) / rho[s];
                    }
                }
            }
            let d = density_exact(mdp, &self.policies[j])?;
            self.dvals[j * self.n_states..(j + 1) * self.n_states].copy_from_slice(d.as_slice());
        }
        self.m_bar.clone_from(&self.m);
        Ok(())
    }

    /// One step on the successor loss
    /// `(m(s_t,a_t,s',z) − γ m̄(s_{t+1},a_{t+1},s',z))² − 2 m(s_t,a_t,s_t,z)`
    /// for every code, with `s'` integrated out exactly against `ρ`. The
    /// per-entry gradient is preconditioned by `1/ρ(s')`, giving the update
    /// `m += α (1_{s'=s_t}/ρ(s') + γ m̄(s_{t+1}, a_{t+1}, s') − m)`.
    /// Returns the mean absolute update.
    pub fn successor_step<R: Rng + ?Sized>(&mut self, mdp: &TabularMdp, rng: &mut R) -> f64 {
        let lr = self.config.learning_rate(self.step);
        let gamma = mdp.gamma();
        let n = self.n_states;
        let mut moved = 0.0;
        for j in 0..self.codes.len() {
            let t = mdp.sample_transition(rng);
            let a_next = self.policies[j].sample_action(t.next, rng);
            let inv_rho = 1.0 / mdp.rho()[t.state];
            let row = self.m_index(j, t.state, t.action, 0);
            let target_row = self.m_index(j, t.next, a_next, 0);
            for s in 0..n {
                let indicator = if s == t.state { inv_rho } else { 0.0 };
                let delta = indicator + gamma * self.m_bar[target_row + s] - self.m[row + s];
                self.m[row + s] += lr * delta;
                moved += (lr * delta).abs();
            }
        }
        let tau = self.config.target_ema;
        for (bar, m) in self.m_bar.iter_mut().zip(&self.m) {
            *bar = tau * *bar + (1.0 - tau) * m;
        }
        moved / (self.codes.len() * n) as f64
    }

    /// Regression of `d(·, z_j)` toward `(1−γ) E_{s0∼ρ0, a0∼π_j} m(s0, a0, ·, z_j)`.
    ///
    /// The step size is `2 / (n + 2)`, where `n` counts steps since the
    /// policy of `z_j` last changed, so `d` is the average of the targets seen
    /// under the current policy weighted linearly in time. This averages out
    /// the sampling noise left in `m` without letting early, unconverged
    /// tables dominate.
    pub fn occupation_step(&mut self, mdp: &TabularMdp) {
        let gamma = mdp.gamma();
        let n = self.n_states;
        for j in 0..self.codes.len() {
            let mut target = vec![0.0; n];
            for s0 in 0..n {
                let w0 = mdp.rho0()[s0];
                if w0 == 0.0 {
                    continue;
                }
                for a0 in 0..self.n_actions {
                    let w = w0 * self.policies[j].prob(s0, a0);
                    if w == 0.0 {
                        continue;
                    }
                    let row = self.m_index(j, s0, a0, 0);
                    for (s, t) in target.iter_mut().enumerate() {
                        *t += w * self.m[row + s];
                    }
                }
            }
            let lr = 2.0 / (self.averaged[j] as f64 + 2.0);
            self.averaged[j] += 1;
            for (s, t) in target.into_iter().enumerate() {
                let d = &mut self.dvals[j * n + s];
                *d += lr * ((1.0 - gamma) * t - *d);
            }
        }
    }

    /// Both TD losses, then advance the schedule.
    pub fn step<R: Rng + ?Sized>(&mut self, mdp: &TabularMdp, rng: &mut R) -> f64 {
        let moved = self.successor_step(mdp, rng);
        self.occupation_step(mdp);
        self.step += 1;
        moved
    }

    pub fn train<R: Rng + ?Sized>(&mut self, mdp: &TabularMdp, steps: usize, rng: &mut R) {
        for _ in 0..steps {
            self.step(mdp, rng);
        }
    }

    /// Largest deviation of the learned densities from the exact ones over
    /// the whole codebook.
    pub fn sup_error(&self, mdp: &TabularMdp) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for j in 0..self.codes.len() {
            let exact = density_exact(mdp, &self.policies[j])?;
            worst = worst.max((self.density_row(j) - exact).amax());
        }
        Ok(worst)
    }

    /// Largest deviation of the successor tables from `M / ρ`.
    pub fn successor_sup_error(&self, mdp: &TabularMdp) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for j in 0..self.codes.len() {
            let sm = mdp.successor_measure(&self.policies[j])?;
            for s0 in 0..self.n_states {
                for a0 in 0..self.n_actions {
                    for s in 0..self.n_states {
                        let err = (self.m(j, s0, a0, s) - sm.get(s0, a0, s) / mdp.rho()[s]).abs();
                        worst = worst.max(err);
                    }
                }
            }
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone)]
pub enum OccupationModel {
    Exact,
    Td(TdModel),
}

impl OccupationModel {
    /// `d(·, z)`. The exact backend uses `policy`; the TD backend dispatches
    /// to the nearest codebook entry and ignores it.
    pub fn density(&self, mdp: &TabularMdp, policy: &Policy, z: &Vector) -> Result<Vector> {
        match self {
            OccupationModel::Exact => density_exact(mdp, policy),
            OccupationModel::Td(t) => Ok(t.density_row(nearest_code(&t.codes, z))),
        }
    }
}
