//! Environment generators: bandit, ring chain, gridworld and random MDPs.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::mdp::{Policy, TabularMdp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// `n` states and `n` actions; action `a` jumps to state `a` from anywhere.
    Bandit {
        n: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        data: DataSpec,
    },
    /// Ring of `n` states with left/right moves.
    Chain {
        n: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        data: DataSpec,
    },
    Gridworld {
        width: usize,
        height: usize,
        #[serde(default)]
        slip: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        data: DataSpec,
    },
    RandomMdp {
        n_states: usize,
        n_actions: usize,
        #[serde(default)]
        sparsity: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        data: DataSpec,
    },
}

fn default_gamma() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default)]
    pub rho: RhoChoice,
    #[serde(default)]
    pub rho0: Rho0Choice,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoChoice {
    #[default]
    Uniform,
    /// Invariant distribution of the (uniform) behavior policy.
    Stationary,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rho0Choice {
    /// `ρ0 := ρ`.
    #[default]
    Rho,
    Uniform,
    State(usize),
    Explicit(Vec<f64>),
}

impl GeneratorSpec {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TabularMdp> {
        let (mdp, data) = match self {
            GeneratorSpec::Bandit { n, gamma, data } => (bandit(*n, *gamma)?, data),
            GeneratorSpec::Chain { n, gamma, data } => (chain(*n, *gamma)?, data),
            GeneratorSpec::Gridworld { width, height, slip, gamma, data } => {
                (gridworld(*width, *height, *slip, *gamma)?, data)
            }
            GeneratorSpec::RandomMdp { n_states, n_actions, sparsity, gamma, data } => {
                (random_mdp(*n_states, *n_actions, *sparsity, *gamma, rng)?, data)
            }
        };
        data.apply(mdp)
    }
}

impl DataSpec {
    pub fn apply(&self, mdp: TabularMdp) -> Result<TabularMdp> {
        let n = mdp.n_states();
        let mdp = match &self.rho {
            RhoChoice::Uniform => mdp,
            RhoChoice::Stationary => mdp.with_stationary_rho()?,
            RhoChoice::Explicit(v) => mdp.with_rho(Vector::from_vec(v.clone()))?,
        };
        let rho0 = match &self.rho0 {
            Rho0Choice::Rho => mdp.rho().clone(),
            Rho0Choice::Uniform => Vector::from_element(n, 1.0 / n as f64),
            Rho0Choice::State(s) => {
                if *s >= n {
                    return Err(Error::InvalidArgument(format!("initial state {s} out of range")));
                }
                let mut v = Vector::zeros(n);
                v[*s] = 1.0;
                v
            }
            Rho0Choice::Explicit(v) => Vector::from_vec(v.clone()),
        };
        mdp.with_rho0(rho0)
    }
}

pub fn bandit(n: usize, gamma: f64) -> Result<TabularMdp> {
    if n == 0 {
        return Err(Error::InvalidArgument("bandit needs at least one state".into()));
    }
    let mut t = vec![0.0; n * n * n];
    for s in 0..n {
        for a in 0..n {
            t[(s * n + a) * n + a] = 1.0;
        }
    }
    TabularMdp::with_uniform_data(n, n, t, gamma)
}

/// Ring chain: action 0 moves left, action 1 moves right, with wrap-around.
/// `chain(2)` is the deterministic two-state swap.
pub fn chain(n: usize, gamma: f64) -> Result<TabularMdp> {
    if n == 0 {
        return Err(Error::InvalidArgument("chain needs at least one state".into()));
    }
    let mut t = vec![0.0; n * 2 * n];
    for s in 0..n {
        let left = (s + n - 1) % n;
        let right = (s + 1) % n;
        t[(s * 2) * n + left] += 1.0;
        t[(s * 2 + 1) * n + right] += 1.0;
    }
    TabularMdp::with_uniform_data(n, 2, t, gamma)
}

/// 4-neighbour gridworld (up, down, left, right). With probability `slip`
/// the move direction is replaced by a uniformly random one; moves into the
/// border leave the agent in place.
pub fn gridworld(width: usize, height: usize, slip: f64, gamma: f64) -> Result<TabularMdp> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("gridworld needs positive width and height".into()));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(Error::InvalidArgument(format!("slip {slip} is not a probability")));
    }
    let n = width * height;
    let moves: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];
    let target = |s: usize, dir: usize| -> usize {
        let (x, y) = ((s % width) as i64, (s / width) as i64);
        let (nx, ny) = (x + moves[dir].0, y + moves[dir].1);
        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
            s
        } else {
            ny as usize * width + nx as usize
        }
    };
    let mut t = vec![0.0; n * 4 * n];
    for s in 0..n {
        for a in 0..4 {
            let row = &mut t[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            row[target(s, a)] += 1.0 - slip;
            for dir in 0..4 {
                row[target(s, dir)] += slip / 4.0;
            }
        }
    }
    TabularMdp::with_uniform_data(n, 4, t, gamma)
}

/// Dirichlet(1)-random transition rows. Each row is supported on
/// `max(1, round((1 − sparsity)·n))` random states.
pub fn random_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    sparsity: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidArgument("random MDP needs positive sizes".into()));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity {sparsity} must be in [0, 1)")));
    }
    let support = (((1.0 - sparsity) * n_states as f64).round() as usize).clamp(1, n_states);
    let mut t = vec![0.0; n_states * n_actions * n_states];
    for sa in 0..n_states * n_actions {
        let row = &mut t[sa * n_states..(sa + 1) * n_states];
        let idx = sample(rng, n_states, support);
        let mut total = 0.0;
        for i in idx.iter() {
            let w: f64 = Exp1.sample(rng);
            let w = w.max(1e-12);
            row[i] = w;
            total += w;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    TabularMdp::with_uniform_data(n_states, n_actions, t, gamma)
}

/// Random stochastic policy with Dirichlet(1) rows.
pub fn random_policy<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Policy {
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let row: Vec<f64> = (0..n_actions).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|x| x / total));
    }
    Policy::new(n_states, n_actions, probs).expect("normalized rows")
}
