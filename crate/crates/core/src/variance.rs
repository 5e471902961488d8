//! Variance-penalized zero-shot loss.
//!
//! Under white noise the conditional law of `r` given its code `z` is
//! `φz + Π⊥ξ`, which splits the return variance into a between-code part and
//! the spatial variance `‖Π⊥ d(·,z)‖²_ρ / (1−γ)²` of the projected density.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{FeatureSet, LinearEncoder};
use crate::error::{Error, Result};
use crate::linalg::{self, Vector};
use crate::loss::{direct_values, LossEstimate, PolicyFamily};
use crate::mdp::{RewardVector, TabularMdp};
use crate::occupancy::density_exact;
use crate::priors::Prior;
use crate::rng::stream;
use crate::stats::{mean_and_stderr, sample_variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariancePenaltyConfig {
    pub lambda: f64,
    /// Penalize `‖Π⊥d‖²` instead of the cruder bound `‖d‖²`.
    #[serde(default = "yes")]
    pub projected: bool,
}

fn yes() -> bool {
    true
}

impl VariancePenaltyConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let config = Self { lambda, projected: true };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("penalty weight must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedLoss {
    pub estimate: LossEstimate,
    pub lambda: f64,
    pub mean_loss: f64,
    /// Unbiased sample variance of the per-reward expected return.
    pub variance: f64,
}

/// `−E[V] + λ Var(V)` over rewards from `prior`, with the same per-sample
/// streams as [`crate::loss::loss_direct`]. The standard error comes from
/// the influence function `x + λ(x − x̄)²`.
pub fn variance_penalized_loss(
    mdp: &TabularMdp,
    prior: &Prior,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    config: &VariancePenaltyConfig,
    n_samples: usize,
    seed: u64,
) -> Result<PenalizedLoss> {
    config.validate()?;
    if n_samples < 2 {
        return Err(Error::InvalidArgument("the variance penalty needs at least two samples".into()));
    }
    let xs = direct_values(mdp, prior, encoder, family, n_samples, seed)?;
    let base = LossEstimate::from_samples(&xs);
    let variance = sample_variance(&xs);
    let estimate = if config.lambda == 0.0 {
        base
    } else {
        let influence: Vec<f64> = xs.iter().map(|x| x + config.lambda * (x - base.value).powi(2)).collect();
        let (_, se) = mean_and_stderr(&influence);
        LossEstimate { value: base.value + config.lambda * variance, standard_error: se, n_samples }
    };
    Ok(PenalizedLoss { estimate, lambda: config.lambda, mean_loss: base.value, variance })
}

/// `‖Π⊥d‖²_ρ`, with `Π` the `L²(ρ)`-orthogonal projection onto `span(φ)`.
pub fn projected_occupation_variance(density: &Vector, phi: &FeatureSet, rho: &Vector) -> f64 {
    let residual = orthogonal_residual(density, phi, rho);
    residual.component_mul(&residual).dot(rho)
}

fn orthogonal_residual(v: &Vector, phi: &FeatureSet, rho: &Vector) -> Vector {
    let p = phi.matrix();
    let weighted = p.transpose() * linalg::diag(rho);
    let c = &weighted * p;
    match linalg::solve(&c, &(&weighted * v), "feature covariance") {
        Ok(coef) => v - p * coef,
        Err(_) => Vector::from_element(v.len(), f64::NAN),
    }
}

fn require_white_noise(encoder: &LinearEncoder) -> Result<()> {
    if !encoder.k.is_white_noise() {
        return Err(Error::Unsupported("the conditional decomposition holds for the white-noise prior only".into()));
    }
    Ok(())
}

/// Monte-Carlo `E[(E_{ρ0} V_r^{π_z})² | z]` with `r = φz + Π⊥ξ`, `ξ` white
/// noise.
pub fn conditional_second_moment(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    z: &Vector,
    n_r: usize,
    seed: u64,
) -> Result<LossEstimate> {
    require_white_noise(encoder)?;
    let mean_reward = encoder.posterior_mean(z);
    let pi = family.policy(mdp, z, Some(&mean_reward))?;
    let occ = mdp.occupation_measure(&pi)?.dist;
    let scale = 1.0 / (1.0 - mdp.gamma());
    let values: Vec<f64> = (0..n_r.max(1) as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let xi = encoder.k.sample_gaussian_reward(&mut rng);
            let r = &*mean_reward + orthogonal_residual(&xi, &encoder.phi, mdp.rho());
            (occ.dot(&r) * scale).powi(2)
        })
        .collect();
    Ok(LossEstimate::from_samples(&values))
}

/// Closed form `(⟨d, φz⟩²_ρ + ‖Π⊥d‖²_ρ) / (1−γ)²`.
pub fn conditional_second_moment_exact(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    z: &Vector,
) -> Result<f64> {
    require_white_noise(encoder)?;
    let mean_reward = encoder.posterior_mean(z);
    let pi = family.policy(mdp, z, Some(&mean_reward))?;
    let d = density_exact(mdp, &pi)?;
    let mean = d.component_mul(&mean_reward).dot(mdp.rho());
    let spatial = projected_occupation_variance(&d, &encoder.phi, mdp.rho());
    Ok((mean * mean + spatial) / (1.0 - mdp.gamma()).powi(2))
}

/// Spatial penalty `E_z ‖Π⊥d(·,z)‖²_ρ / (1−γ)²`, or `E_z ‖d‖²_ρ / (1−γ)²`
/// when the projection is switched off.
pub fn spatial_penalty(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    config: &VariancePenaltyConfig,
    n_z: usize,
    seed: u64,
) -> Result<LossEstimate> {
    let parts = decomposition_samples(mdp, encoder, family, n_z, seed)?;
    let values: Vec<f64> = parts.iter().map(|p| if config.projected { p.spatial } else { p.raw }).collect();
    Ok(LossEstimate::from_samples(&values))
}

#[derive(Debug, Clone, Copy)]
struct CodeParts {
    mean: f64,
    spatial: f64,
    raw: f64,
}

fn decomposition_samples(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    n_z: usize,
    seed: u64,
) -> Result<Vec<CodeParts>> {
    let scale = 1.0 / (1.0 - mdp.gamma());
    (0..n_z.max(2) as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let z = encoder.sample_task(&mut rng);
            let r = encoder.posterior_mean(&z);
            let pi = family.policy(mdp, &z, Some(&r))?;
            let d = density_exact(mdp, &pi)?;
            let rho = mdp.rho();
            Ok(CodeParts {
                mean: d.component_mul(&r).dot(rho) * scale,
                spatial: projected_occupation_variance(&d, &encoder.phi, rho) * scale * scale,
                raw: d.component_mul(&d).dot(rho) * scale * scale,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    /// Sample variance of `⟨d(·,z), φz⟩_ρ / (1−γ)` across codes.
    pub between: f64,
    /// Mean of `‖Π⊥d(·,z)‖²_ρ / (1−γ)²`.
    pub within: LossEstimate,
    pub total: f64,
    /// Standard error of `total` from the delta method.
    pub standard_error: f64,
}

/// Return variance predicted from codes alone, `Var_z(mean) + E_z(spatial)`.
pub fn variance_decomposition(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    n_z: usize,
    seed: u64,
) -> Result<VarianceDecomposition> {
    require_white_noise(encoder)?;
    let parts = decomposition_samples(mdp, encoder, family, n_z, seed)?;
    let means: Vec<f64> = parts.iter().map(|p| p.mean).collect();
    let spatial: Vec<f64> = parts.iter().map(|p| p.spatial).collect();
    let between = sample_variance(&means);
    let within = LossEstimate::from_samples(&spatial);
    let (m, _) = mean_and_stderr(&means);
    let influence: Vec<f64> = means.iter().zip(&spatial).map(|(a, b)| (a - m).powi(2) + b).collect();
    let (_, se) = mean_and_stderr(&influence);
    Ok(VarianceDecomposition { between, total: between + within.value, within, standard_error: se })
}

/// Unconditioned `E_ξ ⟨d, ξ⟩²_ρ`, which equals `‖d‖²_ρ` for white noise.
pub fn white_noise_inner_square(
    mdp: &TabularMdp,
    encoder: &LinearEncoder,
    d: &Vector,
    n: usize,
    seed: u64,
) -> Result<LossEstimate> {
    require_white_noise(encoder)?;
    let weighted = d.component_mul(mdp.rho());
    let values: Vec<f64> = (0..n.max(1) as u64)
        .into_par_iter()
        .map(|i| {
            let xi: RewardVector = encoder.k.sample_gaussian_reward(&mut stream(seed, i));
            weighted.dot(&xi).powi(2)
        })
        .collect();
    Ok(LossEstimate::from_samples(&values))
}
