//! Oracle suites. Each check records its measured error next to the
//! tolerance it is held to; failures are report entries, not errors.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use zsrl_core::encoding::{
    covariance, encode, gaussian_conditioning_oracle, posterior_mean, EncoderMode, FeatureSet, LinearEncoder,
};
use zsrl_core::feature_opt::{
    grad_check, mc_gaussian_gradient, orth_loss, sparse_code_with_correction, ComponentSpec, FrozenPolicyLoss,
    StopGradSnapshot, Trainer, TrainerConfig,
};
use zsrl_core::generators::{chain, random_mdp, random_policy};
use zsrl_core::linalg::{self, Mat, Vector};
use zsrl_core::loss::{
    enumerate_policies_oracle, loss_direct, loss_gaussian_form, loss_sparse_form, policy_family_exact, LossEstimate,
};
use zsrl_core::mdp::{RewardVector, TabularMdp};
use zsrl_core::occupancy::{OccupationModel, TdConfig, TdModel};
use zsrl_core::priors::{
    k_inner, sample_reward, KLaw, MetricK, Prior, Scaling, ScatteredSpec, SparseReward, WeightLaw,
};
use zsrl_core::rng::{seeded, stream, LabRng};
use zsrl_core::stats::CovarianceAccumulator;
use zsrl_core::variance::{
    conditional_second_moment, conditional_second_moment_exact, variance_penalized_loss, VariancePenaltyConfig,
};

use crate::error::{LabError, LabResult};
use crate::experiments::{experiment_bandit_overspecialization, BanditConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn below(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, tolerance, passed: measured <= tolerance, detail: String::new() }
    }

    /// Passes when `measured > threshold`.
    pub fn above(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self { name: name.into(), measured, tolerance: threshold, passed: measured > threshold, detail: String::new() }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn failed(name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Self { name: name.into(), measured: f64::NAN, tolerance: f64::NAN, passed: false, detail: err.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Encode with `φᵀKr`, omitting the `C⁻¹` preconditioner.
    DropCInverse,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mutation: Option<Mutation>,
}

pub const SUITES: &[&str] = &[
    "identities",
    "optimality",
    "posterior",
    "dirac",
    "theorem6",
    "sparse-form",
    "log-trick",
    "gradients",
    "scattered-limit",
    "training",
    "overspecialization",
    "td",
    "variance",
    "determinism",
];

type Suite = fn(&VerifyOptions) -> Vec<Check>;

fn suite_fn(name: &str) -> Option<Suite> {
    Some(match name {
        "identities" => identities,
        "optimality" => optimality,
        "posterior" => posterior,
        "dirac" => dirac,
        "theorem6" | "gaussian-form" => gaussian_form,
        "sparse-form" => sparse_form,
        "log-trick" => log_trick,
        "gradients" => gradients,
        "scattered-limit" => scattered_limit,
        "training" => training,
        "overspecialization" => overspecialization,
        "td" => td,
        "variance" => variance,
        "determinism" => determinism,
        _ => return None,
    })
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> LabResult<SuiteReport> {
    let f = suite_fn(name).ok_or_else(|| LabError::UnknownSuite { name: name.into(), available: SUITES.to_vec() })?;
    let checks = f(opts);
    Ok(SuiteReport { suite: name.into(), passed: checks.iter().all(|c| c.passed), checks })
}

/// Collect a fallible check, turning an error into a failed entry.
fn attempt(name: &str, f: impl FnOnce() -> zsrl_core::Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check::failed(name, e))
}

fn random_instance(rng: &mut LabRng, max_states: usize, max_actions: usize) -> zsrl_core::Result<TabularMdp> {
    let n = rng.random_range(2..=max_states);
    let a = rng.random_range(1..=max_actions);
    let gamma = rng.random_range(0.5..0.95);
    random_mdp(n, a, 0.0, gamma, rng)
}

fn random_reward(n: usize, rng: &mut LabRng) -> RewardVector {
    RewardVector::new(Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).expect("finite")
}

fn identities(opts: &VerifyOptions) -> Vec<Check> {
    const INSTANCES: u64 = 100;
    let worst = |f: &(dyn Fn(&mut LabRng) -> zsrl_core::Result<f64> + Sync)| -> zsrl_core::Result<f64> {
        let errs = (0..INSTANCES)
            .into_par_iter()
            .map(|i| f(&mut stream(opts.seed, i)))
            .collect::<zsrl_core::Result<Vec<f64>>>()?;
        Ok(errs.into_iter().fold(0.0, f64::max))
    };
    vec![
        attempt("return identity: E_d r = (1-γ) E_ρ0 V", || {
            let e = worst(&|rng| {
                let mdp = random_instance(rng, 6, 3)?;
                let pi = random_policy(mdp.n_states(), mdp.n_actions(), rng);
                let r = random_reward(mdp.n_states(), rng);
                let d = mdp.occupation_measure(&pi)?.dist;
                Ok((d.dot(&r) - (1.0 - mdp.gamma()) * mdp.expected_return(&r, &pi)?).abs())
            })?;
            Ok(Check::below("return identity: E_d r = (1-γ) E_ρ0 V", e, 1e-9))
        }),
        attempt("occupation = (1-γ) E M", || {
            let e = worst(&|rng| {
                let mdp = random_instance(rng, 6, 3)?;
                let pi = random_policy(mdp.n_states(), mdp.n_actions(), rng);
                let m = mdp.successor_measure(&pi)?.averaged(mdp.rho0(), &pi, mdp.gamma());
                Ok(linalg::vec_sup_norm(&(m - mdp.occupation_measure(&pi)?.dist)))
            })?;
            Ok(Check::below("occupation = (1-γ) E M", e, 1e-10))
        }),
        attempt("projection idempotence", || {
            let e = worst(&|rng| {
                let mdp = random_instance(rng, 7, 2)?;
                let n = mdp.n_states();
                let k = if rng.random_bool(0.5) {
                    MetricK::white_noise(mdp.rho())?
                } else {
                    MetricK::dirichlet(&mdp, rng.random_range(0.1..2.0))?
                };
                let phi = FeatureSet::random(n, rng.random_range(1..=n), rng)?;
                let c = covariance(&phi, &k)?;
                let r = random_reward(n, rng);
                let once = posterior_mean(&encode(&r, &phi, &k, &c)?, &phi);
                let twice = posterior_mean(&encode(&once, &phi, &k, &c)?, &phi);
                Ok(linalg::vec_sup_norm(&(&*twice - &*once)) / linalg::vec_sup_norm(&once).max(1.0))
            })?;
            Ok(Check::below("projection idempotence", e, 1e-10))
        }),
        attempt("Dirac/feature inner product", || {
            let e = worst(&|rng| {
                let n = rng.random_range(2..=7);
                let raw = Vector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
                let rho = &raw / raw.sum();
                let k = MetricK::white_noise(&rho)?;
                let mut err: f64 = 0.0;
                for _ in 0..20 {
                    let phi = random_reward(n, rng);
                    for s in 0..n {
                        let delta = SparseReward::new(vec![(s, 0)], vec![1.0], 1.0, &rho)?;
                        err = err.max((k_inner(&k, &delta.dense, &phi) - phi[s]).abs());
                    }
                }
                Ok(err)
            })?;
            Ok(Check::below("Dirac/feature inner product", e, 1e-10))
        }),
    ]
}

fn white(mdp: &TabularMdp) -> zsrl_core::Result<MetricK> {
    MetricK::white_noise(mdp.rho())
}

/// Largest value of a per-instance statistic over `count` parallel instances.
fn worst_of(
    count: u64,
    seed: u64,
    f: impl Fn(&mut LabRng, u64) -> zsrl_core::Result<f64> + Sync,
) -> zsrl_core::Result<f64> {
    let values =
        (0..count).into_par_iter().map(|i| f(&mut stream(seed, i), i)).collect::<zsrl_core::Result<Vec<f64>>>()?;
    Ok(values.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

fn optimality(opts: &VerifyOptions) -> Vec<Check> {
    let name = "exact greedy loss_direct within 3σ of the enumerated optimum (20 MDPs)";
    vec![attempt(name, || {
        let z = worst_of(20, opts.seed ^ 0x0b7, |rng, i| {
            let mdp = random_instance(rng, 4, 2)?;
            let n = mdp.n_states();
            let k = white(&mdp)?;
            let phi = FeatureSet::random(n, rng.random_range(1..=n), rng)?;
            let enc = LinearEncoder::new(phi.clone(), k.clone())?;
            let fam = policy_family_exact(&phi);
            let prior = Prior::Gaussian(k);
            let oracle = enumerate_policies_oracle(&mdp, &prior, &enc, &fam, 200, 200, opts.seed.wrapping_add(i))?;
            let direct = loss_direct(&mdp, &prior, &enc, &fam, 4000, opts.seed.wrapping_add(1000 + i))?;
            let sigma = direct.standard_error.hypot(oracle.standard_error);
            Ok((direct.value - oracle.oracle_loss) / sigma)
        })?;
        Ok(Check::below(name, z, 3.0).with_detail("measured: worst (direct − oracle)/σ"))
    })]
}

fn posterior(opts: &VerifyOptions) -> Vec<Check> {
    let mut checks = vec![attempt("posterior mean = Gaussian conditioning (50 instances)", || {
        let e = worst_of(50, opts.seed ^ 0x905, |rng, i| {
            let mdp = random_instance(rng, 7, 2)?;
            let n = mdp.n_states();
            let k = if i % 2 == 0 { white(&mdp)? } else { MetricK::dirichlet(&mdp, rng.random_range(0.1..2.0))? };
            let phi = FeatureSet::random(n, rng.random_range(1..=n), rng)?;
            let z = Vector::from_fn(phi.d(), |_, _| rng.random_range(-2.0..2.0));
            let oracle = gaussian_conditioning_oracle(&k, &phi, &z)?;
            Ok(linalg::vec_sup_norm(&(&*posterior_mean(&z, &phi) - oracle)))
        })?;
        Ok(Check::below("posterior mean = Gaussian conditioning (50 instances)", e, 1e-8))
    })];
    for (label, dirichlet) in [("white noise", false), ("Dirichlet", true)] {
        let name = format!("code covariance = C⁻¹, {label} ({} samples)", 100_000);
        checks.push(attempt(&name.clone(), || {
            let mdp = random_mdp(5, 2, 0.0, 0.9, &mut stream(opts.seed, 77))?;
            let k = if dirichlet { MetricK::dirichlet(&mdp, 0.5)? } else { white(&mdp)? };
            let phi = FeatureSet::random(5, 3, &mut stream(opts.seed, 78))?;
            let c = covariance(&phi, &k)?;
            let codes = (0..100_000u64)
                .into_par_iter()
                .map(|i| encode(&k.sample_gaussian_reward(&mut stream(opts.seed, 1000 + i)), &phi, &k, &c))
                .collect::<zsrl_core::Result<Vec<Vector>>>()?;
            let mut acc = CovarianceAccumulator::new(3);
            codes.iter().for_each(|z| acc.push(z));
            Ok(Check::below(name, acc.max_z_score_against(c.inverse()), 5.0)
                .with_detail("measured: worst entry z-score"))
        }));
    }
    checks
}

fn dirac(opts: &VerifyOptions) -> Vec<Check> {
    struct Group {
        count: usize,
        sum: Vector,
        sum_sq: Vector,
        z: Vector,
    }
    let mdp = match random_mdp(5, 2, 0.0, 0.9, &mut stream(opts.seed, 5)) {
        Ok(m) => m,
        Err(e) => return vec![Check::failed("dirac instance", e)],
    };
    let result = (|| -> zsrl_core::Result<Vec<Check>> {
        let k = white(&mdp)?;
        let phi = FeatureSet::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![-1.0], vec![0.5]])?;
        let enc = LinearEncoder::new(phi.clone(), k)?;
        let prior = Prior::Scattered(ScatteredSpec::goal_reaching());
        let draws = (0..100_000u64)
            .into_par_iter()
            .map(|i| {
                let r = sample_reward(&prior, &mdp, &mut stream(opts.seed, i)).dense;
                Ok((enc.encode(&r)?, r))
            })
            .collect::<zsrl_core::Result<Vec<_>>>()?;
        let mut groups: BTreeMap<Vec<u64>, Group> = BTreeMap::new();
        for (z, r) in &draws {
            let key = z.iter().map(|x| x.to_bits()).collect();
            let g = groups.entry(key).or_insert_with(|| Group {
                count: 0,
                sum: Vector::zeros(5),
                sum_sq: Vector::zeros(5),
                z: z.clone(),
            });
            g.count += 1;
            g.sum += &**r;
            g.sum_sq += r.component_mul(r);
        }
        let rho = mdp.rho();
        let state_codes =
            (0..5).map(|s| enc.encode(&dirac_reward(s, rho)?)).collect::<zsrl_core::Result<Vec<Vector>>>()?;
        let total = draws.len() as f64;
        let (mut num, mut den) = (0.0, 0.0);
        let mut oracle_err: f64 = 0.0;
        let mut oracle_tol: f64 = 1e-12;
        for g in groups.values() {
            let n = g.count as f64;
            let mean = &g.sum / n;
            let p = n / total;
            let gap = &mean - &*enc.posterior_mean(&g.z);
            num += p * gap.component_mul(&gap).dot(rho);
            den += p * mean.component_mul(&mean).dot(rho);
            // With injective features each code pins down its goal state.
            let goal = (0..5)
                .min_by(|&a, &b| (&state_codes[a] - &g.z).norm().total_cmp(&(&state_codes[b] - &g.z).norm()))
                .expect("five states");
            let oracle = dirac_reward(goal, rho)?;
            oracle_err = oracle_err.max(linalg::vec_sup_norm(&(&mean - &*oracle)));
            let var = (&g.sum_sq / n - mean.component_mul(&mean)).map(|v| v.max(0.0));
            oracle_tol = oracle_tol.max(3.0 * (var.max() / n).sqrt());
        }
        Ok(vec![
            Check::above("relative L²(ρ) gap between E[r | z] and φz", (num / den).sqrt(), 0.5)
                .with_detail(format!("{} distinct codes", groups.len())),
            Check::below("E[r | z] equals the Dirac reward of the goal", oracle_err, oracle_tol),
        ])
    })();
    result.unwrap_or_else(|e| vec![Check::failed("dirac", e)])
}

fn dirac_reward(s: usize, rho: &Vector) -> zsrl_core::Result<RewardVector> {
    Ok(SparseReward::new(vec![(s, 0)], vec![1.0], 1.0, rho)?.dense)
}

fn gaussian_form(opts: &VerifyOptions) -> Vec<Check> {
    let name = "|loss_direct − loss_gaussian_form| < 3σ at 10^4 samples (10 MDPs)";
    let mutation = opts.mutation;
    vec![attempt(name, || {
        let z = worst_of(10, opts.seed ^ 0x6a5, |rng, i| {
            let mdp = random_mdp(6, 2, 0.0, 0.9, rng)?;
            let k = if i % 2 == 0 { white(&mdp)? } else { MetricK::dirichlet(&mdp, 0.5)? };
            // An anisotropic basis keeps C far from the identity.
            let mixing = Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 0.3]);
            let phi = FeatureSet::new(FeatureSet::random(6, 2, rng)?.into_matrix() * mixing)?;
            let mut enc = LinearEncoder::new(phi.clone(), k.clone())?;
            if mutation == Some(Mutation::DropCInverse) {
                enc = enc.with_mode(EncoderMode::Unpreconditioned);
            }
            let fam = policy_family_exact(&phi);
            let direct = loss_direct(&mdp, &Prior::Gaussian(k), &enc, &fam, 10_000, opts.seed.wrapping_add(2 * i))?;
            let form = loss_gaussian_form(&mdp, &enc, &fam, 10_000, opts.seed.wrapping_add(2 * i + 1))?;
            Ok(direct.z_score(&form))
        })?;
        let detail = match mutation {
            Some(m) => format!("mutation {m:?} applied; measured: worst z-score"),
            None => "measured: worst z-score".into(),
        };
        Ok(Check::below(name, z, 3.0).with_detail(detail))
    })]
}

fn sparse_form(opts: &VerifyOptions) -> Vec<Check> {
    let specs = [("scattered", ScatteredSpec::default()), ("goal reaching", ScatteredSpec::goal_reaching())];
    specs
        .into_iter()
        .map(|(label, spec)| {
            let name = format!("|loss_direct − loss_sparse_form| < 3σ, {label} (10 MDPs)");
            attempt(&name.clone(), || {
                let z = worst_of(10, opts.seed ^ 0x5a7, |rng, i| {
                    let mdp = random_mdp(6, 2, 0.0, 0.9, rng)?;
                    let phi = FeatureSet::random(6, 2, rng)?;
                    let enc = LinearEncoder::new(phi.clone(), white(&mdp)?)?;
                    let fam = policy_family_exact(&phi);
                    let prior = Prior::Scattered(spec.clone());
                    let direct = loss_direct(&mdp, &prior, &enc, &fam, 10_000, opts.seed.wrapping_add(2 * i))?;
                    let form = loss_sparse_form(
                        &mdp,
                        &spec,
                        &enc,
                        &fam,
                        &OccupationModel::Exact,
                        10_000,
                        opts.seed.wrapping_add(2 * i + 1),
                    )?;
                    Ok(direct.z_score(&form))
                })?;
                Ok(Check::below(name, z, 3.0).with_detail("independent draws; measured: worst z-score"))
            })
        })
        .collect()
}

fn log_trick(opts: &VerifyOptions) -> Vec<Check> {
    (1..=3usize)
        .map(|d| {
            let name = format!("log-trick gradient of E zᵀAz, d = {d}, 10^6 samples");
            attempt(&name.clone(), || {
                let mut rng = stream(opts.seed ^ 0x18, d as u64);
                let b = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                let c = &b * b.transpose() + Mat::identity(d, d) * 0.5;
                let a0 = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                let a = (&a0 + a0.transpose()) * 0.5;
                let cov = zsrl_core::encoding::FeatureCovariance::from_matrix(c.clone())?;
                let samples: Vec<(Vector, f64)> = (0..1_000_000u64)
                    .into_par_iter()
                    .map(|i| {
                        let z = cov.sample_task(&mut stream(opts.seed.wrapping_add(d as u64), i));
                        let f = z.dot(&(&a * &z));
                        (z, f)
                    })
                    .collect();
                let est = zsrl_core::feature_opt::lemma8_surrogate(&c, &cov, &samples);
                let reference = -(cov.inverse() * &a * cov.inverse());
                let mut worst: f64 = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        worst = worst.max((est.grad[(i, j)] - reference[(i, j)]).abs() / est.stderr[(i, j)]);
                    }
                }
                Ok(Check::below(name, worst, 3.0).with_detail("measured: worst entry z-score"))
            })
        })
        .collect()
}

fn gradients(opts: &VerifyOptions) -> Vec<Check> {
    let mut checks = Vec::new();
    checks.push(attempt("orthonormality loss gradient", || {
        let mut rng = stream(opts.seed ^ 0x07, 0);
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut rng)?;
        let k = MetricK::dirichlet(&mdp, 0.5)?;
        let phi = FeatureSet::random(5, 2, &mut rng)?.into_matrix();
        let rep = grad_check(|p| orth_loss(p, &k), &phi, 1e-6);
        Ok(Check::below("orthonormality loss gradient", rep.max_rel_error, 1e-6))
    }));
    let frozen = (|| -> zsrl_core::Result<Vec<Check>> {
        let mut rng = stream(opts.seed ^ 0x07, 1);
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut rng)?;
        let k = white(&mdp)?;
        let phi = FeatureSet::random(5, 2, &mut rng)?;
        let quad = FrozenPolicyLoss::new(&mdp, &phi, &k, 160, 7.0)?;
        let fd = grad_check(|p| quad.loss_and_grad(p, true), phi.matrix(), 1e-4);
        let (_, analytic) = quad.loss_and_grad(phi.matrix(), true);
        let mc = mc_gaussian_gradient(&mdp, &phi, &k, 500_000, opts.seed, 1.0)?;
        let main_only = mc_gaussian_gradient(&mdp, &phi, &k, 500_000, opts.seed, 0.0)?;
        Ok(vec![
            Check::below("exact-loss quadrature gradient vs finite differences", fd.max_rel_error, 1e-4),
            Check::below("Monte-Carlo main + L_C gradient vs exact-loss gradient", mc.relative_error(&analytic), 5e-2)
                .with_detail(format!(
                    "10^6 codes; the main term alone is off by {:.3}",
                    main_only.relative_error(&analytic)
                )),
        ])
    })();
    checks.extend(frozen.unwrap_or_else(|e| vec![Check::failed("exact-loss gradient", e)]));
    checks.push(attempt("sparse code C⁻¹ correction gradient", || {
        let mut rng = stream(opts.seed ^ 0x07, 2);
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut rng)?;
        let k = white(&mdp)?;
        let phi = FeatureSet::random(5, 2, &mut rng)?.into_matrix();
        let snapshot = StopGradSnapshot::fresh(&phi, &k)?;
        let reward = SparseReward::new(vec![(1, 0), (4, 1)], vec![0.9, -0.6], 0.5f64.sqrt(), mdp.rho())?;
        let v = Vector::from_vec(vec![0.8, -0.5]);
        let f = |p: &Mat| -> f64 {
            let c = p.transpose() * k.matrix() * p;
            let b = p.row(1).transpose() * (reward.scale * 0.9) + p.row(4).transpose() * (reward.scale * -0.6);
            v.dot(&linalg::solve(&c, &b, "covariance").expect("invertible"))
        };
        let mut fd = Mat::zeros(5, 2);
        for i in 0..5 {
            for j in 0..2 {
                let (mut up, mut down) = (phi.clone(), phi.clone());
                up[(i, j)] += 1e-6;
                down[(i, j)] -= 1e-6;
                fd[(i, j)] = (f(&up) - f(&down)) / 2e-6;
            }
        }
        let probes = 1_000_000;
        let mut avg = Mat::zeros(5, 2);
        for _ in 0..probes {
            let s = mdp.sample_state(&mut rng);
            avg += sparse_code_with_correction(&phi, &snapshot, &reward, s, &k)?.vjp_probe(&v);
        }
        avg /= probes as f64;
        let rel = (avg - &fd).norm() / fd.norm();
        Ok(Check::below("sparse code C⁻¹ correction gradient", rel, 5e-2).with_detail("10^6 sampled probe states"))
    }));
    checks
}

fn scattered_limit(opts: &VerifyOptions) -> Vec<Check> {
    let name = "256-goal scattered covariance = diag(ρ)⁻¹ (10^5 samples)";
    vec![attempt(name, || {
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut stream(opts.seed, 8))?
            .with_rho(Vector::from_vec(vec![0.1, 0.15, 0.2, 0.25, 0.3]))?;
        let spec = ScatteredSpec {
            k_law: KLaw::Fixed(256),
            weight_law: WeightLaw::StandardNormal,
            scaling: Scaling::InvSqrtK,
        };
        let prior = Prior::Scattered(spec);
        let draws: Vec<RewardVector> = (0..100_000u64)
            .into_par_iter()
            .map(|i| sample_reward(&prior, &mdp, &mut stream(opts.seed, i)).dense)
            .collect();
        let mut acc = CovarianceAccumulator::new(5);
        draws.iter().for_each(|r| acc.push(r));
        let target = linalg::diag(&mdp.rho().map(|p| 1.0 / p));
        Ok(Check::below(name, acc.max_z_score_against(&target), 5.0).with_detail("measured: worst entry z-score"))
    })]
}

fn training(opts: &VerifyOptions) -> Vec<Check> {
    let cases: [(&str, u64); 3] = [("gaussian", 1), ("sparse", 2), ("mixture", 3)];
    cases
        .into_iter()
        .map(|(label, salt)| {
            let name = format!("{label} training beats its random orthonormal start on ≥ 8/10 seeds");
            attempt(&name.clone(), || {
                let wins = (0..10u64)
                    .into_par_iter()
                    .map(|i| -> zsrl_core::Result<bool> {
                        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut stream(opts.seed ^ (salt << 32), i))?;
                        let k = white(&mdp)?;
                        let comps = match label {
                            "gaussian" => vec![(1.0, ComponentSpec::Gaussian)],
                            "sparse" => vec![(1.0, ComponentSpec::Sparse(ScatteredSpec::default()))],
                            _ => vec![
                                (0.5, ComponentSpec::Gaussian),
                                (0.5, ComponentSpec::Sparse(ScatteredSpec::goal_reaching())),
                            ],
                        };
                        let config = TrainerConfig { steps: 2000, eval_interval: 500, ..TrainerConfig::new(2) };
                        let mut rng = seeded(opts.seed.wrapping_add(i));
                        let bundle = Trainer::new(&mdp, k, comps, config, &mut rng)?.run(&mut rng)?;
                        Ok(bundle.final_loss() < bundle.initial_loss())
                    })
                    .collect::<zsrl_core::Result<Vec<bool>>>()?;
                let count = wins.iter().filter(|w| **w).count();
                Ok(Check::above(name, count as f64, 7.0).with_detail("measured: seeds improved out of 10"))
            })
        })
        .collect()
}

fn overspecialization(opts: &VerifyOptions) -> Vec<Check> {
    let config = BanditConfig { seed: opts.seed, ..BanditConfig::default() };
    match experiment_bandit_overspecialization(&config) {
        Ok(report) => report
            .cases
            .iter()
            .map(|c| {
                let worst = c.seeds.iter().filter_map(|s| s.ratio).fold(0.0, f64::max);
                Check::above(
                    format!("bandit({}) collapses to two opposite spikes on ≥ 8/10 seeds", c.n_states),
                    c.successes as f64,
                    7.0,
                )
                .with_detail(format!("worst third/first ratio {worst:.2e}"))
            })
            .collect(),
        Err(e) => vec![Check::failed("overspecialization", e)],
    }
}

fn td(opts: &VerifyOptions) -> Vec<Check> {
    let cases: Vec<(&str, zsrl_core::Result<TabularMdp>)> =
        vec![("cycle2", chain(2, 0.9)), ("6-state random MDP", random_mdp(6, 2, 0.0, 0.9, &mut stream(opts.seed, 11)))];
    cases
        .into_iter()
        .map(|(label, mdp)| {
            let name = format!("TD density sup-error on {label}, 32 codes, 10^5 steps");
            attempt(&name.clone(), || {
                let mdp = mdp?;
                let n = mdp.n_states();
                let mut rng = stream(opts.seed, 12);
                let phi = FeatureSet::random(n, n.min(2), &mut rng)?;
                let codes: Vec<Vector> =
                    (0..32).map(|_| Vector::from_fn(phi.d(), |_, _| rng.random_range(-1.0..1.0))).collect();
                let policies = codes
                    .iter()
                    .map(|z| Ok(mdp.optimal_policy(&RewardVector::new(phi.matrix() * z)?)?.0))
                    .collect::<zsrl_core::Result<Vec<_>>>()?;
                let mut model = TdModel::new(&mdp, codes, policies, TdConfig::default())?;
                model.train(&mdp, 100_000, &mut rng);
                Ok(Check::below(name, model.sup_error(&mdp)?, 0.05))
            })
        })
        .collect()
}

fn variance(opts: &VerifyOptions) -> Vec<Check> {
    let setup = || -> zsrl_core::Result<(TabularMdp, LinearEncoder)> {
        let mut rng = stream(opts.seed, 13);
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut rng)?;
        let phi = FeatureSet::random(5, 2, &mut rng)?;
        let enc = LinearEncoder::new(phi, white(&mdp)?)?;
        Ok((mdp, enc))
    };
    vec![
        attempt("conditional second moment vs closed form (10^5 samples)", || {
            let (mdp, enc) = setup()?;
            let fam = policy_family_exact(&enc.phi);
            let z = Vector::from_vec(vec![0.6, -0.4]);
            let exact = conditional_second_moment_exact(&mdp, &enc, &fam, &z)?;
            let mc = conditional_second_moment(&mdp, &enc, &fam, &z, 100_000, opts.seed)?;
            Ok(Check::below(
                "conditional second moment vs closed form (10^5 samples)",
                (mc.value - exact).abs() / mc.standard_error,
                3.0,
            )
            .with_detail("measured: z-score"))
        }),
        attempt("penalized loss at λ = 0 is bit-identical to loss_direct", || {
            let (mdp, enc) = setup()?;
            let fam = policy_family_exact(&enc.phi);
            let prior = Prior::Gaussian(enc.k.clone());
            let plain: LossEstimate = loss_direct(&mdp, &prior, &enc, &fam, 2000, opts.seed)?;
            let pen =
                variance_penalized_loss(&mdp, &prior, &enc, &fam, &VariancePenaltyConfig::new(0.0)?, 2000, opts.seed)?;
            let same = pen.estimate.value.to_bits() == plain.value.to_bits()
                && pen.estimate.standard_error.to_bits() == plain.standard_error.to_bits();
            Ok(Check::below(
                "penalized loss at λ = 0 is bit-identical to loss_direct",
                if same { 0.0 } else { 1.0 },
                0.0,
            )
            .with_detail("measured: 1 if any bit differs"))
        }),
    ]
}

fn determinism(opts: &VerifyOptions) -> Vec<Check> {
    use crate::config::ExperimentConfig;
    use crate::experiments::{experiment_visr_comparison, VisrConfig};
    use crate::output::json_bytes;

    let config = serde_json::json!({
        "mdp": {"generator": {"name": "random_mdp", "n_states": 5, "n_actions": 2, "gamma": 0.9}},
        "prior": {"type": "gaussian", "metric": "white_noise"},
        "trainer": {"d": 2, "steps": 300, "eval_interval": 100},
        "eval": {"estimators": ["exact", "direct", "gaussian_form"], "n_samples": 500, "variance_lambda": 0.5},
        "seed": opts.seed
    });
    let bandit = BanditConfig { n_states: vec![4], n_seeds: 3, steps: 400, seed: opts.seed, ..BanditConfig::default() };
    let visr = VisrConfig { n_seeds: 2, steps: 200, seed: opts.seed, ..VisrConfig::default() };
    type Job = Box<dyn Fn() -> LabResult<Vec<u8>> + Sync>;
    let jobs: Vec<(&str, Job)> = vec![
        (
            "train run",
            Box::new(move || {
                let cfg = ExperimentConfig::from_json(&config.to_string())?;
                let out = crate::run::execute(&cfg)?;
                json_bytes(&out.config_hash, &out.metrics)
            }),
        ),
        (
            "bandit-overspec",
            Box::new(move || {
                json_bytes(&crate::config::hash_of(&bandit), &experiment_bandit_overspecialization(&bandit)?)
            }),
        ),
        (
            "visr-compare",
            Box::new(move || json_bytes(&crate::config::hash_of(&visr), &experiment_visr_comparison(&visr)?)),
        ),
    ];
    jobs.iter()
        .map(|(label, job)| {
            let name = format!("{label}: byte-identical metrics with 1, 2 and 4 workers");
            let runs: LabResult<Vec<Vec<u8>>> = [1usize, 2, 4]
                .iter()
                .map(|&w| {
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(w)
                        .build()
                        .map_err(|e| LabError::Config(e.to_string()))?;
                    pool.install(job)
                })
                .collect();
            match runs {
                Ok(runs) => {
                    let mismatches = runs.iter().filter(|r| **r != runs[0]).count();
                    Check::below(name, mismatches as f64, 0.0).with_detail("measured: runs differing from 1 worker")
                }
                Err(e) => Check::failed(name, e),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_never_passes() {
        assert!(!Check::below("x", f64::NAN, 1.0).passed);
        assert!(!Check::above("x", f64::NAN, 1.0).passed);
        assert!(Check::below("x", 1.0, 1.0).passed);
        assert!(!Check::above("x", 1.0, 1.0).passed);
    }

    #[test]
    fn every_listed_suite_resolves() {
        for name in SUITES {
            assert!(suite_fn(name).is_some(), "{name}");
        }
        assert!(suite_fn("gaussian-form").is_some());
        assert!(matches!(run_suite("nope", &VerifyOptions::default()), Err(LabError::UnknownSuite { .. })));
    }

    #[test]
    fn errors_become_failed_checks() {
        let c = attempt("boom", || Err(zsrl_core::Error::Unsupported("no".into())));
        assert!(!c.passed);
        assert!(c.detail.contains("no"));
    }

    #[test]
    fn identities_suite_passes() {
        let report = run_suite("identities", &VerifyOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checks.len(), 4);
    }
}
