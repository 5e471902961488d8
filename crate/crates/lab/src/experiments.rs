//! The two qualitative experiments: support collapse of a one-dimensional
//! feature on bandits, and exact vs VISR-normalized training.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use zsrl_core::encoding::{FeatureSet, LinearEncoder};
use zsrl_core::feature_opt::{train_features_gaussian, CodeLaw, TracePoint, TrainerConfig};
use zsrl_core::generators::{bandit, GeneratorSpec};
use zsrl_core::linalg::{mat_to_rows, Mat};
use zsrl_core::loss::{exact_gaussian_loss, PolicyFamily};
use zsrl_core::priors::MetricK;
use zsrl_core::rng::{seeded, stream};

use crate::config::hash_of;
use crate::error::{LabError, LabResult};
use crate::output::{write_json, write_report, write_trace};

fn default_bandit_states() -> Vec<usize> {
    vec![3, 8]
}

fn default_seeds() -> usize {
    10
}

fn default_bandit_gamma() -> f64 {
    0.95
}

fn default_steps() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    #[serde(default = "default_bandit_states")]
    pub n_states: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bandit_gamma")]
    pub gamma: f64,
    /// Extra discounts to rerun at, exposing the finite-horizon transient.
    #[serde(default)]
    pub gamma_sweep: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Seeds that must succeed out of `n_seeds`.
    #[serde(default = "default_required")]
    pub required_successes: usize,
}

fn default_required() -> usize {
    8
}

impl Default for BanditConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSeedResult {
    pub seed: u64,
    pub feature: Vec<f64>,
    /// Two largest-magnitude entries, largest first.
    pub top_two: [f64; 2],
    pub opposite_signs: bool,
    /// Third-largest over largest magnitude; absent when `n < 3`.
    pub ratio: Option<f64>,
    pub success: bool,
    pub final_loss: f64,
    #[serde(skip)]
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditCase {
    pub n_states: usize,
    pub gamma: f64,
    pub degenerate: bool,
    pub successes: usize,
    pub passed: bool,
    pub seeds: Vec<BanditSeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditReport {
    pub cases: Vec<BanditCase>,
    pub passed: bool,
}

fn bandit_seed(n: usize, gamma: f64, steps: usize, seed: u64) -> zsrl_core::Result<BanditSeedResult> {
    let mdp = bandit(n, gamma)?;
    let k = MetricK::white_noise(mdp.rho())?;
    let config = TrainerConfig { steps, eval_interval: (steps / 10).max(1), ..TrainerConfig::new(1) };
    let bundle = train_features_gaussian(&mdp, &k, &config, &mut seeded(seed))?;
    let feature: Vec<f64> = bundle.phi.matrix().column(0).iter().copied().collect();
    let mut by_size = feature.clone();
    by_size.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let top_two = [by_size[0], by_size.get(1).copied().unwrap_or(0.0)];
    let opposite_signs = top_two[0] * top_two[1] < 0.0;
    let ratio = (n >= 3).then(|| by_size[2].abs() / by_size[0].abs());
    let success = opposite_signs && ratio.is_none_or(|r| r < 0.1);
    Ok(BanditSeedResult {
        seed,
        feature,
        top_two,
        opposite_signs,
        ratio,
        success,
        final_loss: bundle.final_loss(),
        trace: bundle.trace,
    })
}

pub fn experiment_bandit_overspecialization(config: &BanditConfig) -> LabResult<BanditReport> {
    if config.n_states.iter().any(|&n| n < 2) || config.n_seeds == 0 {
        return Err(LabError::Config("bandit sizes must be at least 2 and n_seeds positive".into()));
    }
    let mut gammas = vec![config.gamma];
    gammas.extend(config.gamma_sweep.iter().copied().filter(|g| *g != config.gamma));
    let mut cases = Vec::new();
    for &gamma in &gammas {
        for &n in &config.n_states {
            let seeds = (0..config.n_seeds as u64)
                .into_par_iter()
                .map(|i| bandit_seed(n, gamma, config.steps, config.seed.wrapping_add(i)))
                .collect::<zsrl_core::Result<Vec<_>>>()
                .map_err(LabError::stage("bandit training"))?;
            let successes = seeds.iter().filter(|s| s.success).count();
            cases.push(BanditCase {
                n_states: n,
                gamma,
                degenerate: n < 3,
                successes,
                passed: successes >= config.required_successes.min(config.n_seeds),
                seeds,
            });
        }
    }
    // Only the headline discount decides the verdict; the sweep is descriptive.
    let passed = cases.iter().filter(|c| c.gamma == config.gamma).all(|c| c.passed);
    Ok(BanditReport { cases, passed })
}

pub fn write_bandit_outputs(config: &BanditConfig, report: &BanditReport, out: &Path) -> LabResult<String> {
    let hash = hash_of(config);
    write_json(out, "metrics.json", &hash, report)?;
    let runs: Vec<(String, &[TracePoint])> = report
        .cases
        .iter()
        .flat_map(|c| {
            c.seeds.iter().map(move |s| (format!("n{}_g{}_seed{}", c.n_states, c.gamma, s.seed), s.trace.as_slice()))
        })
        .collect();
    write_trace(out, &hash, &runs)?;
    let features: Vec<_> = report
        .cases
        .iter()
        .map(|c| {
            serde_json::json!({ "n_states": c.n_states, "gamma": c.gamma,
            "features": c.seeds.iter().map(|s| &s.feature).collect::<Vec<_>>() })
        })
        .collect();
    write_json(out, "checkpoint.json", &hash, &serde_json::json!({ "cases": features }))?;
    let mut body = String::from(
        "One-dimensional features trained on bandit MDPs with the white-noise prior. A seed succeeds when the \
         two largest entries have opposite signs and the third-largest magnitude is below a tenth of the largest.\n\n",
    );
    for c in &report.cases {
        body += &format!(
            "## n = {}, discount {}\n\n{} of {} seeds succeed{}.\n\n| seed | top two | ratio | final loss |\n|---|---|---|---|\n",
            c.n_states,
            c.gamma,
            c.successes,
            c.seeds.len(),
            if c.degenerate { " (degenerate size: only two entries, ratio test vacuous)" } else { "" }
        );
        for s in &c.seeds {
            let ratio = s.ratio.map_or("-".to_string(), |r| format!("{r:.2e}"));
            body += &format!(
                "| {} | {:.3}, {:.3} | {} | {:.4} |\n",
                s.seed, s.top_two[0], s.top_two[1], ratio, s.final_loss
            );
        }
        body.push('\n');
    }
    body += &format!("Verdict: {}\n", if report.passed { "PASS" } else { "FAIL" });
    write_report(out, &hash, "Bandit overspecialization", &body)?;
    Ok(hash)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisrConfig {
    #[serde(default = "default_visr_mdp")]
    pub mdp: GeneratorSpec,
    #[serde(default = "default_visr_d")]
    pub d: usize,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Initial feature scale for the exact scheme.
    #[serde(default = "default_scale")]
    pub init_scale: f64,
}

fn default_visr_mdp() -> GeneratorSpec {
    serde_json::from_value(serde_json::json!({ "name": "random_mdp", "n_states": 6, "n_actions": 2, "gamma": 0.9 }))
        .expect("valid generator")
}

fn default_visr_d() -> usize {
    2
}

fn default_scale() -> f64 {
    1.0
}

impl Default for VisrConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisrSeedResult {
    pub seed: u64,
    pub exact_scheme_loss: f64,
    pub visr_scheme_loss: f64,
    #[serde(skip)]
    pub traces: [Vec<TracePoint>; 2],
    #[serde(skip)]
    pub features: [Vec<Vec<f64>>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisrReport {
    pub n_states: usize,
    pub d: usize,
    /// Exact loss of full-rank features, the best any `d` can reach.
    pub full_rank_loss: f64,
    pub seeds: Vec<VisrSeedResult>,
    pub mean_exact_scheme: f64,
    pub mean_visr_scheme: f64,
}

fn visr_seed(config: &VisrConfig, seed: u64) -> zsrl_core::Result<VisrSeedResult> {
    let mdp = config.mdp.generate(&mut stream(config.seed, 0))?;
    let k = MetricK::white_noise(mdp.rho())?;
    let exact = TrainerConfig {
        steps: config.steps,
        eval_interval: (config.steps / 10).max(1),
        init_scale: config.init_scale,
        ..TrainerConfig::new(config.d)
    };
    let visr = TrainerConfig {
        code_law: CodeLaw::Sphere,
        normalize_rows: true,
        lambda_c: 0.0,
        lambda_orth: 0.0,
        init_scale: 1.0,
        ..exact.clone()
    };
    let a = train_features_gaussian(&mdp, &k, &exact, &mut seeded(seed))?;
    let b = train_features_gaussian(&mdp, &k, &visr, &mut seeded(seed))?;
    Ok(VisrSeedResult {
        seed,
        exact_scheme_loss: a.final_loss(),
        visr_scheme_loss: b.final_loss(),
        features: [mat_to_rows(a.phi.matrix()), mat_to_rows(b.phi.matrix())],
        traces: [a.trace, b.trace],
    })
}

pub fn experiment_visr_comparison(config: &VisrConfig) -> LabResult<VisrReport> {
    if config.n_seeds == 0 {
        return Err(LabError::Config("n_seeds must be positive".into()));
    }
    let mdp = config.mdp.generate(&mut stream(config.seed, 0)).map_err(LabError::stage("mdp generation"))?;
    if config.d == 0 || config.d > mdp.n_states() {
        return Err(LabError::Config(format!("d must lie in 1..={}", mdp.n_states())));
    }
    let n = mdp.n_states();
    let stage = LabError::stage("full-rank bound");
    let k = MetricK::white_noise(mdp.rho()).map_err(stage)?;
    let full = FeatureSet::new(Mat::identity(n, n)).map_err(stage)?;
    let enc = LinearEncoder::new(full.clone(), k).map_err(stage)?;
    let opts = TrainerConfig::new(config.d).eval;
    let full_rank_loss = exact_gaussian_loss(&mdp, &enc, &PolicyFamily::exact_uncached(&full), &opts).map_err(stage)?;
    let seeds = (0..config.n_seeds as u64)
        .into_par_iter()
        .map(|i| visr_seed(config, config.seed.wrapping_add(i)))
        .collect::<zsrl_core::Result<Vec<_>>>()
        .map_err(LabError::stage("visr training"))?;
    let mean = |f: fn(&VisrSeedResult) -> f64| seeds.iter().map(f).sum::<f64>() / seeds.len() as f64;
    Ok(VisrReport {
        n_states: n,
        d: config.d,
        full_rank_loss,
        mean_exact_scheme: mean(|s| s.exact_scheme_loss),
        mean_visr_scheme: mean(|s| s.visr_scheme_loss),
        seeds,
    })
}

pub fn write_visr_outputs(config: &VisrConfig, report: &VisrReport, out: &Path) -> LabResult<String> {
    let hash = hash_of(config);
    write_json(out, "metrics.json", &hash, report)?;
    let labels = ["exact", "visr"];
    let runs: Vec<(String, &[TracePoint])> = report
        .seeds
        .iter()
        .flat_map(|s| (0..2).map(move |v| (format!("{}_seed{}", labels[v], s.seed), s.traces[v].as_slice())))
        .collect();
    write_trace(out, &hash, &runs)?;
    let features: Vec<_> = report
        .seeds
        .iter()
        .map(|s| serde_json::json!({ "seed": s.seed, "exact": s.features[0], "visr": s.features[1] }))
        .collect();
    write_json(out, "checkpoint.json", &hash, &serde_json::json!({ "seeds": features }))?;
    let mut body = format!(
        "Variant (a) samples z ∼ N(0, C⁻¹) with unconstrained features; variant (b) samples z uniformly on the unit \
         sphere and renormalizes every feature row after each step, with no covariance correction. \
         Successor-feature machinery of the original VISR is replaced by exact greedy policies and exact \
         occupancies. Both are scored with the exact white-noise loss under their own encoder.\n\n\
         {} states, d = {}, full-rank bound {:.6}.\n\n| seed | exact scheme | VISR scheme |\n|---|---|---|\n",
        report.n_states, report.d, report.full_rank_loss
    );
    for s in &report.seeds {
        body += &format!("| {} | {:.6} | {:.6} |\n", s.seed, s.exact_scheme_loss, s.visr_scheme_loss);
    }
    body += &format!("| mean | {:.6} | {:.6} |\n", report.mean_exact_scheme, report.mean_visr_scheme);
    write_report(out, &hash, "Exact vs VISR-normalized training", &body)?;
    Ok(hash)
}
