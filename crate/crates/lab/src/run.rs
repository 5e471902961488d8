//! Config-driven pipeline: load or generate the MDP, train features,
//! evaluate the requested estimators and write the run artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zsrl_core::encoding::{FeatureSet, LinearEncoder};
use zsrl_core::feature_opt::{mixture_components, random_orthonormal_features, ComponentSpec, TrainedBundle, Trainer};
use zsrl_core::linalg::mat_to_rows;
use zsrl_core::loss::{
    exact_gaussian_loss, exact_sparse_loss, loss_direct, loss_gaussian_form, loss_sparse_form, policy_family_exact,
    ExactLossOptions, LossEstimate, PolicyFamily,
};
use zsrl_core::mdp::TabularMdp;
use zsrl_core::occupancy::OccupationModel;
use zsrl_core::priors::{MetricK, Prior};
use zsrl_core::rng::stream;
use zsrl_core::variance::{variance_penalized_loss, VariancePenaltyConfig};

use crate::config::{Estimator, ExperimentConfig};
use crate::error::{LabError, LabResult};
use crate::output::{write_json, write_report, write_trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub value: f64,
    pub standard_error: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl From<&LossEstimate> for LossRecord {
    fn from(e: &LossEstimate) -> Self {
        Self { value: e.value, standard_error: e.standard_error, n_samples: e.n_samples, lambda: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub d: usize,
    pub steps: usize,
    pub initial_exact_loss: f64,
    pub final_exact_loss: f64,
    /// Exact loss of an independent random `K`-orthonormal feature set.
    pub baseline_exact_loss: Option<f64>,
    pub losses: BTreeMap<String, LossRecord>,
    /// Estimators that do not apply to this prior/encoder pair.
    pub skipped: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub phi: Vec<Vec<f64>>,
    pub c_ema: Vec<Vec<f64>>,
    pub codebook: Vec<Vec<f64>>,
    pub q_tables: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub config_hash: String,
    pub bundle: TrainedBundle,
}

struct Resolved {
    mdp: TabularMdp,
    prior: Prior,
    k: MetricK,
    components: Vec<(f64, ComponentSpec)>,
    /// Whether every Gaussian piece of the prior uses the encoder metric.
    matched: bool,
}

fn resolve(config: &ExperimentConfig) -> LabResult<Resolved> {
    let mdp = config.mdp.load(&mut stream(config.seed, 0))?;
    let prior = config.prior.resolve(&mdp).map_err(LabError::stage("prior"))?;
    let (prior_k, components) = mixture_components(&mdp, &prior).map_err(LabError::stage("prior"))?;
    let k = config.encoder.metric(&mdp, prior_k.clone()).map_err(LabError::stage("encoder"))?;
    let has_gaussian = components.iter().any(|(_, c)| matches!(c, ComponentSpec::Gaussian));
    let matched = !has_gaussian || prior_k.matrix() == k.matrix();
    Ok(Resolved { mdp, prior, k, components, matched })
}

fn exact_prior_loss(
    mdp: &TabularMdp,
    components: &[(f64, ComponentSpec)],
    encoder: &LinearEncoder,
    family: &PolicyFamily,
    opts: &ExactLossOptions,
) -> zsrl_core::Result<f64> {
    let mut total = 0.0;
    for (w, c) in components {
        let l = match c {
            ComponentSpec::Gaussian => exact_gaussian_loss(mdp, encoder, family, opts)?,
            ComponentSpec::Sparse(spec) => exact_sparse_loss(mdp, spec, encoder, family, opts)?,
        };
        total += w * l;
    }
    Ok(total)
}

/// Runs the pipeline without touching the filesystem (beyond loading an
/// MDP file).
pub fn execute(config: &ExperimentConfig) -> LabResult<RunOutput> {
    config.validate()?;
    let r = resolve(config)?;
    let mut train_rng = stream(config.seed, 1);
    let trainer = Trainer::new(&r.mdp, r.k.clone(), r.components.clone(), config.trainer.clone(), &mut train_rng)
        .map_err(LabError::stage("training"))?;
    let bundle = trainer.run(&mut train_rng).map_err(LabError::stage("training"))?;

    let encoder = LinearEncoder::new(bundle.phi.clone(), r.k.clone()).map_err(LabError::stage("evaluation"))?;
    let eval_seed = zsrl_core::rng::fork_seed(&mut stream(config.seed, 3));
    let n = config.eval.n_samples;
    let opts = config.trainer.eval;
    let mut losses = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    let stage = LabError::stage;
    let single_sparse = match (&r.prior, r.components.as_slice()) {
        (Prior::Scattered(spec), _) => Some(spec.clone()),
        _ => None,
    };
    let pure_gaussian = matches!(r.prior, Prior::Gaussian(_));
    for est in &config.eval.estimators {
        let (name, result): (&str, Option<LossEstimate>) = match est {
            Estimator::Exact => {
                if r.matched {
                    let v = exact_prior_loss(&r.mdp, &r.components, &encoder, &bundle.family, &opts)
                        .map_err(stage("evaluation"))?;
                    ("exact", Some(LossEstimate::exact(v)))
                } else {
                    skipped.insert("exact".into(), "encoder metric differs from the prior metric".into());
                    ("exact", None)
                }
            }
            Estimator::Direct => (
                "direct",
                Some(
                    loss_direct(&r.mdp, &r.prior, &encoder, &bundle.family, n, eval_seed)
                        .map_err(stage("evaluation"))?,
                ),
            ),
            Estimator::GaussianForm => {
                if pure_gaussian && r.matched {
                    let e = loss_gaussian_form(&r.mdp, &encoder, &bundle.family, n, eval_seed)
                        .map_err(stage("evaluation"))?;
                    ("gaussian_form", Some(e))
                } else {
                    skipped.insert("gaussian_form".into(), "needs a Gaussian prior with the matched encoder".into());
                    ("gaussian_form", None)
                }
            }
            Estimator::SparseForm => match &single_sparse {
                Some(spec) => {
                    let e = loss_sparse_form(&r.mdp, spec, &encoder, &bundle.family, &bundle.occupancy, n, eval_seed)
                        .map_err(stage("evaluation"))?;
                    ("sparse_form", Some(e))
                }
                None => {
                    skipped.insert("sparse_form".into(), "needs a scattered prior".into());
                    ("sparse_form", None)
                }
            },
        };
        if let Some(e) = result {
            losses.insert(name.to_string(), LossRecord::from(&e));
        }
    }
    if let Some(lambda) = config.eval.variance_lambda {
        let cfg = VariancePenaltyConfig::new(lambda).map_err(|e| LabError::Config(e.to_string()))?;
        let pen = variance_penalized_loss(&r.mdp, &r.prior, &encoder, &bundle.family, &cfg, n, eval_seed)
            .map_err(stage("evaluation"))?;
        let mut rec = LossRecord::from(&pen.estimate);
        rec.lambda = Some(lambda);
        losses.insert("variance_penalized".into(), rec);
    }

    let baseline_exact_loss = if r.matched {
        let phi =
            random_orthonormal_features(r.mdp.n_states(), config.trainer.d, &r.k, 1.0, &mut stream(config.seed, 2))
                .map_err(stage("baseline"))?;
        let enc = LinearEncoder::new(phi.clone(), r.k.clone()).map_err(stage("baseline"))?;
        Some(
            exact_prior_loss(&r.mdp, &r.components, &enc, &policy_family_exact(&phi), &opts)
                .map_err(stage("baseline"))?,
        )
    } else {
        None
    };

    let metrics = RunMetrics {
        seed: config.seed,
        n_states: r.mdp.n_states(),
        n_actions: r.mdp.n_actions(),
        gamma: r.mdp.gamma(),
        d: config.trainer.d,
        steps: bundle.steps,
        initial_exact_loss: bundle.initial_loss(),
        final_exact_loss: bundle.final_loss(),
        baseline_exact_loss,
        losses,
        skipped,
    };
    Ok(RunOutput { metrics, config_hash: config.hash(), bundle })
}

pub fn checkpoint(bundle: &TrainedBundle) -> Checkpoint {
    Checkpoint {
        phi: mat_to_rows(bundle.phi.matrix()),
        c_ema: mat_to_rows(&bundle.c_ema),
        codebook: bundle.codebook.iter().map(|z| z.iter().copied().collect()).collect(),
        q_tables: bundle.q_tables.iter().map(mat_to_rows).collect(),
    }
}

/// Runs the pipeline and writes `metrics.json`, `trace.csv`,
/// `checkpoint.json` and `report.md` into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> LabResult<RunOutput> {
    let result = execute(config)?;
    let hash = &result.config_hash;
    write_json(out, "metrics.json", hash, &result.metrics)?;
    write_trace(out, hash, &[(format!("seed{}", config.seed), result.bundle.trace.as_slice())])?;
    write_json(out, "checkpoint.json", hash, &checkpoint(&result.bundle))?;
    write_json(out, "config.json", hash, config)?;
    write_report(out, hash, "Training run", &run_report(&result.metrics, &result.bundle))?;
    Ok(result)
}

fn run_report(m: &RunMetrics, bundle: &TrainedBundle) -> String {
    let mut s = format!(
        "MDP with {} states, {} actions, discount {}; d = {}; {} optimizer steps.\n\n",
        m.n_states, m.n_actions, m.gamma, m.d, m.steps
    );
    s += &format!(
        "| quantity | value |\n|---|---|\n| initial exact loss | {:.6} |\n| final exact loss | {:.6} |\n",
        m.initial_exact_loss, m.final_exact_loss
    );
    if let Some(b) = m.baseline_exact_loss {
        s += &format!("| random orthonormal baseline | {b:.6} |\n");
    }
    for (name, rec) in &m.losses {
        s += &format!("| {name} | {:.6} ± {:.2e} (n = {}) |\n", rec.value, rec.standard_error, rec.n_samples);
    }
    for (name, why) in &m.skipped {
        s += &format!("\n`{name}` skipped: {why}.");
    }
    if let OccupationModel::Td(td) = &bundle.occupancy {
        s += &format!("\n\nTD occupancy model with {} codebook entries after {} updates.", td.len(), td.step);
    }
    s.push('\n');
    s
}

/// Exact loss of fixed features under a resolved config, used by `eval-loss`.
pub fn evaluate_features(config: &ExperimentConfig, phi: FeatureSet) -> LabResult<RunMetrics> {
    let r = resolve(config)?;
    let stage = LabError::stage;
    let encoder = LinearEncoder::new(phi.clone(), r.k.clone()).map_err(stage("evaluation"))?;
    let family = policy_family_exact(&phi);
    let eval_seed = zsrl_core::rng::fork_seed(&mut stream(config.seed, 3));
    let mut losses = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    let exact = if r.matched {
        let v = exact_prior_loss(&r.mdp, &r.components, &encoder, &family, &config.trainer.eval)
            .map_err(stage("evaluation"))?;
        losses.insert("exact".into(), LossRecord::from(&LossEstimate::exact(v)));
        v
    } else {
        skipped.insert("exact".into(), "encoder metric differs from the prior metric".into());
        f64::NAN
    };
    let direct = loss_direct(&r.mdp, &r.prior, &encoder, &family, config.eval.n_samples, eval_seed)
        .map_err(stage("evaluation"))?;
    losses.insert("direct".into(), LossRecord::from(&direct));
    Ok(RunMetrics {
        seed: config.seed,
        n_states: r.mdp.n_states(),
        n_actions: r.mdp.n_actions(),
        gamma: r.mdp.gamma(),
        d: phi.d(),
        steps: 0,
        initial_exact_loss: exact,
        final_exact_loss: exact,
        baseline_exact_loss: None,
        losses,
        skipped,
    })
}
